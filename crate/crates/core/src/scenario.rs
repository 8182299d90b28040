//! The three train/test scenarios and a one-shot driver that runs the
//! detector and the classical baselines on one of them.
//!
//! | scenario | train                                   | test                   |
//! |----------|-----------------------------------------|------------------------|
//! | 1        | simulated 0..40                         | simulated 40..50       |
//! | 2        | pseudo-real 0..60                       | pseudo-real 60..100    |
//! | 3        | simulated 0..40 + pseudo-real 0..60     | pseudo-real 60..100    |

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::annotate::{
    generate_dataset, load_samples, read_dataset_config, AnnotateError, GenConfig, ImageGeometry, Preset, Sample,
    MANIFEST,
};
use crate::detect::{
    detect, hog_detect, hough_detect, template_bank, template_match, train_detector, train_hog_on_samples,
    write_predictions, DetectError, Detection, DetectorConfig, DetectorModel, HogConfig, HoughParams, TrainConfig,
    TrainLog,
};
use crate::eval::{evaluate, EvalReport};
use crate::fdtd::SolverConfig;
use crate::nn::{accuracy, load_cifar10_grayscale, patches_from_samples, pretrain_backbone, NnError, PretrainConfig, Weights};
use crate::{derive_seed, parallel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error("{}: holds {found} images, the scenario needs {needed}", dir.display())]
    TooSmall { dir: PathBuf, found: usize, needed: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

fn io_err(p: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: p.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    One,
    Two,
    Three,
}

impl Scenario {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(Self::One),
            2 => Some(Self::Two),
            3 => Some(Self::Three),
            _ => None,
        }
    }

    pub fn number(&self) -> u32 {
        match self {
            Self::One => 1,
            Self::Two => 2,
            Self::Three => 3,
        }
    }
}

pub const SIM_TRAIN: Range<usize> = 0..40;
pub const SIM_TEST: Range<usize> = 40..50;
pub const REAL_TRAIN: Range<usize> = 0..60;
pub const REAL_TEST: Range<usize> = 60..100;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<(PathBuf, Range<usize>)>,
    pub test: (PathBuf, Range<usize>),
}

pub fn split(s: Scenario, simulated: &Path, pseudo_real: &Path) -> Split {
    let sim = simulated.to_path_buf();
    let real = pseudo_real.to_path_buf();
    match s {
        Scenario::One => Split {
            train: vec![(sim.clone(), SIM_TRAIN)],
            test: (sim, SIM_TEST),
        },
        Scenario::Two => Split {
            train: vec![(real.clone(), REAL_TRAIN)],
            test: (real, REAL_TEST),
        },
        Scenario::Three => Split {
            train: vec![(sim, SIM_TRAIN), (real.clone(), REAL_TRAIN)],
            test: (real, REAL_TEST),
        },
    }
}

/// Generates the preset dataset into `dir` unless a finished one (manifest
/// present) with the same config is already there.
pub fn ensure_dataset(dir: &Path, preset: Preset, solver: &SolverConfig) -> Result<GenConfig> {
    let cfg = GenConfig::preset(preset);
    if dir.join(MANIFEST).is_file() && read_dataset_config(dir).is_ok_and(|c| c == cfg) {
        return Ok(cfg);
    }
    generate_dataset(&cfg, dir, solver)?;
    Ok(cfg)
}

fn load_range(dir: &Path, r: &Range<usize>) -> Result<Vec<Sample>> {
    let s = load_samples(dir, Some(r.clone()))?;
    if s.len() < r.len() {
        return Err(ScenarioError::TooSmall {
            dir: dir.to_path_buf(),
            found: s.len(),
            needed: r.len(),
        });
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Frcnn,
    Hog,
    Template,
    Hough,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Frcnn, Method::Hog, Method::Template, Method::Hough];

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Frcnn => "frcnn",
            Self::Hog => "hog",
            Self::Template => "template",
            Self::Hough => "hough",
        }
    }
}

/// Where the backbone's pretraining patches come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PretrainSource {
    /// Directory of Cifar-10 binary batches.
    Cifar(PathBuf),
    /// Hyperbola vs background patches from the training images.
    Patches { per_class: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub weights: Weights,
    /// Accuracy on the Cifar test batch, or on the held-out fifth of the
    /// patches.
    pub held_out_accuracy: f64,
}

/// `data_batch_*.bin` and `test_batch.bin` under `dir`, sorted.
pub fn cifar_files(dir: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("data_batch") && name.ends_with(".bin") {
            train.push(p);
        } else if name == "test_batch.bin" {
            test.push(p);
        }
    }
    train.sort();
    if train.is_empty() {
        return Err(ScenarioError::Nn(NnError::EmptyDataset));
    }
    Ok((train, test))
}

/// Pretrains the backbone. Cifar accuracy is measured on the test batch
/// (or every fifth training image without one); patch accuracy on every
/// fifth patch, held out from fitting.
pub fn pretrain(source: &PretrainSource, train: &[Sample], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    let (fit, held) = match source {
        PretrainSource::Cifar(dir) => {
            let (tr, te) = cifar_files(dir)?;
            let set = load_cifar10_grayscale(&tr)?;
            if te.is_empty() {
                set.split_every(5)
            } else {
                (set, load_cifar10_grayscale(&te)?)
            }
        }
        PretrainSource::Patches { per_class } => {
            patches_from_samples(train, *per_class, 32, derive_seed(seed, 0))?.split_every(5)
        }
    };
    let (model, _) = pretrain_backbone(&fit, cfg, derive_seed(seed, 1))?;
    Ok(PretrainOutcome {
        held_out_accuracy: accuracy(&model, &held)?,
        weights: model.to_weights(),
    })
}

/// Thresholds at which each method keeps detections for scoring. They sit
/// well below the reporting threshold so AP sees the whole ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct Floors {
    pub frcnn: f64,
    pub hog: f64,
    pub template: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Self {
            frcnn: 0.05,
            hog: 0.05,
            template: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOptions {
    pub seed: u64,
    pub pretrain_source: PretrainSource,
    pub pretrain: PretrainConfig,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    pub hog: HogConfig,
    pub methods: Vec<Method>,
    pub floors: Floors,
    pub nms_thresh: f64,
    pub iou_thresh: f64,
    pub score_thresh: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_source: PretrainSource::Patches { per_class: 400 },
            pretrain: PretrainConfig::default(),
            detector: DetectorConfig::default(),
            train: TrainConfig::default(),
            hog: HogConfig::default(),
            methods: Method::ALL.to_vec(),
            floors: Floors::default(),
            nms_thresh: 0.3,
            iou_thresh: 0.5,
            score_thresh: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub predictions: Vec<(usize, Vec<Detection>)>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub pretrain: PretrainOutcome,
    pub model: DetectorModel,
    pub train_log: Vec<TrainLog>,
    pub results: Vec<MethodResult>,
}

impl ScenarioOutcome {
    pub fn result(&self, m: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == m)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("scenario {}\n", self.scenario.number());
        let _ = writeln!(s, "pretrain_held_out_accuracy {:.6}", self.pretrain.held_out_accuracy);
        if let Some(l) = self.train_log.last() {
            let _ = writeln!(s, "final_train_loss {:.6}", l.loss());
        }
        for r in &self.results {
            let e = &r.report;
            let _ = writeln!(
                s,
                "{} ap {:.6} precision {:.6} recall {:.6} mean_tp_score {:.6}",
                r.method.name(),
                e.ap,
                e.precision,
                e.recall,
                e.mean_tp_score
            );
        }
        s
    }
}

/// Detections for every image, computed on the shared pool and returned in
/// input order.
pub fn detect_each<F>(images: &[Sample], f: F) -> Result<Vec<(usize, Vec<Detection>)>>
where
    F: Fn(&Sample) -> Result<Vec<Detection>> + Sync,
{
    let out: Vec<Result<Vec<Detection>>> = parallel::pool().install(|| images.par_iter().map(&f).collect());
    images.iter().zip(out).map(|(s, d)| Ok((s.index, d?))).collect()
}

/// Pretrains, trains the detector (and HOG when asked), runs every method
/// on the test images and scores it. With `out`, writes the models,
/// per-method prediction files and reports there.
pub fn run_scenario(s: Scenario, sp: &Split, opts: &ScenarioOptions, out: Option<&Path>) -> Result<ScenarioOutcome> {
    let mut train = Vec::new();
    for (dir, r) in &sp.train {
        train.extend(load_range(dir, r)?);
    }
    let test = load_range(&sp.test.0, &sp.test.1)?;
    let gen = read_dataset_config(&sp.test.0)?;
    let geometry = ImageGeometry::of_config(&gen);

    let pre = pretrain(&opts.pretrain_source, &train, &opts.pretrain, derive_seed(opts.seed, 0))?;
    let (model, train_log) = train_detector(&train, &pre.weights, &opts.detector, &opts.train, derive_seed(opts.seed, 1))?;

    let mut results = Vec::new();
    for &m in &opts.methods {
        let predictions = match m {
            Method::Frcnn => detect_each(&test, |t| Ok(detect(&model, &t.image, opts.floors.frcnn, opts.nms_thresh)?))?,
            Method::Hog => {
                let hog = train_hog_on_samples(&train, &opts.hog, derive_seed(opts.seed, 2))?;
                let c = &opts.hog;
                detect_each(&test, |t| Ok(hog_detect(&hog, &t.image, c.stride, &c.scales, opts.floors.hog, opts.nms_thresh)))?
            }
            Method::Template => {
                let bank = template_bank(&geometry, gen.tail_drop);
                detect_each(&test, |t| Ok(template_match(&t.image, &bank, opts.floors.template, opts.nms_thresh)))?
            }
            Method::Hough => {
                let p = HoughParams {
                    tail_drop: gen.tail_drop,
                    nms_thresh: opts.nms_thresh,
                    seed: derive_seed(opts.seed, 3),
                    ..HoughParams::new(geometry)
                };
                detect_each(&test, |t| Ok(hough_detect(&t.image, &p).into_iter().map(|(_, d)| d).collect()))?
            }
        };
        let pairs: Vec<(usize, Vec<Detection>, Vec<_>)> = predictions
            .iter()
            .zip(&test)
            .map(|((i, d), t)| (*i, d.clone(), t.boxes.clone()))
            .collect();
        let report = evaluate(&pairs, opts.iou_thresh, opts.score_thresh);
        results.push(MethodResult {
            method: m,
            predictions,
            report,
        });
    }
    let outcome = ScenarioOutcome {
        scenario: s,
        pretrain: pre,
        model,
        train_log,
        results,
    };
    if let Some(dir) = out {
        write_outcome(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_outcome(dir: &Path, o: &ScenarioOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    crate::nn::write_weights(dir.join("pretrained.gpnw"), &o.pretrain.weights)?;
    o.model.save(dir.join("model.gpnw"))?;
    let mut log = String::from("epoch,rpn_cls,rpn_reg,roi_cls,roi_reg,total\n");
    for l in &o.train_log {
        let p = &l.parts;
        let _ = writeln!(log, "{},{},{},{},{},{}", l.epoch, p.rpn_cls, p.rpn_reg, p.roi_cls, p.roi_reg, l.loss());
    }
    let p = dir.join("train_log.csv");
    fs::write(&p, log).map_err(io_err(&p))?;
    for r in &o.results {
        let pd = dir.join("predictions").join(r.method.name());
        fs::create_dir_all(&pd).map_err(io_err(&pd))?;
        for (i, d) in &r.predictions {
            write_predictions(pd.join(format!("{i}.txt")), d)?;
        }
        let p = dir.join(format!("report_{}.txt", r.method.name()));
        fs::write(&p, r.report.to_text()).map_err(io_err(&p))?;
        let p = dir.join(format!("pr_{}.csv", r.method.name()));
        fs::write(&p, r.report.pr_csv()).map_err(io_err(&p))?;
    }
    let p = dir.join("summary.txt");
    fs::write(&p, o.summary()).map_err(io_err(&p))
}
