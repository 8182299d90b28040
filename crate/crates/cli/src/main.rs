//! `gprforge`: simulation, dataset generation, training, detection and
//! scoring from the command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use gprforge::annotate::{
    generate_dataset, indices_with, load_samples, parse_gen_config, read_dataset_config, GenConfig, ImageGeometry,
    Preset, Sample,
};
use gprforge::detect::{
    detect, hog_detect, hough_detect, template_bank, template_match, train_detector, train_hog_on_samples,
    write_predictions, Detection, DetectorConfig, DetectorModel, HogConfig, HogModel, HoughParams, TrainConfig,
};
use gprforge::eval::{eval_report, write_report};
use gprforge::fdtd::{run_bscan, SolverConfig};
use gprforge::nn::{read_weights, write_weights, PretrainConfig};
use gprforge::radargram::{read_gprb, read_pgm, to_image, write_gprb, write_pgm, GainKind, Preprocess, RenderMode};
use gprforge::scenario::{ensure_dataset, pretrain, run_scenario, split, Method, PretrainSource, Scenario, ScenarioOptions};
use gprforge::scene::{parse_scene_bytes, validate_scene};
use gprforge::{derive_seed, parallel};

#[derive(Parser)]
#[command(name = "gprforge", version, about = "GPR radargram synthesis and hyperbola detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an FDTD B-scan of a scene file.
    Simulate(SimulateArgs),
    /// Condition a radargram and write it as a grayscale image.
    Render(RenderArgs),
    /// Generate an annotated dataset directory.
    Dataset(DatasetArgs),
    /// Pretrain the CNN backbone.
    Pretrain(PretrainArgs),
    /// Train the detector or the HOG baseline.
    Train(TrainArgs),
    /// Detect hyperbolas in one image or a directory of images.
    Detect(DetectArgs),
    /// Score predictions against labels.
    Eval(EvalArgs),
    /// Run one of the three train/test scenarios end to end.
    Scenario(ScenarioArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    courant: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GainArg {
    None,
    Linear,
    Exp,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "exp")]
    gain: GainArg,
    /// Gain coefficient, 1/s.
    #[arg(long, default_value_t = 1.5e7)]
    gain_k: f64,
    /// Dewow window in samples, 0 to skip.
    #[arg(long, default_value_t = 31)]
    dewow: usize,
    #[arg(long)]
    keep_background: bool,
    /// Display clip percentile, 0 for plain min/max scaling.
    #[arg(long, default_value_t = 2.0)]
    percentile: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Simulated,
    PseudoReal,
}

impl PresetArg {
    fn preset(self) -> Preset {
        match self {
            Self::Simulated => Preset::Simulated,
            Self::PseudoReal => Preset::PseudoReal,
        }
    }
}

#[derive(Args)]
struct DatasetArgs {
    /// Generator config file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0.95)]
    courant: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    /// Directory of Cifar-10 binary batches.
    #[arg(long, conflicts_with = "patches", required_unless_present = "patches")]
    cifar: Option<PathBuf>,
    /// Dataset directory to cut hyperbola/background patches from, as DIR or DIR@a..b.
    #[arg(long)]
    patches: Option<DataArg>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

/// `DIR` or `DIR@a..b`.
#[derive(Clone, Debug)]
struct DataArg {
    dir: PathBuf,
    range: Option<Range<usize>>,
}

impl std::str::FromStr for DataArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let Some((dir, r)) = s.rsplit_once('@') else {
            return Ok(Self {
                dir: s.into(),
                range: None,
            });
        };
        Ok(Self {
            dir: dir.into(),
            range: Some(parse_range(r)?),
        })
    }
}

fn parse_range(r: &str) -> std::result::Result<Range<usize>, String> {
    let bad = || format!("expected a range a..b, got {r:?}");
    let (a, b) = r.split_once("..").ok_or_else(bad)?;
    let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok(a..b)
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum TrainMethod {
    Frcnn,
    Hog,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory, as DIR or DIR@a..b; repeat to combine datasets.
    #[arg(long, required = true)]
    data: Vec<DataArg>,
    #[arg(long, value_enum, default_value = "frcnn")]
    method: TrainMethod,
    /// Pretrained backbone weights (frcnn only).
    #[arg(long, required_if_eq("method", "frcnn"))]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch loss log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum DetectMethod {
    Frcnn,
    Hog,
    Template,
    Hough,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long, value_enum, default_value = "frcnn")]
    method: DetectMethod,
    /// Trained model (frcnn and hog).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    image: Option<PathBuf>,
    /// Directory of `{i}.pgm` images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Prediction file, or a directory with `--images`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long, default_value_t = 0.3)]
    nms: f64,
    /// Generator config file or dataset directory giving the survey
    /// geometry (template and hough).
    #[arg(long, conflicts_with = "preset")]
    geometry: Option<PathBuf>,
    /// Preset giving the survey geometry when no config is given.
    #[arg(long, value_enum, default_value = "simulated")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Index range a..b; every labeled image inside must have predictions.
    #[arg(long, value_parser = parse_range)]
    range: Option<Range<usize>>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Precision/recall curve (CSV).
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScenarioArgs {
    /// 1, 2 or 3.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    id: u32,
    /// Holds `simulated/` and `pseudo-real/`, generated when missing.
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cifar: Option<PathBuf>,
    /// Comma-separated subset of frcnn,hog,template,hough.
    #[arg(long, value_delimiter = ',', value_parser = parse_method)]
    methods: Option<Vec<Method>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s:?}"))
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let bytes = fs::read(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let scene = parse_scene_bytes(&bytes).with_context(|| a.scene.display().to_string())?;
    let diags = validate_scene(&scene);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        bail!("{}: invalid scene\n  {}", a.scene.display(), lines.join("\n  "));
    }
    let r = run_bscan(&scene, &SolverConfig::with_courant(a.courant))?;
    write_gprb(&a.out, &r)?;
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let r = read_gprb(&a.input)?;
    let p = Preprocess {
        dewow_window: (a.dewow > 0).then_some(a.dewow),
        remove_background: !a.keep_background,
        gain: match a.gain {
            GainArg::None => None,
            GainArg::Linear => Some((GainKind::Linear, a.gain_k)),
            GainArg::Exp => Some((GainKind::Exponential, a.gain_k)),
        },
        render: if a.percentile > 0.0 {
            RenderMode::Percentile(a.percentile)
        } else {
            RenderMode::GlobalMinMax
        },
    };
    write_pgm(&a.out, &to_image(&p.condition(&r)?, p.render))?;
    Ok(())
}

fn dataset(a: DatasetArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!("{} is not empty; pass --force to write into it", a.out.display());
    }
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => parse_gen_config(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| p.display().to_string())?,
        (None, Some(p)) => GenConfig::preset(p.preset()),
        (None, None) => unreachable!("clap requires one of --config and --preset"),
    };
    if let Some(n) = a.count {
        cfg.count = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let m = generate_dataset(&cfg, &a.out, &SolverConfig::with_courant(a.courant))?;
    println!("wrote {} images to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn load_data(args: &[DataArg]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for d in args {
        let s = load_samples(&d.dir, d.range.clone())?;
        if s.is_empty() {
            bail!("{}: no labeled images", d.dir.display());
        }
        out.extend(s);
    }
    Ok(out)
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        ..PretrainConfig::default()
    };
    let (source, samples) = match (&a.cifar, &a.patches) {
        (Some(dir), _) => (PretrainSource::Cifar(dir.clone()), Vec::new()),
        (None, Some(d)) => (
            PretrainSource::Patches { per_class: a.per_class },
            load_data(std::slice::from_ref(d))?,
        ),
        (None, None) => unreachable!("clap requires one of --cifar and --patches"),
    };
    let o = pretrain(&source, &samples, &cfg, a.seed)?;
    write_weights(&a.out, &o.weights)?;
    println!("held-out accuracy {:.4}", o.held_out_accuracy);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    let samples = load_data(&a.data)?;
    match a.method {
        TrainMethod::Frcnn => {
            let pre = a.pretrained.as_ref().expect("clap requires --pretrained for frcnn");
            let mut tc = TrainConfig::default();
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(lr) = a.lr {
                tc.lr = lr;
            }
            let (model, log) = train_detector(&samples, &read_weights(pre)?, &DetectorConfig::default(), &tc, a.seed)?;
            model.save(&a.out)?;
            if let Some(p) = &a.log {
                let mut s = String::from("epoch,rpn_cls,rpn_reg,roi_cls,roi_reg,total\n");
                for l in &log {
                    let q = &l.parts;
                    s += &format!("{},{},{},{},{},{}\n", l.epoch, q.rpn_cls, q.rpn_reg, q.roi_cls, q.roi_reg, l.loss());
                }
                fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(l) = log.last() {
                println!("final loss {:.6}", l.loss());
            }
        }
        TrainMethod::Hog => {
            let mut hc = HogConfig::default();
            if let Some(e) = a.epochs {
                hc.epochs = e;
            }
            if let Some(lr) = a.lr {
                hc.lr = lr;
            }
            write_weights(&a.out, &train_hog_on_samples(&samples, &hc, a.seed)?.to_weights())?;
        }
    }
    Ok(())
}

enum Detector {
    Frcnn(Box<DetectorModel>),
    Hog(HogModel, HogConfig),
    Template(Vec<gprforge::detect::Template>),
    Hough(Box<HoughParams>),
}

impl Detector {
    fn run(&self, img: &gprforge::radargram::GrayImage, thresh: f64, nms: f64) -> Result<Vec<Detection>> {
        Ok(match self {
            Self::Frcnn(m) => detect(m, img, thresh, nms)?,
            Self::Hog(m, c) => hog_detect(m, img, c.stride, &c.scales, thresh, nms),
            Self::Template(bank) => template_match(img, bank, thresh, nms),
            Self::Hough(p) => hough_detect(img, p)
                .into_iter()
                .map(|(_, d)| d)
                .filter(|d| d.score >= thresh)
                .collect(),
        })
    }
}

fn detect_cmd(a: DetectArgs) -> Result<()> {
    let model_path = || a.model.as_ref().context("--model is required for this method");
    let gen = || -> Result<GenConfig> {
        match &a.geometry {
            Some(p) if p.is_dir() => Ok(read_dataset_config(p)?),
            Some(p) => Ok(parse_gen_config(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| p.display().to_string())?),
            None => Ok(GenConfig::preset(a.preset.preset())),
        }
    };
    let det = match a.method {
        DetectMethod::Frcnn => Detector::Frcnn(Box::new(DetectorModel::load(model_path()?)?)),
        DetectMethod::Hog => Detector::Hog(HogModel::from_weights(&read_weights(model_path()?)?)?, HogConfig::default()),
        DetectMethod::Template => {
            let g = gen()?;
            Detector::Template(template_bank(&ImageGeometry::of_config(&g), g.tail_drop))
        }
        DetectMethod::Hough => {
            let g = gen()?;
            Detector::Hough(Box::new(HoughParams {
                tail_drop: g.tail_drop,
                nms_thresh: a.nms,
                seed: derive_seed(a.seed, 3),
                ..HoughParams::new(ImageGeometry::of_config(&g))
            }))
        }
    };
    if let Some(img) = &a.image {
        guard(&a.out, a.force)?;
        let dets = det.run(&read_pgm(img)?, a.threshold, a.nms)?;
        write_predictions(&a.out, &dets)?;
        return Ok(());
    }
    let dir = a.images.as_ref().expect("clap requires --image or --images");
    let idx = indices_with(dir, "pgm")?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for i in &idx {
        guard(&a.out.join(format!("{i}.txt")), a.force)?;
    }
    let results: Vec<Result<()>> = parallel::pool().install(|| {
        idx.par_iter()
            .map(|i| {
                let dets = det.run(&read_pgm(dir.join(format!("{i}.pgm")))?, a.threshold, a.nms)?;
                write_predictions(a.out.join(format!("{i}.txt")), &dets)?;
                Ok(())
            })
            .collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    println!("wrote predictions for {} images to {}", idx.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    guard(&a.out, a.force)?;
    if let Some(c) = &a.csv {
        guard(c, a.force)?;
    }
    let r = eval_report(&a.pred, &a.gt, a.iou, a.threshold, a.range.clone())?;
    write_report(&a.out, &r, a.csv.as_deref())?;
    println!(
        "ap {:.4} precision {:.4} recall {:.4} mean_tp_score {:.4}",
        r.ap, r.precision, r.recall, r.mean_tp_score
    );
    Ok(())
}

fn scenario_cmd(a: ScenarioArgs) -> Result<()> {
    if a.out.join("summary.txt").exists() && !a.force {
        bail!("{} already holds a scenario run; pass --force to overwrite", a.out.display());
    }
    let s = Scenario::from_number(a.id).expect("clap restricts --id to 1..=3");
    let sim = a.data_root.join("simulated");
    let real = a.data_root.join("pseudo-real");
    let solver = SolverConfig::default();
    if s == Scenario::One || s == Scenario::Three {
        ensure_dataset(&sim, Preset::Simulated, &solver)?;
    }
    if s != Scenario::One {
        ensure_dataset(&real, Preset::PseudoReal, &solver)?;
    }
    let mut opts = ScenarioOptions {
        seed: a.seed,
        ..ScenarioOptions::default()
    };
    if let Some(dir) = a.cifar {
        opts.pretrain_source = PretrainSource::Cifar(dir);
    }
    if let Some(m) = a.methods {
        opts.methods = m;
    }
    if let Some(e) = a.epochs {
        opts.train.epochs = e;
    }
    if let Some(e) = a.pretrain_epochs {
        opts.pretrain.epochs = e;
    }
    let o = run_scenario(s, &split(s, &sim, &real), &opts, Some(&a.out))?;
    print!("{}", o.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Render(a) => render(a),
        Cmd::Dataset(a) => dataset(a),
        Cmd::Pretrain(a) => pretrain_cmd(a),
        Cmd::Train(a) => train(a),
        Cmd::Detect(a) => detect_cmd(a),
        Cmd::Eval(a) => eval_cmd(a),
        Cmd::Scenario(a) => scenario_cmd(a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors after printing the synopsis
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
