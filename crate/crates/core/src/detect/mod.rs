//! Two-stage hyperbola detector and classical baselines.
//!
//! The detector reuses the pretrained backbone's conv blocks as a shared
//! stride-8 feature map. A 1×1 conv over that map scores and refines six
//! anchors per cell; the best refined anchors are max-pooled to 4×4 and
//! pushed through the backbone's FC-64 layer into a two-class head and a
//! box-refinement head. Everything trains jointly under one summed loss.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotate::{iou, load_samples, AnnotateError, BBox, Sample, HYPERBOLA_CLASS};
use crate::derive_seed;
use crate::nn::{
    features, features_backward, fc, fc_backward, gemm, hidden, hidden_backward, normal_tensor, normalize_pixel,
    smooth_l1, softmax, softmax_cross_entropy, Backbone, NnError, Real, Sgd, Tensor, Weights, CONV_FILTERS, HIDDEN, KERNEL,
    PARAM_NAMES, STRIDE,
};
use crate::radargram::GrayImage;

mod hog;
mod hough;
mod template;

pub use hog::{hog_detect, hog_features, train_hog, train_hog_on_samples, HogConfig, HogModel, HOG_LEN, HOG_WINDOW};
pub use hough::{edge_points, hough_detect, solve_triple, HoughParams, HyperbolaFit, TripleError};
pub use template::{ncc_map, render_template, template_bank, template_match, Template, TemplateParams};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("no training images")]
    EmptyDataset,
    #[error("training diverged in epoch {epoch}")]
    DivergedTraining { epoch: usize },
    #[error("detector file: {0}")]
    BadModel(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DetectError>;

pub const SCALES: [f64; 3] = [16.0, 32.0, 64.0];
/// Width:height.
pub const RATIOS: [f64; 2] = [1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = 6;
pub const ROI_SIZE: usize = 4;
pub const RPN_CHANNELS: usize = 6 * ANCHORS_PER_CELL;
pub const MODEL_VERSION: f32 = 1.0;

pub const RPN_W: usize = 8;
pub const RPN_B: usize = 9;
pub const CLS_W: usize = 10;
pub const CLS_B: usize = 11;
pub const REG_W: usize = 12;
pub const REG_B: usize = 13;
pub const HEAD_NAMES: [&str; 6] = ["rpn.w", "rpn.b", "cls.w", "cls.b", "reg.w", "reg.b"];

// --- anchors and box coding -------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub feat_w: usize,
    pub feat_h: usize,
    pub stride: usize,
    /// Index `(i·feat_w + j)·6 + a` for cell row `i`, column `j`, shape `a`.
    pub anchors: Vec<BBox>,
}

impl AnchorSet {
    /// Anchors reaching outside a `width×height` image.
    pub fn crossing(&self, width: f64, height: f64) -> Vec<bool> {
        self.anchors
            .iter()
            .map(|a| a.xmin < 0.0 || a.ymin < 0.0 || a.xmax > width || a.ymax > height)
            .collect()
    }
}

/// Width and height of anchor shape `a`: area-preserving `s√r × s/√r`,
/// rounded to whole pixels.
pub fn anchor_shape(a: usize) -> (f64, f64) {
    let s = SCALES[a / RATIOS.len()];
    let r = RATIOS[a % RATIOS.len()];
    ((s * r.sqrt()).round(), (s / r.sqrt()).round())
}

pub fn gen_anchors(feat_w: usize, feat_h: usize, stride: usize) -> AnchorSet {
    let st = stride as f64;
    let mut anchors = Vec::with_capacity(feat_w * feat_h * ANCHORS_PER_CELL);
    for i in 0..feat_h {
        for j in 0..feat_w {
            let (cx, cy) = ((j as f64 + 0.5) * st, (i as f64 + 0.5) * st);
            for a in 0..ANCHORS_PER_CELL {
                let (w, h) = anchor_shape(a);
                anchors.push(BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
            }
        }
    }
    AnchorSet {
        feat_w,
        feat_h,
        stride,
        anchors,
    }
}

/// `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Largest log-scale step accepted when decoding, so a wild regression
/// cannot overflow `exp`.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

pub fn decode_box(anchor: &BBox, t: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t[0] * aw;
    let cy = ay + t[1] * ah;
    let w = aw * t[2].min(MAX_LOG_SCALE).exp();
    let h = ah * t[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the gt box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive at IoU ≥ `pos_iou` with some gt, negative below `neg_iou`
/// everywhere, ignored in between. Then, gt by gt, the highest-IoU anchors
/// not already forced by an earlier gt (all ties) become positive for it
/// regardless of the thresholds, so every gt keeps at least one positive.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|b| iou(a, b)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|row| {
            let mut best: Option<(f64, usize)> = None;
            for (g, &v) in row.iter().enumerate() {
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, g));
                }
            }
            match best {
                Some((v, g)) if v >= pos_iou => AnchorLabel::Positive(g),
                Some((v, _)) if v >= neg_iou => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect();
    let mut forced = vec![false; anchors.len()];
    for g in 0..gts.len() {
        let best = (0..anchors.len())
            .filter(|&k| !forced[k])
            .map(|k| ious[k][g])
            .fold(f64::NEG_INFINITY, f64::max);
        for k in 0..anchors.len() {
            if !forced[k] && ious[k][g] == best {
                labels[k] = AnchorLabel::Positive(g);
                forced[k] = true;
            }
        }
    }
    labels
}

// --- detections and NMS -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self {
            bbox: BBox { score: None, ..bbox },
            score,
        }
    }

    /// Label-file form, score attached.
    pub fn to_label(&self) -> BBox {
        self.bbox.with_score(self.score)
    }

    pub fn from_label(b: &BBox) -> Self {
        Self::new(*b, b.score.unwrap_or(1.0))
    }
}

/// Greedy suppression: indices into `boxes` kept, highest score first,
/// ties by lower index. A box is dropped when its IoU with any kept box
/// exceeds `thresh`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, thresh).into_iter().map(|i| dets[i]).collect()
}

pub fn write_predictions(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let labels: Vec<BBox> = dets.iter().map(Detection::to_label).collect();
    Ok(crate::annotate::write_labels(path, &labels)?)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    Ok(crate::annotate::read_labels(path)?.iter().map(Detection::from_label).collect())
}

// --- ROI pooling ------------------------------------------------------------

/// Marks an output bin that covered no feature cells.
pub const EMPTY_BIN: u32 = u32::MAX;

/// Half-open feature-cell range `[lo, hi)` covered by `[a, b]` image pixels.
fn feature_span(a: f64, b: f64, stride: usize, len: usize) -> (usize, usize) {
    let s = stride as f64;
    let lo = (a / s).floor().clamp(0.0, len as f64) as usize;
    let mut hi = (b / s).ceil().clamp(0.0, len as f64) as usize;
    if hi <= lo && lo < len {
        hi = lo + 1;
    }
    (lo, hi)
}

/// Max-pools the part of `feat` (`C×H×W`) under image box `b` onto an
/// `out×out` grid. Bin `k` of a span `[lo, lo+n)` covers
/// `[lo + ⌊k·n/out⌋, lo + ⌈(k+1)·n/out⌉)`. Returns the pooled `C×out×out`
/// tensor and, per output value, the flat `y·W + x` index it came from.
pub fn roi_pool<T: Real>(feat: &Tensor<T>, b: &BBox, out: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = feat.chw();
    let (x0, x1) = feature_span(b.xmin, b.xmax, stride, w);
    let (y0, y1) = feature_span(b.ymin, b.ymax, stride, h);
    let bins = |lo: usize, hi: usize| -> Vec<(usize, usize)> {
        let n = hi.saturating_sub(lo);
        (0..out)
            .map(|k| (lo + k * n / out, lo + ((k + 1) * n).div_ceil(out)))
            .collect()
    };
    let (bx, by) = (bins(x0, x1), bins(y0, y1));
    let mut y = Tensor::zeros(&[c, out, out]);
    let mut arg = vec![EMPTY_BIN; c * out * out];
    for ch in 0..c {
        let plane = &feat.data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(ya, yb)) in by.iter().enumerate() {
            for (ox, &(xa, xb)) in bx.iter().enumerate() {
                let mut best: Option<(T, usize)> = None;
                for yy in ya..yb {
                    for xx in xa..xb {
                        let k = yy * w + xx;
                        if best.is_none_or(|(v, _)| plane[k] > v) {
                            best = Some((plane[k], k));
                        }
                    }
                }
                let o = (ch * out + oy) * out + ox;
                if let Some((v, k)) = best {
                    y.data[o] = v;
                    arg[o] = k as u32;
                }
            }
        }
    }
    (y, arg)
}

/// Routes pooled gradients `dy` back to their argmax cells in `dfeat`.
pub fn roi_pool_backward<T: Real>(dy: &[T], arg: &[u32], dfeat: &mut Tensor<T>) {
    let (c, h, w) = dfeat.chw();
    let per = arg.len() / c.max(1);
    for (o, (&g, &k)) in dy.iter().zip(arg).enumerate() {
        if k != EMPTY_BIN {
            let ch = o / per;
            dfeat.data[ch * h * w + k as usize] = dfeat.data[ch * h * w + k as usize] + g;
        }
    }
}

// --- model ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Anchors sampled per class for the objectness loss.
    pub rpn_samples: usize,
    pub pre_nms: usize,
    pub post_nms_train: usize,
    pub post_nms_test: usize,
    pub proposal_nms: f64,
    /// Proposals narrower or shorter than this many pixels are dropped.
    pub min_size: f64,
    /// Scale of the ROI regression targets.
    pub reg_std: [f64; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pos_iou: 0.7,
            neg_iou: 0.3,
            rpn_samples: 128,
            pre_nms: 300,
            post_nms_train: 64,
            post_nms_test: 50,
            proposal_nms: 0.7,
            min_size: 4.0,
            reg_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradients with a larger global L2 norm are rescaled to it.
    pub clip_norm: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Training crop side for larger images.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.002,
            milestones: vec![20],
            decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            flip: true,
            crop: 256,
        }
    }
}

/// Backbone conv + FC-64 parameters followed by the RPN, class and box
/// heads, in the order of [`PARAM_NAMES`]`[..8]` then [`HEAD_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub params: Vec<Tensor<f32>>,
    pub config: DetectorConfig,
    pub train: TrainConfig,
}

fn check_backbone<T>(params: &[Tensor<T>]) -> Result<()> {
    let flat = CONV_FILTERS[2] * ROI_SIZE * ROI_SIZE;
    if params[6].shape != [HIDDEN, flat] {
        return Err(shape_error(format!(
            "fc1 is {:?}, the ROI head needs [{HIDDEN}, {flat}] (a 32×32 pretraining input)",
            params[6].shape
        )));
    }
    Ok(())
}

fn shape_error(msg: String) -> DetectError {
    DetectError::Nn(NnError::ShapeMismatch(msg))
}

impl DetectorModel {
    /// Pretrained backbone plus heads drawn from N(0, 0.01²) with zero biases.
    pub fn init(pretrained: &Weights, config: DetectorConfig, train: TrainConfig, seed: u64) -> Result<Self> {
        let bb = Backbone::<f32>::from_weights(pretrained, "")?;
        let mut params: Vec<Tensor<f32>> = bb.params[..8].to_vec();
        check_backbone(&params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = CONV_FILTERS[2];
        for (o, d) in [(RPN_CHANNELS, c), (2, HIDDEN), (4, HIDDEN)] {
            params.push(normal_tensor(&[o, d], 0.01, &mut rng));
            params.push(Tensor::zeros(&[o]));
        }
        Ok(Self { params, config, train })
    }

    /// Model with every head weight zero: all proposals and scores tie.
    pub fn with_zero_heads(pretrained: &Weights) -> Result<Self> {
        let mut m = Self::init(pretrained, DetectorConfig::default(), TrainConfig::default(), 0)?;
        for p in &mut m.params[RPN_W..] {
            p.fill_zero();
        }
        Ok(m)
    }

    pub fn to_weights(&self) -> Weights {
        let mut w = Weights::default();
        let c = &self.config;
        let t = &self.train;
        w.push(
            "detector.header",
            Tensor {
                shape: vec![4],
                data: vec![MODEL_VERSION, STRIDE as f32, ANCHORS_PER_CELL as f32, ROI_SIZE as f32],
            },
        );
        let cfg = vec![
            c.pos_iou,
            c.neg_iou,
            c.rpn_samples as f64,
            c.pre_nms as f64,
            c.post_nms_train as f64,
            c.post_nms_test as f64,
            c.proposal_nms,
            c.min_size,
            c.reg_std[0],
            c.reg_std[1],
            c.reg_std[2],
            c.reg_std[3],
        ];
        w.push("detector.config", f32_tensor(&cfg));
        let mut tr = vec![
            t.epochs as f64,
            t.lr,
            t.decay,
            t.momentum,
            t.weight_decay,
            t.clip_norm,
            t.flip as u8 as f64,
            t.crop as f64,
        ];
        tr.extend(t.milestones.iter().map(|&m| m as f64));
        w.push("detector.train", f32_tensor(&tr));
        let names = PARAM_NAMES[..8].iter().chain(HEAD_NAMES.iter());
        for (n, p) in names.zip(&self.params) {
            w.push(*n, p.clone());
        }
        w
    }

    pub fn from_weights(w: &Weights) -> Result<Self> {
        let header = &w.get("detector.header")?.data;
        if header.len() != 4 {
            return Err(DetectError::BadModel("header must hold 4 values".into()));
        }
        if header[0] != MODEL_VERSION {
            return Err(DetectError::BadModel(format!("unsupported detector version {}", header[0])));
        }
        if header[1..] != [STRIDE as f32, ANCHORS_PER_CELL as f32, ROI_SIZE as f32] {
            return Err(DetectError::BadModel(format!("unsupported layout {:?}", &header[1..])));
        }
        let c: Vec<f64> = w.get("detector.config")?.data.iter().map(|&v| decimal(v)).collect();
        let t: Vec<f64> = w.get("detector.train")?.data.iter().map(|&v| decimal(v)).collect();
        if c.len() != 12 || t.len() < 8 {
            return Err(DetectError::BadModel("truncated configuration".into()));
        }
        let config = DetectorConfig {
            pos_iou: c[0],
            neg_iou: c[1],
            rpn_samples: c[2] as usize,
            pre_nms: c[3] as usize,
            post_nms_train: c[4] as usize,
            post_nms_test: c[5] as usize,
            proposal_nms: c[6],
            min_size: c[7],
            reg_std: [c[8], c[9], c[10], c[11]],
        };
        let train = TrainConfig {
            epochs: t[0] as usize,
            lr: t[1],
            decay: t[2],
            momentum: t[3],
            weight_decay: t[4],
            clip_norm: t[5],
            flip: t[6] != 0.0,
            crop: t[7] as usize,
            milestones: t[8..].iter().map(|&m| m as usize).collect(),
        };
        let mut params = Vec::with_capacity(14);
        for n in &PARAM_NAMES[..8] {
            params.push(w.get(n)?.clone());
        }
        let conv_ok = params[0].shape == [CONV_FILTERS[0], 1, KERNEL, KERNEL]
            && params[1].shape == [CONV_FILTERS[0]]
            && params[2].shape == [CONV_FILTERS[1], CONV_FILTERS[0], KERNEL, KERNEL]
            && params[3].shape == [CONV_FILTERS[1]]
            && params[4].shape == [CONV_FILTERS[2], CONV_FILTERS[1], KERNEL, KERNEL]
            && params[5].shape == [CONV_FILTERS[2]]
            && params[7].shape == [HIDDEN];
        if !conv_ok {
            return Err(shape_error("backbone tensors do not match the conv layout".into()));
        }
        check_backbone(&params)?;
        for n in HEAD_NAMES {
            params.push(w.get(n)?.clone());
        }
        let c = CONV_FILTERS[2];
        let expect: [&[usize]; 6] = [&[RPN_CHANNELS, c], &[RPN_CHANNELS], &[2, HIDDEN], &[2], &[4, HIDDEN], &[4]];
        for (k, e) in expect.iter().enumerate() {
            if params[RPN_W + k].shape != *e {
                return Err(shape_error(format!(
                    "{} is {:?}, expected {e:?}",
                    HEAD_NAMES[k],
                    params[RPN_W + k].shape
                )));
            }
        }
        Ok(Self { params, config, train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(crate::nn::write_weights(path, &self.to_weights())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&crate::nn::read_weights(path)?)
    }
}

/// The `f64` with the shortest decimal form of `v`, so settings like 0.7
/// survive the `f32` snapshot unchanged.
fn decimal(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn f32_tensor(v: &[f64]) -> Tensor<f32> {
    Tensor {
        shape: vec![v.len()],
        data: v.iter().map(|&x| x as f32).collect(),
    }
}

pub fn image_tensor<T: Real>(img: &GrayImage) -> Tensor<T> {
    Tensor {
        shape: vec![1, img.height, img.width],
        data: img
            .pixels
            .iter()
            .map(|&p| T::of(normalize_pixel(p as f32 / 255.0) as f64))
            .collect(),
    }
}

/// 1×1 conv over the feature map: `36 × (H'·W')`, channel-major.
fn rpn_forward<T: Real>(params: &[Tensor<T>], feat: &Tensor<T>) -> Vec<T> {
    let (c, h, w) = feat.chw();
    let p = h * w;
    let mut out: Vec<T> = params[RPN_B]
        .data
        .iter()
        .flat_map(|&b| std::iter::repeat_n(b, p))
        .collect();
    gemm(false, false, RPN_CHANNELS, p, c, &params[RPN_W].data, &feat.data, T::one(), &mut out);
    out
}

/// Background and foreground logit positions of anchor `k`.
fn objectness_at(p: usize, k: usize) -> (usize, usize) {
    let (cell, a) = (k / ANCHORS_PER_CELL, k % ANCHORS_PER_CELL);
    ((2 * a) * p + cell, (2 * a + 1) * p + cell)
}

fn regression_at(p: usize, k: usize, c: usize) -> usize {
    let (cell, a) = (k / ANCHORS_PER_CELL, k % ANCHORS_PER_CELL);
    (2 * ANCHORS_PER_CELL + 4 * a + c) * p + cell
}

/// Decoded, clipped anchors ranked by foreground probability: the top
/// `pre_nms` survive size filtering into NMS, then the first `keep`.
pub fn proposals<T: Real>(
    anchors: &AnchorSet,
    rpn: &[T],
    width: usize,
    height: usize,
    cfg: &DetectorConfig,
    keep: usize,
) -> Vec<(BBox, f64)> {
    let p = anchors.feat_w * anchors.feat_h;
    let mut cands: Vec<(BBox, f64)> = Vec::with_capacity(anchors.anchors.len());
    for (k, a) in anchors.anchors.iter().enumerate() {
        let (ib, ifg) = objectness_at(p, k);
        let (bg, fg) = (rpn[ib].f64(), rpn[ifg].f64());
        let score = 1.0 / (1.0 + (bg - fg).exp());
        let t = [0, 1, 2, 3].map(|c| rpn[regression_at(p, k, c)].f64());
        let b = decode_box(a, t).clipped(width as f64, height as f64);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size {
            cands.push((b, score));
        }
    }
    // stable: equal scores keep anchor order
    cands.sort_by(|a, b| b.1.total_cmp(&a.1));
    cands.truncate(cfg.pre_nms);
    let boxes: Vec<BBox> = cands.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.1).collect();
    nms_indices(&boxes, &scores, cfg.proposal_nms)
        .into_iter()
        .take(keep)
        .map(|i| cands[i])
        .collect()
}

// --- loss -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub roi_cls: f64,
    pub roi_reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.rpn_cls + self.rpn_reg + self.roi_cls + self.roi_reg
    }

    fn add(&mut self, o: &LossParts) {
        self.rpn_cls += o.rpn_cls;
        self.rpn_reg += o.rpn_reg;
        self.roi_cls += o.roi_cls;
        self.roi_reg += o.roi_reg;
    }

    fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            rpn_cls: self.rpn_cls * s,
            rpn_reg: self.rpn_reg * s,
            roi_cls: self.roi_cls * s,
            roi_reg: self.roi_reg * s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub parts: LossParts,
    /// Hash of every ReLU mask, pooling choice and smooth-L1 branch.
    pub signature: u64,
    /// ROI-head inputs used, so a gradient check can hold them fixed.
    pub proposals: Vec<BBox>,
}

/// Up to `n` positive and `n` negative anchor indices, each drawn without
/// replacement by a seeded shuffle.
fn sample_anchors(labels: &[AnchorLabel], n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (k, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => pos.push(k),
            AnchorLabel::Negative => neg.push(k),
            AnchorLabel::Ignore => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    pos.truncate(n);
    neg.truncate(n);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

fn hash_smooth_l1<T: Real>(pred: &[T], target: &[T], h: &mut impl Hasher) {
    for (p, t) in pred.iter().zip(target) {
        ((*p - *t).abs() < T::one()).hash(h);
    }
}

/// Joint two-stage loss of one image, accumulating gradients into `grads`
/// (same layout as the model parameters). Without fixed `proposals` the ROI
/// head trains on the RPN's top post-NMS proposals plus the gt boxes.
/// `sample_seed` drives the anchor sampling.
pub fn detector_loss<T: Real>(
    params: &[Tensor<T>],
    cfg: &DetectorConfig,
    x: &Tensor<T>,
    gts: &[BBox],
    proposals_in: Option<&[BBox]>,
    sample_seed: u64,
    grads: &mut [Tensor<T>],
) -> Result<LossOutput> {
    let (_, img_h, img_w) = x.chw();
    let (feat, fcache) = features(params, x)?;
    let (c, fh, fw) = feat.chw();
    let p = fh * fw;
    let rpn = rpn_forward(params, &feat);
    let anchors = gen_anchors(fw, fh, STRIDE);
    let labels = assign_anchors(&anchors.anchors, gts, cfg.pos_iou, cfg.neg_iou);
    let (pos, neg) = sample_anchors(&labels, cfg.rpn_samples, sample_seed);
    let mut sig = DefaultHasher::new();
    fcache.signature(&mut sig);
    let mut parts = LossParts::default();
    let mut drpn = vec![T::zero(); rpn.len()];

    // objectness
    let sampled: Vec<(usize, usize)> = pos.iter().map(|&k| (k, 1)).chain(neg.iter().map(|&k| (k, 0))).collect();
    let mut logits = Vec::with_capacity(2 * sampled.len());
    for &(k, _) in &sampled {
        let (ib, ifg) = objectness_at(p, k);
        logits.push(rpn[ib]);
        logits.push(rpn[ifg]);
    }
    let targets: Vec<Option<usize>> = sampled.iter().map(|&(_, y)| Some(y)).collect();
    let (l, dl) = softmax_cross_entropy(&logits, 2, &targets);
    parts.rpn_cls = l.f64();
    for (r, &(k, _)) in sampled.iter().enumerate() {
        let (ib, ifg) = objectness_at(p, k);
        drpn[ib] = drpn[ib] + dl[2 * r];
        drpn[ifg] = drpn[ifg] + dl[2 * r + 1];
    }

    // anchor regression
    if !pos.is_empty() {
        let mut pred = Vec::with_capacity(4 * pos.len());
        let mut target = Vec::with_capacity(4 * pos.len());
        for &k in &pos {
            let AnchorLabel::Positive(g) = labels[k] else { unreachable!() };
            let t = encode_box(&anchors.anchors[k], &gts[g]);
            for (ci, tv) in t.iter().enumerate() {
                pred.push(rpn[regression_at(p, k, ci)]);
                target.push(T::of(*tv));
            }
        }
        hash_smooth_l1(&pred, &target, &mut sig);
        let (l, d) = smooth_l1(&pred, &target);
        let inv = T::one() / T::of(pos.len() as f64);
        parts.rpn_reg = (l * inv).f64();
        for (r, &k) in pos.iter().enumerate() {
            for ci in 0..4 {
                let i = regression_at(p, k, ci);
                drpn[i] = drpn[i] + d[4 * r + ci] * inv;
            }
        }
    }

    // ROI head
    let props: Vec<BBox> = match proposals_in {
        Some(ps) => ps.to_vec(),
        None => {
            let mut v: Vec<BBox> = proposals(&anchors, &rpn, img_w, img_h, cfg, cfg.post_nms_train)
                .into_iter()
                .map(|(b, _)| b)
                .collect();
            v.extend(gts.iter().map(|g| BBox::new(g.xmin, g.ymin, g.xmax, g.ymax)));
            v
        }
    };
    let roi_labels = assign_anchors(&props, gts, cfg.pos_iou, cfg.neg_iou);
    let rois: Vec<(usize, AnchorLabel)> = roi_labels
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, l)| *l != AnchorLabel::Ignore)
        .collect();
    let mut dfeat = Tensor::zeros(&feat.shape);
    if !rois.is_empty() {
        let n = rois.len();
        let d = c * ROI_SIZE * ROI_SIZE;
        let mut xs = Vec::with_capacity(n * d);
        let mut args = Vec::with_capacity(n);
        for &(i, _) in &rois {
            let (pooled, arg) = roi_pool(&feat, &props[i], ROI_SIZE, STRIDE);
            xs.extend_from_slice(&pooled.data);
            arg.hash(&mut sig);
            args.push(arg);
        }
        let hid = hidden(params, &xs, n)?;
        for v in &hid {
            (*v > T::zero()).hash(&mut sig);
        }
        let cls = fc(&hid, n, &params[CLS_W], &params[CLS_B])?;
        let reg = fc(&hid, n, &params[REG_W], &params[REG_B])?;
        let targets: Vec<Option<usize>> = rois
            .iter()
            .map(|(_, l)| Some(matches!(l, AnchorLabel::Positive(_)) as usize))
            .collect();
        let (l, dcls) = softmax_cross_entropy(&cls, 2, &targets);
        parts.roi_cls = l.f64();
        let mut dreg = vec![T::zero(); n * 4];
        let mut pred = Vec::new();
        let mut target = Vec::new();
        let mut pos_rows = Vec::new();
        for (r, (i, l)) in rois.iter().enumerate() {
            if let AnchorLabel::Positive(g) = l {
                let t = encode_box(&props[*i], &gts[*g]);
                for ci in 0..4 {
                    pred.push(reg[4 * r + ci]);
                    target.push(T::of(t[ci] / cfg.reg_std[ci]));
                }
                pos_rows.push(r);
            }
        }
        if !pos_rows.is_empty() {
            hash_smooth_l1(&pred, &target, &mut sig);
            let (l, dr) = smooth_l1(&pred, &target);
            let inv = T::one() / T::of(pos_rows.len() as f64);
            parts.roi_reg = (l * inv).f64();
            for (q, &r) in pos_rows.iter().enumerate() {
                for ci in 0..4 {
                    dreg[4 * r + ci] = dr[4 * q + ci] * inv;
                }
            }
        }
        let mut dh = {
            let (gw, rest) = grads[CLS_W..].split_at_mut(1);
            fc_backward(&hid, n, &params[CLS_W], &dcls, &mut gw[0], &mut rest[0])
        };
        let dh2 = {
            let (gw, rest) = grads[REG_W..].split_at_mut(1);
            fc_backward(&hid, n, &params[REG_W], &dreg, &mut gw[0], &mut rest[0])
        };
        for (a, b) in dh.iter_mut().zip(&dh2) {
            *a = *a + *b;
        }
        let dx = hidden_backward(params, &xs, n, &hid, &dh, grads);
        for (r, arg) in args.iter().enumerate() {
            roi_pool_backward(&dx[r * d..(r + 1) * d], arg, &mut dfeat);
        }
    }

    // RPN conv: out = W·F + b
    gemm(false, true, RPN_CHANNELS, c, p, &drpn, &feat.data, T::one(), &mut grads[RPN_W].data);
    for (ch, row) in drpn.chunks_exact(p).enumerate() {
        grads[RPN_B].data[ch] = grads[RPN_B].data[ch] + row.iter().copied().sum::<T>();
    }
    gemm(true, false, c, p, RPN_CHANNELS, &params[RPN_W].data, &drpn, T::one(), &mut dfeat.data);
    features_backward(params, &fcache, dfeat, grads);

    Ok(LossOutput {
        parts,
        signature: sig.finish(),
        proposals: props,
    })
}

// --- training ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLog {
    pub epoch: usize,
    /// Mean per-image losses over the epoch.
    pub parts: LossParts,
}

impl TrainLog {
    pub fn loss(&self) -> f64 {
        self.parts.total()
    }
}

fn flip_sample(img: &GrayImage, boxes: &[BBox]) -> (GrayImage, Vec<BBox>) {
    let (w, h) = (img.width, img.height);
    let mut pixels = Vec::with_capacity(w * h);
    for row in img.pixels.chunks_exact(w) {
        pixels.extend(row.iter().rev());
    }
    let wf = w as f64;
    let boxes = boxes
        .iter()
        .map(|b| BBox {
            xmin: wf - b.xmax,
            xmax: wf - b.xmin,
            ..*b
        })
        .collect();
    (GrayImage { width: w, height: h, pixels }, boxes)
}

/// A `side×side` (or smaller, if the image is) window containing at least
/// one gt when there is one; boxes are shifted and clipped, and dropped when
/// less than half of them remains.
fn crop_sample(img: &GrayImage, boxes: &[BBox], side: usize, rng: &mut impl Rng) -> (GrayImage, Vec<BBox>) {
    let (cw, ch) = (img.width.min(side), img.height.min(side));
    if cw == img.width && ch == img.height {
        return (img.clone(), boxes.to_vec());
    }
    let pick = |lo: f64, hi: f64, len: usize, win: usize, rng: &mut dyn rand::RngCore| -> usize {
        let max = len - win;
        // window start range that keeps [lo, hi) inside when possible
        let a = (hi - win as f64).ceil().max(0.0) as usize;
        let b = (lo.floor().max(0.0) as usize).min(max);
        if a <= b {
            rng.random_range(a.min(max)..=b)
        } else {
            rng.random_range(0..=max)
        }
    };
    let (x0, y0) = match boxes.first() {
        Some(_) => {
            let g = boxes[rng.random_range(0..boxes.len())];
            (pick(g.xmin, g.xmax, img.width, cw, rng), pick(g.ymin, g.ymax, img.height, ch, rng))
        }
        None => (
            rng.random_range(0..=img.width - cw),
            rng.random_range(0..=img.height - ch),
        ),
    };
    let mut pixels = Vec::with_capacity(cw * ch);
    for y in y0..y0 + ch {
        pixels.extend_from_slice(&img.pixels[y * img.width + x0..y * img.width + x0 + cw]);
    }
    let kept = boxes
        .iter()
        .filter_map(|b| {
            let s = BBox {
                xmin: b.xmin - x0 as f64,
                xmax: b.xmax - x0 as f64,
                ymin: b.ymin - y0 as f64,
                ymax: b.ymax - y0 as f64,
                ..*b
            };
            let c = s.clipped(cw as f64, ch as f64);
            (c.is_valid() && c.area() >= 0.5 * s.area()).then_some(c)
        })
        .collect();
    (
        GrayImage {
            width: cw,
            height: ch,
            pixels,
        },
        kept,
    )
}

fn grad_norm(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Joint end-to-end training, one SGD step per image. The image order of
/// each epoch, flips, crops and anchor sampling all derive from `seed`.
pub fn train_detector(
    samples: &[Sample],
    pretrained: &Weights,
    config: &DetectorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(DetectorModel, Vec<TrainLog>)> {
    let mut model = DetectorModel::init(pretrained, config.clone(), train.clone(), derive_seed(seed, 0))?;
    if samples.is_empty() {
        return Err(DetectError::EmptyDataset);
    }
    let mut grads: Vec<Tensor<f32>> = model.params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
    let mut opt = Sgd::new(train.lr, train.momentum, train.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let drops = train.milestones.iter().filter(|&&m| epoch >= m).count();
        opt.lr = train.lr * train.decay.powi(drops as i32);
        let epoch_seed = derive_seed(seed, 1 + epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut sum = LossParts::default();
        for (step, &i) in order.iter().enumerate() {
            let step_seed = derive_seed(epoch_seed, step as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            let s = &samples[i];
            let (mut img, mut boxes) = crop_sample(&s.image, &s.boxes, train.crop, &mut rng);
            if train.flip && rng.random_bool(0.5) {
                (img, boxes) = flip_sample(&img, &boxes);
            }
            let x = image_tensor::<f32>(&img);
            grads.iter_mut().for_each(Tensor::fill_zero);
            let out = detector_loss(&model.params, config, &x, &boxes, None, rng.random(), &mut grads)?;
            let norm = grad_norm(&grads);
            if !out.parts.total().is_finite() || !norm.is_finite() {
                return Err(DetectError::DivergedTraining { epoch });
            }
            if norm > train.clip_norm {
                let s = (train.clip_norm / norm) as f32;
                grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= s));
            }
            opt.step(&mut model.params, &grads);
            sum.add(&out.parts);
        }
        if !model.params.iter().all(Tensor::all_finite) {
            return Err(DetectError::DivergedTraining { epoch });
        }
        log.push(TrainLog {
            epoch,
            parts: sum.scaled(1.0 / samples.len() as f64),
        });
    }
    Ok((model, log))
}

/// [`train_detector`] over the labeled images of several dataset
/// directories, each optionally restricted to an index range.
pub fn train_detector_dirs(
    dirs: &[(PathBuf, Option<std::ops::Range<usize>>)],
    pretrained: &Weights,
    config: &DetectorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(DetectorModel, Vec<TrainLog>)> {
    let mut samples = Vec::new();
    for (d, r) in dirs {
        samples.extend(load_samples(d, r.clone())?);
    }
    train_detector(&samples, pretrained, config, train, seed)
}

// --- inference --------------------------------------------------------------

/// Backbone → RPN proposals → ROI head scores and refined boxes, kept at
/// `score ≥ score_thresh` and suppressed at `nms_thresh`. Scores are the
/// head's foreground softmax probability.
pub fn detect(model: &DetectorModel, img: &GrayImage, score_thresh: f64, nms_thresh: f64) -> Result<Vec<Detection>> {
    let params = &model.params;
    let cfg = &model.config;
    let x = image_tensor::<f32>(img);
    let (feat, _) = features(params, &x)?;
    let (c, fh, fw) = feat.chw();
    if fh == 0 || fw == 0 {
        return Ok(Vec::new());
    }
    let rpn = rpn_forward(params, &feat);
    let anchors = gen_anchors(fw, fh, STRIDE);
    let props = proposals(&anchors, &rpn, img.width, img.height, cfg, cfg.post_nms_test);
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let n = props.len();
    let d = c * ROI_SIZE * ROI_SIZE;
    let mut xs = Vec::with_capacity(n * d);
    for (b, _) in &props {
        xs.extend_from_slice(&roi_pool(&feat, b, ROI_SIZE, STRIDE).0.data);
    }
    let hid = hidden(params, &xs, n)?;
    let prob = softmax(&fc(&hid, n, &params[CLS_W], &params[CLS_B])?, 2);
    let reg = fc(&hid, n, &params[REG_W], &params[REG_B])?;
    let mut dets = Vec::new();
    for (r, (b, _)) in props.iter().enumerate() {
        let score = prob[2 * r + 1] as f64;
        if score < score_thresh {
            continue;
        }
        let t = [0, 1, 2, 3].map(|ci| reg[4 * r + ci] as f64 * cfg.reg_std[ci]);
        let mut bb = decode_box(b, t).clipped(img.width as f64, img.height as f64);
        bb.class_id = HYPERBOLA_CLASS;
        if bb.is_valid() {
            dets.push(Detection::new(bb, score));
        }
    }
    Ok(nms(&dets, nms_thresh))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_layout() {
        let a = gen_anchors(4, 4, 8);
        assert_eq!(a.anchors.len(), 96);
        let k = (4 + 2) * ANCHORS_PER_CELL + 3;
        let b = a.anchors[k];
        assert_eq!(b.center(), (20.0, 12.0));
        assert_eq!((b.width(), b.height()), (45.0, 23.0));
    }

    #[test]
    fn roi_pool_on_ramp() {
        let data: Vec<f64> = (0..64).map(|k| k as f64).collect();
        let feat = Tensor::from_vec(&[1, 8, 8], data).unwrap();
        let (y, arg) = roi_pool(&feat, &BBox::new(0.0, 0.0, 64.0, 64.0), 4, 8);
        for oy in 0..4 {
            for ox in 0..4 {
                let (r, c) = (2 * oy + 1, 2 * ox + 1);
                assert_eq!(y.data[oy * 4 + ox], (r * 8 + c) as f64);
                assert_eq!(arg[oy * 4 + ox] as usize, r * 8 + c);
            }
        }
    }

    #[test]
    fn crop_keeps_a_box() {
        let img = GrayImage::filled(400, 300, 7);
        let b = BBox::new(300.0, 200.0, 340.0, 260.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (c, boxes) = crop_sample(&img, &[b], 256, &mut rng);
            assert_eq!((c.width, c.height), (256, 256));
            assert_eq!(boxes.len(), 1);
            assert_eq!(boxes[0].area(), b.area());
        }
    }
}
