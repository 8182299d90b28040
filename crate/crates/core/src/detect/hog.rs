//! HOG descriptor with a logistic-regression sliding-window classifier.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{nms, Detection, Result};
use crate::annotate::{BBox, Sample, HYPERBOLA_CLASS};
use crate::derive_seed;
use crate::nn::{crop_resize, patches_from_samples, NnError, Sgd, Tensor, Weights};
use crate::radargram::GrayImage;

pub const HOG_WINDOW: usize = 32;
const CELL: usize = 8;
const BINS: usize = 9;
const CELLS: usize = HOG_WINDOW / CELL;
const BLOCKS: usize = CELLS - 1;
pub const HOG_LEN: usize = BLOCKS * BLOCKS * 4 * BINS;
const EPS: f64 = 1e-6;

/// Descriptor of a `32×32` window (row-major, any intensity scale).
pub fn hog_features(window: &[f32]) -> Vec<f64> {
    assert_eq!(window.len(), HOG_WINDOW * HOG_WINDOW, "HOG window must be 32×32");
    let n = HOG_WINDOW as isize;
    let at = |x: isize, y: isize| window[(y.clamp(0, n - 1) * n + x.clamp(0, n - 1)) as usize] as f64;
    let mut hist = [[0.0f64; BINS]; CELLS * CELLS];
    let width = 180.0 / BINS as f64;
    for y in 0..n {
        for x in 0..n {
            let gx = at(x + 1, y) - at(x - 1, y);
            let gy = at(x, y + 1) - at(x, y - 1);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let ang = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            // bin centers at (k + 0.5)·20°, wrapping
            let pos = ang / width - 0.5;
            let lo = pos.floor();
            let frac = pos - lo;
            let b0 = (lo as isize).rem_euclid(BINS as isize) as usize;
            let b1 = (b0 + 1) % BINS;
            let cell = (y as usize / CELL) * CELLS + x as usize / CELL;
            hist[cell][b0] += mag * (1.0 - frac);
            hist[cell][b1] += mag * frac;
        }
    }
    let mut out = Vec::with_capacity(HOG_LEN);
    for by in 0..BLOCKS {
        for bx in 0..BLOCKS {
            let start = out.len();
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out.extend_from_slice(&hist[(by + dy) * CELLS + bx + dx]);
            }
            let norm = (out[start..].iter().map(|v| v * v).sum::<f64>() + EPS * EPS).sqrt();
            out[start..].iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HogModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl HogModel {
    pub fn score(&self, f: &[f64]) -> f64 {
        let z = self.b + self.w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    pub fn to_weights(&self) -> Weights {
        let mut w = Weights::default();
        w.push(
            "hog.w",
            Tensor {
                shape: vec![1, HOG_LEN],
                data: self.w.iter().map(|&v| v as f32).collect(),
            },
        );
        w.push(
            "hog.b",
            Tensor {
                shape: vec![1],
                data: vec![self.b as f32],
            },
        );
        w
    }

    pub fn from_weights(w: &Weights) -> Result<Self> {
        let wt = w.get("hog.w")?;
        let bt = w.get("hog.b")?;
        if wt.shape != [1, HOG_LEN] || bt.shape != [1] {
            return Err(NnError::ShapeMismatch(format!("HOG model {:?} / {:?}", wt.shape, bt.shape)).into());
        }
        Ok(Self {
            w: wt.data.iter().map(|&v| v as f64).collect(),
            b: bt.data[0] as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HogConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Positive and negative training patches drawn per class.
    pub per_class: usize,
    pub stride: usize,
    pub scales: Vec<usize>,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            per_class: 400,
            stride: 8,
            scales: vec![32, 48, 64],
        }
    }
}

/// Logistic regression on descriptors with labels 0/1, by mini-batch SGD
/// from zero weights. Batches follow a seeded shuffle per epoch.
pub fn train_hog(features: &[Vec<f64>], labels: &[usize], cfg: &HogConfig, seed: u64) -> Result<HogModel> {
    if features.is_empty() {
        return Err(super::DetectError::EmptyDataset);
    }
    let mut params = vec![Tensor::<f64>::zeros(&[1, HOG_LEN]), Tensor::zeros(&[1])];
    let mut grads = params.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, 0.0);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
        for batch in order.chunks(cfg.batch.max(1)) {
            grads.iter_mut().for_each(Tensor::fill_zero);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let f = &features[i];
                let z = params[1].data[0] + params[0].data.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
                let e = (1.0 / (1.0 + (-z).exp()) - labels[i] as f64) * inv;
                for (g, x) in grads[0].data.iter_mut().zip(f) {
                    *g += e * x;
                }
                grads[1].data[0] += e;
            }
            // decay on the weights only
            for (g, w) in grads[0].data.iter_mut().zip(&params[0].data) {
                *g += cfg.weight_decay * w;
            }
            opt.step(&mut params, &grads);
        }
        if !params.iter().all(Tensor::all_finite) {
            return Err(super::DetectError::DivergedTraining { epoch });
        }
    }
    Ok(HogModel {
        w: params[0].data.clone(),
        b: params[1].data[0],
    })
}

/// Patches from labeled images (see [`patches_from_samples`]) turned into
/// descriptors, then [`train_hog`].
pub fn train_hog_on_samples(samples: &[Sample], cfg: &HogConfig, seed: u64) -> Result<HogModel> {
    let set = patches_from_samples(samples, cfg.per_class, HOG_WINDOW, derive_seed(seed, 0))?;
    let feats: Vec<Vec<f64>> = set.images.iter().map(|p| hog_features(p)).collect();
    train_hog(&feats, &set.labels, cfg, derive_seed(seed, 1))
}

/// Square windows of each scale at `stride`, resized to 32×32 and scored.
pub fn hog_detect(
    model: &HogModel,
    img: &GrayImage,
    stride: usize,
    scales: &[usize],
    score_thresh: f64,
    nms_thresh: f64,
) -> Vec<Detection> {
    let stride = stride.max(1);
    let mut dets = Vec::new();
    for &s in scales {
        if s > img.width || s > img.height {
            continue;
        }
        for y in (0..=img.height - s).step_by(stride) {
            for x in (0..=img.width - s).step_by(stride) {
                let mut b = BBox::new(x as f64, y as f64, (x + s) as f64, (y + s) as f64);
                let score = model.score(&hog_features(&crop_resize(img, &b, HOG_WINDOW)));
                if score >= score_thresh {
                    b.class_id = HYPERBOLA_CLASS;
                    dets.push(Detection::new(b, score));
                }
            }
        }
    }
    nms(&dets, nms_thresh)
}
