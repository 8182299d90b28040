//! Small dense-tensor CNN engine with hand-written backward passes.
//!
//! Everything is generic over [`Real`] so training runs in `f32` while
//! gradient checks run the same code in `f64`. Layers are free functions
//! over single images (`C×H×W`) or row batches (`N×D`); the caller keeps
//! whatever forward state the backward pass needs.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Debug;
use std::fs;
use std::hash::{Hash, Hasher};
use std::iter::Sum;
use std::path::{Path, PathBuf};

use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::annotate::{iou, BBox, Sample};
use crate::derive_seed;
use crate::radargram::GrayImage;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{}: file length {len} is not a multiple of the 3073-byte record", path.display())]
    BadRecordSize { path: PathBuf, len: usize },
    #[error("{}: record {record} has label {label}", path.display())]
    LabelOutOfRange { path: PathBuf, record: usize, label: u8 },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    DivergedTraining { epoch: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("bad weights magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u16),
    #[error("weights file truncated")]
    Truncated,
    #[error("weights file has {0} trailing bytes")]
    TrailingData(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, NnError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> NnError + '_ {
    move |source| NnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// --- scalar and tensor ------------------------------------------------------

pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    /// `C = alpha·A·B + beta·C` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe in-bounds `m×k`, `k×n` and
    /// `m×n` matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Real for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `C (m×n) = A·B + beta·C`, where `A` is `m×k` (stored `k×m`
/// when `ta`) and `B` is `k×n` (stored `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a distinct &mut borrow.
    unsafe {
        T::raw_gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }
}

fn debug_finite<T: Real>(t: &Tensor<T>, what: &str) {
    debug_assert!(t.all_finite(), "non-finite values after {what}");
}

// --- layers -----------------------------------------------------------------

pub fn conv_out(size: usize, k: usize, pad: usize, stride: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds `x` (`C×H×W`) into a `(C·k·k) × (H'·W')` patch matrix.
pub fn im2col<T: Real>(x: &Tensor<T>, k: usize, pad: usize, stride: usize) -> (Vec<T>, usize, usize) {
    let (c, h, w) = x.chw();
    let ho = conv_out(h, k, pad, stride).unwrap_or(0);
    let wo = conv_out(w, k, pad, stride).unwrap_or(0);
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x.data[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto `C×H×W`.
pub fn col2im<T: Real>(cols: &[T], shape: (usize, usize, usize), k: usize, pad: usize, stride: usize) -> Tensor<T> {
    let (c, h, w) = shape;
    let ho = conv_out(h, k, pad, stride).unwrap_or(0);
    let wo = conv_out(w, k, pad, stride).unwrap_or(0);
    let mut x = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        let plane = &mut x.data[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] = plane[iy as usize * w + ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// State kept by [`conv2d`] for its backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub cols: Vec<T>,
    pub in_shape: (usize, usize, usize),
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

/// Cross-correlation of `x` (`C×H×W`) with `w` (`F×C×k×k`) plus bias.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, pad: usize, stride: usize) -> Result<(Tensor<T>, ConvCache<T>)> {
    if x.shape.len() != 3 || w.shape.len() != 4 || b.shape != [w.shape[0]] {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d input {:?}, kernels {:?}, bias {:?}",
            x.shape, w.shape, b.shape
        )));
    }
    let (f, c, k, k2) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    let (xc, h, wd) = x.chw();
    if c != xc || k != k2 || stride == 0 || conv_out(h, k, pad, stride).is_none() || conv_out(wd, k, pad, stride).is_none() {
        return Err(NnError::ShapeMismatch(format!(
            "conv2d input {:?} incompatible with kernels {:?}",
            x.shape, w.shape
        )));
    }
    let (cols, ho, wo) = im2col(x, k, pad, stride);
    let mut y = Tensor::zeros(&[f, ho, wo]);
    for fi in 0..f {
        let bv = b.data[fi];
        y.data[fi * ho * wo..(fi + 1) * ho * wo].iter_mut().for_each(|v| *v = bv);
    }
    gemm(false, false, f, ho * wo, c * k * k, &w.data, &cols, T::one(), &mut y.data);
    debug_finite(&y, "conv2d");
    Ok((
        y,
        ConvCache {
            cols,
            in_shape: (c, h, wd),
            k,
            pad,
            stride,
        },
    ))
}

/// Accumulates `dw`, `db` and returns `dx` when `need_dx`.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let f = w.shape[0];
    let ckk = w.shape[1] * cache.k * cache.k;
    let hw = dy.data.len() / f;
    gemm(false, true, f, ckk, hw, &dy.data, &cache.cols, T::one(), &mut dw.data);
    for fi in 0..f {
        let s: T = dy.data[fi * hw..(fi + 1) * hw].iter().copied().sum();
        db.data[fi] = db.data[fi] + s;
    }
    if !need_dx {
        return None;
    }
    let mut dcols = vec![T::zero(); ckk * hw];
    gemm(true, false, ckk, hw, f, &w.data, &dy.data, T::zero(), &mut dcols);
    Some(col2im(&dcols, cache.in_shape, cache.k, cache.pad, cache.stride))
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes `dy` wherever the forward output `y` was not positive.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, v) in dy.data.iter_mut().zip(&y.data) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling (odd trailing rows/columns dropped). Returns
/// the flat input index of every maximum, first occurrence on ties.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.chw();
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[c, ho, wo]);
    let mut arg = vec![0u32; c * ho * wo];
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[k] > x.data[best] {
                        best = k;
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], in_shape: (usize, usize, usize)) -> Tensor<T> {
    let mut dx = Tensor::zeros(&[in_shape.0, in_shape.1, in_shape.2]);
    for (g, &k) in dy.data.iter().zip(arg) {
        dx.data[k as usize] = dx.data[k as usize] + *g;
    }
    dx
}

/// Batched affine map: `x` is `N×D`, `w` is `O×D`, output `N×O`.
pub fn fc<T: Real>(x: &[T], n: usize, w: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<T>> {
    let (o, d) = (w.shape[0], w.shape[1]);
    if x.len() != n * d || b.shape != [o] {
        return Err(NnError::ShapeMismatch(format!(
            "fc input {n}x{} against weights {:?}",
            x.len() / n.max(1),
            w.shape
        )));
    }
    let mut y: Vec<T> = (0..n).flat_map(|_| b.data.iter().copied()).collect();
    gemm(false, true, n, o, d, x, &w.data, T::one(), &mut y);
    Ok(y)
}

/// Accumulates `dw`, `db`; returns `dx` (`N×D`).
pub fn fc_backward<T: Real>(x: &[T], n: usize, w: &Tensor<T>, dy: &[T], dw: &mut Tensor<T>, db: &mut Tensor<T>) -> Vec<T> {
    let (o, d) = (w.shape[0], w.shape[1]);
    gemm(true, false, o, d, n, dy, x, T::one(), &mut dw.data);
    for row in dy.chunks_exact(o) {
        for (acc, g) in db.data.iter_mut().zip(row) {
            *acc = *acc + *g;
        }
    }
    let mut dx = vec![T::zero(); n * d];
    gemm(false, false, n, d, o, dy, &w.data, T::zero(), &mut dx);
    dx
}

/// Row-wise softmax of an `N×K` matrix.
pub fn softmax<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

/// Mean cross-entropy over the rows whose label is `Some`, and its
/// gradient. Rows labeled `None` contribute nothing.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], k: usize, labels: &[Option<usize>]) -> (T, Vec<T>) {
    let p = softmax(logits, k);
    let mut grad = vec![T::zero(); logits.len()];
    let count = labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return (T::zero(), grad);
    }
    let inv = T::one() / T::of(count as f64);
    let mut loss = T::zero();
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let row = &p[r * k..(r + 1) * k];
        loss = loss - row[y].max(T::min_positive_value()).ln();
        for j in 0..k {
            let t = if j == y { T::one() } else { T::zero() };
            grad[r * k + j] = (row[j] - t) * inv;
        }
    }
    (loss * inv, grad)
}

/// `Σ smooth_l1(pred − target)` and its gradient.
pub fn smooth_l1<T: Real>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let x = *p - *t;
            if x.abs() < T::one() {
                loss = loss + T::of(0.5) * x * x;
                x
            } else {
                loss = loss + x.abs() - T::of(0.5);
                x.signum()
            }
        })
        .collect();
    (loss, grad)
}

// --- backbone ---------------------------------------------------------------

pub const CONV_FILTERS: [usize; 3] = [16, 32, 64];
pub const KERNEL: usize = 5;
pub const PAD: usize = 2;
pub const HIDDEN: usize = 64;
/// Total down-sampling of the three pooled blocks.
pub const STRIDE: usize = 8;

pub const PARAM_NAMES: [&str; 10] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];
pub const FC1_W: usize = 6;
pub const FC1_B: usize = 7;
pub const FC2_W: usize = 8;
pub const FC2_B: usize = 9;

/// Three conv(5×5, pad 2) → ReLU → maxpool blocks, then FC-64 → ReLU →
/// FC to the class logits. `params` follow [`PARAM_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub params: Vec<Tensor<T>>,
    pub input: (usize, usize),
    pub n_classes: usize,
}

/// Forward state of the three conv blocks.
#[derive(Debug, Clone)]
pub struct FeatureCache<T> {
    convs: Vec<ConvCache<T>>,
    relu_out: Vec<Tensor<T>>,
    pool_arg: Vec<Vec<u32>>,
}

impl<T> FeatureCache<T> {
    /// Hash of every ReLU mask and pooling choice. Finite-difference checks
    /// skip perturbations that change it, since they straddle a kink.
    pub fn signature(&self, h: &mut impl Hasher)
    where
        T: Real,
    {
        for r in &self.relu_out {
            for v in &r.data {
                (*v > T::zero()).hash(h);
            }
        }
        self.pool_arg.hash(h);
    }
}

/// Forward state of the classifier head for a batch of flattened features.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pub x: Vec<T>,
    pub hidden: Vec<T>,
    pub n: usize,
}

impl<T: Real> Backbone<T> {
    /// He-normal weights (std √(2/fan_in)) from a seeded generator, zero
    /// biases. `input` fixes the flattened size feeding `fc1`.
    pub fn init(input: (usize, usize), n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = CONV_FILTERS[2] * (input.0 / STRIDE) * (input.1 / STRIDE);
        let shapes: [Vec<usize>; 10] = [
            vec![16, 1, KERNEL, KERNEL],
            vec![16],
            vec![32, 16, KERNEL, KERNEL],
            vec![32],
            vec![64, 32, KERNEL, KERNEL],
            vec![64],
            vec![HIDDEN, flat],
            vec![HIDDEN],
            vec![n_classes, HIDDEN],
            vec![n_classes],
        ];
        let params = shapes
            .iter()
            .map(|s| {
                if s.len() == 1 {
                    return Tensor::zeros(s);
                }
                let fan_in: usize = s[1..].iter().product();
                he_normal(s, fan_in, &mut rng)
            })
            .collect();
        Self {
            params,
            input,
            n_classes,
        }
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect()
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<(Tensor<T>, FeatureCache<T>)> {
        features(&self.params, x)
    }

    pub fn features_backward(&self, cache: &FeatureCache<T>, dfeat: Tensor<T>, grads: &mut [Tensor<T>]) {
        features_backward(&self.params, cache, dfeat, grads)
    }

    pub fn hidden(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        hidden(&self.params, x, n)
    }

    pub fn hidden_backward(&self, x: &[T], n: usize, h: &[T], dh: &[T], grads: &mut [Tensor<T>]) -> Vec<T> {
        hidden_backward(&self.params, x, n, h, dh, grads)
    }

    /// Class logits of one `1×H×W` input.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let (f, _) = self.features(x)?;
        let h = self.hidden(&f.data, 1)?;
        fc(&h, 1, &self.params[FC2_W], &self.params[FC2_B])
    }

    /// Cross-entropy of one labeled input, accumulating gradients into
    /// `grads`. Returns the loss and the kink signature.
    pub fn loss_grad(&self, x: &Tensor<T>, label: usize, grads: &mut [Tensor<T>]) -> Result<(T, u64)> {
        let (f, cache) = self.features(x)?;
        let h = self.hidden(&f.data, 1)?;
        let logits = fc(&h, 1, &self.params[FC2_W], &self.params[FC2_B])?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, self.n_classes, &[Some(label)]);
        let (gw, rest) = grads[FC2_W..].split_at_mut(1);
        let dh = fc_backward(&h, 1, &self.params[FC2_W], &dlogits, &mut gw[0], &mut rest[0]);
        let df = self.hidden_backward(&f.data, 1, &h, &dh, grads);
        self.features_backward(&cache, Tensor::from_vec(&f.shape, df)?, grads);
        let mut hs = DefaultHasher::new();
        cache.signature(&mut hs);
        for v in &h {
            (*v > T::zero()).hash(&mut hs);
        }
        Ok((loss, hs.finish()))
    }

    pub fn to_weights(&self) -> Weights {
        Weights {
            tensors: PARAM_NAMES
                .iter()
                .zip(&self.params)
                .map(|(n, t)| (n.to_string(), t.cast()))
                .collect(),
        }
    }

    /// Reads the ten backbone tensors, optionally under a name prefix.
    pub fn from_weights(w: &Weights, prefix: &str) -> Result<Self> {
        let mut params = Vec::with_capacity(10);
        for name in PARAM_NAMES {
            params.push(w.get(&format!("{prefix}{name}"))?.cast());
        }
        let shapes_ok = params[0].shape == [16, 1, KERNEL, KERNEL]
            && params[2].shape == [32, 16, KERNEL, KERNEL]
            && params[4].shape == [64, 32, KERNEL, KERNEL]
            && params[FC1_W].shape.len() == 2
            && params[FC1_W].shape[0] == HIDDEN
            && params[FC2_W].shape.len() == 2
            && params[FC2_W].shape[1] == HIDDEN;
        if !shapes_ok {
            return Err(NnError::ShapeMismatch("weights do not match the backbone layout".into()));
        }
        let flat = params[FC1_W].shape[1] / CONV_FILTERS[2];
        let side = (flat as f64).sqrt() as usize * STRIDE;
        let n_classes = params[FC2_W].shape[0];
        Ok(Self {
            params,
            input: (side, side),
            n_classes,
        })
    }
}

/// Backbone conv blocks over the first six of `params`: `1×H×W` → `64×H/8×W/8`.
pub fn features<T: Real>(params: &[Tensor<T>], x: &Tensor<T>) -> Result<(Tensor<T>, FeatureCache<T>)> {
    let mut cache = FeatureCache {
        convs: Vec::with_capacity(3),
        relu_out: Vec::with_capacity(3),
        pool_arg: Vec::with_capacity(3),
    };
    let mut cur = x.clone();
    for b in 0..3 {
        let (mut y, cc) = conv2d(&cur, &params[2 * b], &params[2 * b + 1], PAD, 1)?;
        relu(&mut y);
        let (p, arg) = maxpool2(&y);
        cache.convs.push(cc);
        cache.relu_out.push(y);
        cache.pool_arg.push(arg);
        cur = p;
    }
    Ok((cur, cache))
}

/// Accumulates conv parameter gradients from `dfeat`.
pub fn features_backward<T: Real>(params: &[Tensor<T>], cache: &FeatureCache<T>, dfeat: Tensor<T>, grads: &mut [Tensor<T>]) {
    let mut d = dfeat;
    for b in (0..3).rev() {
        let y = &cache.relu_out[b];
        let mut dy = maxpool2_backward(&d, &cache.pool_arg[b], y.chw());
        relu_backward(y, &mut dy);
        let (gw, rest) = grads[2 * b..].split_at_mut(1);
        let dx = conv2d_backward(&cache.convs[b], &params[2 * b], &dy, &mut gw[0], &mut rest[0], b > 0);
        if let Some(dx) = dx {
            d = dx;
        }
    }
}

/// Backbone FC-64 → ReLU on `N` flattened feature rows.
pub fn hidden<T: Real>(params: &[Tensor<T>], x: &[T], n: usize) -> Result<Vec<T>> {
    let mut h = fc(x, n, &params[FC1_W], &params[FC1_B])?;
    h.iter_mut().for_each(|v| *v = v.max(T::zero()));
    Ok(h)
}

/// Backward through [`hidden`]; returns `dx`.
pub fn hidden_backward<T: Real>(params: &[Tensor<T>], x: &[T], n: usize, h: &[T], dh: &[T], grads: &mut [Tensor<T>]) -> Vec<T> {
    let dh: Vec<T> = dh.iter().zip(h).map(|(g, v)| if *v > T::zero() { *g } else { T::zero() }).collect();
    let (gw, rest) = grads[FC1_W..].split_at_mut(1);
    fc_backward(x, n, &params[FC1_W], &dh, &mut gw[0], &mut rest[0])
}

pub fn he_normal<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal_tensor(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| T::of(dist.sample(rng))).collect(),
    }
}

// --- optimizer --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum·v − lr·(g + wd·w); w += v`, parameter by parameter.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        }
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((w, gi), vi) in p.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vi = mu * *vi - lr * (*gi + wd * *w);
                *w = *w + *vi;
            }
        }
    }
}

// --- gradient check ---------------------------------------------------------

/// One evaluation of a loss for [`grad_check`]: value, analytic gradients
/// (only read for the unperturbed call) and kink signature.
pub struct Evaluation<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub signature: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Samples dropped because a perturbation crossed a ReLU or pooling kink.
    pub skipped: usize,
}

/// Relative error `|a − n| / max(|a|, |n|)`, with differences below `1e-9`
/// in absolute terms treated as agreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// Compares analytic gradients with central differences
/// `(f(w+eps) − f(w−eps)) / 2eps` on up to `max_samples` parameters drawn
/// without replacement.
pub fn grad_check<T: Real>(
    params: &mut [Tensor<T>],
    eps: f64,
    max_samples: usize,
    seed: u64,
    mut eval: impl FnMut(&[Tensor<T>]) -> Evaluation<T>,
) -> GradCheckReport {
    let base = eval(params);
    let mut slots: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    slots.shuffle(&mut rng);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (i, j) in slots {
        if report.checked >= max_samples {
            break;
        }
        let w0 = params[i].data[j];
        params[i].data[j] = T::of(w0.f64() + eps);
        let plus = eval(params);
        params[i].data[j] = T::of(w0.f64() - eps);
        let minus = eval(params);
        params[i].data[j] = w0;
        if plus.signature != base.signature || minus.signature != base.signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let analytic = base.grads[i].data[j].f64();
        report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
        report.checked += 1;
    }
    report
}

// --- weights file -----------------------------------------------------------

pub const GPNW_MAGIC: &[u8; 4] = b"GPNW";
pub const GPNW_VERSION: u16 = 1;

/// Ordered named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Weights {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }
}

pub fn encode_weights(w: &Weights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GPNW_MAGIC);
    out.extend_from_slice(&GPNW_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.tensors.len() as u32).to_le_bytes());
    for (name, t) in &w.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &e in &t.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(NnError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(NnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != GPNW_MAGIC {
        return Err(NnError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != GPNW_VERSION {
        return Err(NnError::UnsupportedVersion(version));
    }
    let count = r.u32()? as usize;
    let mut w = Weights::default();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| NnError::BadName)?.to_string();
        if w.tensors.iter().any(|(n, _)| *n == name) {
            return Err(NnError::DuplicateName(name));
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let e = r.u32()? as usize;
            n = n.checked_mul(e).ok_or(NnError::Truncated)?;
            shape.push(e);
        }
        let payload = r.take(n.checked_mul(4).ok_or(NnError::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        w.tensors.push((name, Tensor { shape, data }));
    }
    if r.pos != bytes.len() {
        return Err(NnError::TrailingData(bytes.len() - r.pos));
    }
    Ok(w)
}

pub fn write_weights(path: impl AsRef<Path>, w: &Weights) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(w)).map_err(io_err(path))
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let path = path.as_ref();
    decode_weights(&fs::read(path).map_err(io_err(path))?)
}

// --- patch datasets ---------------------------------------------------------

/// Square single-channel patches with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub size: usize,
    pub images: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off every `k`-th item (index ≡ k−1 mod k) as a held-out set.
    pub fn split_every(&self, k: usize) -> (PatchSet, PatchSet) {
        let mut train = PatchSet {
            images: Vec::new(),
            labels: Vec::new(),
            ..self.clone()
        };
        let mut test = train.clone();
        for (i, (im, l)) in self.images.iter().zip(&self.labels).enumerate() {
            let dst = if i % k == k - 1 { &mut test } else { &mut train };
            dst.images.push(im.clone());
            dst.labels.push(*l);
        }
        (train, test)
    }
}

pub const CIFAR_RECORD: usize = 3073;

/// Rec.601 luma `round(0.299R + 0.587G + 0.114B)`.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).round() as u8
}

pub fn decode_cifar10(bytes: &[u8], path: &Path) -> Result<PatchSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(NnError::BadRecordSize {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let mut set = PatchSet {
        size: 32,
        images: Vec::new(),
        labels: Vec::new(),
        n_classes: 10,
    };
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(NnError::LabelOutOfRange {
                path: path.to_path_buf(),
                record: i,
                label: rec[0],
            });
        }
        let (r, g, b) = (&rec[1..1025], &rec[1025..2049], &rec[2049..3073]);
        set.images.push((0..1024).map(|k| luma(r[k], g[k], b[k]) as f32 / 255.0).collect());
        set.labels.push(rec[0] as usize);
    }
    Ok(set)
}

/// Reads Cifar-10 binary batches and converts them to grayscale.
pub fn load_cifar10_grayscale<P: AsRef<Path>>(paths: &[P]) -> Result<PatchSet> {
    let mut all = PatchSet {
        size: 32,
        images: Vec::new(),
        labels: Vec::new(),
        n_classes: 10,
    };
    for p in paths {
        let p = p.as_ref();
        let set = decode_cifar10(&fs::read(p).map_err(io_err(p))?, p)?;
        all.images.extend(set.images);
        all.labels.extend(set.labels);
    }
    Ok(all)
}

/// Bilinear resample of the image region `b` onto a `size×size` patch with
/// values in `[0, 1]`; samples outside the image clamp to the border.
pub fn crop_resize(img: &GrayImage, b: &BBox, size: usize) -> Vec<f32> {
    let (w, h) = (img.width as f64, img.height as f64);
    let at = |x: f64, y: f64| -> f64 {
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let (x0, y0) = (x.floor(), y.floor());
        let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
        let (fx, fy) = (x - x0, y - y0);
        let p = |xx: f64, yy: f64| img.get(xx as usize, yy as usize) as f64;
        (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy) + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy
    };
    let (sx, sy) = (b.width() / size as f64, b.height() / size as f64);
    let mut out = Vec::with_capacity(size * size);
    for j in 0..size {
        for i in 0..size {
            let x = b.xmin + (i as f64 + 0.5) * sx - 0.5;
            let y = b.ymin + (j as f64 + 0.5) * sy - 0.5;
            out.push((at(x, y) / 255.0) as f32);
        }
    }
    out
}

/// Two-class patch set from labeled radargram images: class 1 is a
/// ground-truth box (with a little positional jitter), class 0 a random
/// window of similar size overlapping no box by more than 0.1 IoU.
pub fn patches_from_samples(samples: &[Sample], per_class: usize, size: usize, seed: u64) -> Result<PatchSet> {
    let boxes: Vec<(usize, BBox)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.boxes.iter().map(move |b| (i, *b)))
        .collect();
    if boxes.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = PatchSet {
        size,
        images: Vec::with_capacity(2 * per_class),
        labels: Vec::with_capacity(2 * per_class),
        n_classes: 2,
    };
    for k in 0..per_class {
        let (si, b) = boxes[k % boxes.len()];
        let (jx, jy) = (0.1 * b.width(), 0.1 * b.height());
        let dx = rng.random_range(-jx..=jx);
        let dy = rng.random_range(-jy..=jy);
        let pos = BBox::new(b.xmin + dx, b.ymin + dy, b.xmax + dx, b.ymax + dy);
        set.images.push(crop_resize(&samples[si].image, &pos, size));
        set.labels.push(1);

        let (_, tmpl) = boxes[rng.random_range(0..boxes.len())];
        let s = &samples[rng.random_range(0..samples.len())];
        let (iw, ih) = (s.image.width as f64, s.image.height as f64);
        let (bw, bh) = (tmpl.width().min(iw - 1.0).max(4.0), tmpl.height().min(ih - 1.0).max(4.0));
        let mut neg = None;
        for _ in 0..100 {
            let x = rng.random_range(0.0..=(iw - bw).max(0.0));
            let y = rng.random_range(0.0..=(ih - bh).max(0.0));
            let c = BBox::new(x, y, x + bw, y + bh);
            if s.boxes.iter().all(|g| iou(g, &c) <= 0.1) {
                neg = Some(c);
                break;
            }
        }
        let c = neg.unwrap_or_else(|| BBox::new(0.0, ih - bh, bw, ih));
        set.images.push(crop_resize(&s.image, &c, size));
        set.labels.push(0);
    }
    Ok(set)
}

// --- pretraining ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 0.01,
            milestones: vec![15, 25],
            decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Maps `[0, 1]` intensities to roughly zero-mean unit-range inputs.
pub fn normalize_pixel(v: f32) -> f32 {
    (v * 255.0 - 128.0) / 64.0
}

pub fn patch_tensor<T: Real>(patch: &[f32], size: usize) -> Tensor<T> {
    Tensor {
        shape: vec![1, size, size],
        data: patch.iter().map(|&v| T::of(normalize_pixel(v) as f64)).collect(),
    }
}

pub fn predict(model: &Backbone<f32>, patch: &[f32], size: usize) -> Result<usize> {
    let logits = model.logits(&patch_tensor(patch, size))?;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0)
}

pub fn accuracy(model: &Backbone<f32>, set: &PatchSet) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (im, &l) in set.images.iter().zip(&set.labels) {
        hits += (predict(model, im, set.size)? == l) as usize;
    }
    Ok(hits as f64 / set.len() as f64)
}

/// Trains the backbone with its classification head by mini-batch SGD.
/// Deterministic for a fixed seed: initialization and every epoch's shuffle
/// derive from it, and gradients are summed in batch order.
pub fn pretrain_backbone(set: &PatchSet, cfg: &PretrainConfig, seed: u64) -> Result<(Backbone<f32>, Vec<EpochLog>)> {
    if set.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut model = Backbone::<f32>::init((set.size, set.size), set.n_classes, derive_seed(seed, 0));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut grads = model.zeros_like();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let inputs: Vec<Tensor<f32>> = set.images.iter().map(|p| patch_tensor(p, set.size)).collect();
    for epoch in 0..cfg.epochs {
        let drops = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
        opt.lr = cfg.lr * cfg.decay.powi(drops as i32);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 + epoch as u64)));
        let (mut total, mut hits) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch.max(1)) {
            grads.iter_mut().for_each(Tensor::fill_zero);
            for &i in batch {
                let (loss, _) = model.loss_grad(&inputs[i], set.labels[i], &mut grads)?;
                total += loss as f64;
                let logits = model.logits(&inputs[i])?;
                let pred = (0..logits.len()).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
                hits += (pred == set.labels[i]) as usize;
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut() {
                g.data.iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(&mut model.params, &grads);
        }
        let loss = total / set.len() as f64;
        if !loss.is_finite() || !model.params.iter().all(Tensor::all_finite) {
            return Err(NnError::DivergedTraining { epoch });
        }
        log.push(EpochLog {
            epoch,
            loss,
            train_accuracy: hits as f64 / set.len() as f64,
        });
    }
    Ok((model, log))
}
