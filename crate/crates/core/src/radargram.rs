//! B-scan container, conditioning, noise model, rendering and file formats.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::derive_seed;

#[derive(Debug, Error)]
pub enum RadargramError {
    #[error("invalid radargram: {0}")]
    Invalid(String),
    #[error("dewow window must be odd and >= 3, got {0}")]
    BadWindow(usize),
    #[error("background removal needs at least 2 traces, got {0}")]
    TooFewTraces(usize),
    #[error("noise estimation needs at least 2 selected traces")]
    EmptySelection,
    #[error("trace range {start}..{end} exceeds {n_traces} traces")]
    SelectionOutOfBounds {
        start: usize,
        end: usize,
        n_traces: usize,
    },
    #[error("noise model has {model} depths but radargram has {samples} samples")]
    LengthMismatch { model: usize, samples: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("{found} bytes where {expected} were expected")]
    TrailingData { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported PGM maxval {0}")]
    UnsupportedMaxval(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RadargramError>;

/// Time × position amplitude matrix. Storage is trace-major: the samples of
/// trace `i` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Radargram {
    n_traces: usize,
    n_samples: usize,
    data: Vec<f32>,
    /// Seconds per sample.
    pub dt: f64,
    /// Metres between traces.
    pub dx_m: f64,
    /// Time of the physical zero (wavelet peak at zero range), seconds.
    pub time_zero: f64,
}

impl Radargram {
    pub fn new(
        n_traces: usize,
        n_samples: usize,
        data: Vec<f32>,
        dt: f64,
        dx_m: f64,
        time_zero: f64,
    ) -> Result<Self> {
        if n_traces == 0 || n_samples == 0 {
            return Err(RadargramError::Invalid(format!(
                "empty radargram {n_traces}x{n_samples}"
            )));
        }
        if data.len() != n_traces * n_samples {
            return Err(RadargramError::Invalid(format!(
                "{} values for {n_traces}x{n_samples}",
                data.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite() && dx_m > 0.0 && dx_m.is_finite()) {
            return Err(RadargramError::Invalid(format!("dt={dt}, dx={dx_m}")));
        }
        if !time_zero.is_finite() {
            return Err(RadargramError::Invalid("non-finite time_zero".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RadargramError::Invalid("non-finite sample".into()));
        }
        Ok(Self {
            n_traces,
            n_samples,
            data,
            dt,
            dx_m,
            time_zero,
        })
    }

    pub fn from_traces(traces: &[Vec<f32>], dt: f64, dx_m: f64, time_zero: f64) -> Result<Self> {
        let n_samples = traces.first().map_or(0, |t| t.len());
        if traces.iter().any(|t| t.len() != n_samples) {
            return Err(RadargramError::Invalid("ragged traces".into()));
        }
        let data = traces.iter().flatten().copied().collect();
        Self::new(traces.len(), n_samples, data, dt, dx_m, time_zero)
    }

    pub fn zeros(n_traces: usize, n_samples: usize, dt: f64, dx_m: f64) -> Result<Self> {
        Self::new(n_traces, n_samples, vec![0.0; n_traces * n_samples], dt, dx_m, 0.0)
    }

    pub fn n_traces(&self) -> usize {
        self.n_traces
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn trace(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn trace_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.n_samples;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn traces(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.n_samples)
    }

    fn traces_mut(&mut self) -> std::slice::ChunksExactMut<'_, f32> {
        self.data.chunks_exact_mut(self.n_samples)
    }

    pub fn get(&self, trace: usize, sample: usize) -> f32 {
        self.data[trace * self.n_samples + sample]
    }

    /// Total recorded time, `n_samples * dt`.
    pub fn time_window(&self) -> f64 {
        self.n_samples as f64 * self.dt
    }

    /// Mirror image along the scan direction.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_traces {
            out.trace_mut(i)
                .copy_from_slice(self.trace(self.n_traces - 1 - i));
        }
        out
    }

}

/// Subtracts the centered running mean of each trace. The window is clipped
/// at both ends of the trace.
pub fn dewow(r: &Radargram, window: usize) -> Result<Radargram> {
    if window < 3 || window % 2 == 0 {
        return Err(RadargramError::BadWindow(window));
    }
    let half = window / 2;
    let n = r.n_samples;
    let mut out = r.clone();
    let mut prefix = vec![0.0f64; n + 1];
    for (src, dst) in r.traces().zip(out.traces_mut()) {
        for (k, &v) in src.iter().enumerate() {
            prefix[k + 1] = prefix[k] + v as f64;
        }
        for (k, o) in dst.iter_mut().enumerate() {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(n);
            let mean = (prefix[hi] - prefix[lo]) / (hi - lo) as f64;
            *o = (src[k] as f64 - mean) as f32;
        }
    }
    Ok(out)
}

/// Subtracts the mean trace from every trace.
pub fn remove_background(r: &Radargram) -> Result<Radargram> {
    if r.n_traces < 2 {
        return Err(RadargramError::TooFewTraces(r.n_traces));
    }
    let mut mean = vec![0.0f64; r.n_samples];
    for tr in r.traces() {
        for (m, &v) in mean.iter_mut().zip(tr) {
            *m += v as f64;
        }
    }
    let inv = 1.0 / r.n_traces as f64;
    let mut out = r.clone();
    for tr in out.traces_mut() {
        for (v, m) in tr.iter_mut().zip(&mean) {
            *v = (*v as f64 - m * inv) as f32;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainKind {
    Linear,
    Exponential,
}

/// Time-varying gain `g(t) = 1 + k t` or `exp(k t)`, `t = sample * dt` in
/// seconds.
pub fn apply_gain(r: &Radargram, kind: GainKind, k: f64) -> Radargram {
    let gains: Vec<f64> = (0..r.n_samples)
        .map(|s| {
            let t = s as f64 * r.dt;
            match kind {
                GainKind::Linear => 1.0 + k * t,
                GainKind::Exponential => (k * t).exp(),
            }
        })
        .collect();
    let mut out = r.clone();
    for tr in out.traces_mut() {
        for (v, g) in tr.iter_mut().zip(&gains) {
            *v = (*v as f64 * g) as f32;
        }
    }
    out
}

/// Scales trace `i` by a factor ramping linearly from `left` to `right`
/// across the scan.
pub fn apply_lateral_gain(r: &Radargram, left: f64, right: f64) -> Radargram {
    let mut out = r.clone();
    let n = r.n_traces;
    for (i, tr) in out.traces_mut().enumerate() {
        let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let g = left + (right - left) * f;
        for v in tr.iter_mut() {
            *v = (*v as f64 * g) as f32;
        }
    }
    out
}

/// Resamples every trace onto `n_out` samples spanning the same time window.
/// Downsampling first box-filters over the decimation interval.
pub fn resample_time(r: &Radargram, n_out: usize) -> Result<Radargram> {
    if n_out == 0 {
        return Err(RadargramError::Invalid("zero output samples".into()));
    }
    let dt_out = r.time_window() / n_out as f64;
    let ratio = dt_out / r.dt;
    let half = if ratio > 1.0 {
        (ratio / 2.0).floor() as usize
    } else {
        0
    };
    let n = r.n_samples;
    let mut data = Vec::with_capacity(r.n_traces * n_out);
    let mut prefix = vec![0.0f64; n + 1];
    for tr in r.traces() {
        for (k, &v) in tr.iter().enumerate() {
            prefix[k + 1] = prefix[k] + v as f64;
        }
        let smooth = |k: usize| {
            let lo = k.saturating_sub(half);
            let hi = (k + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        };
        for j in 0..n_out {
            let pos = j as f64 * ratio;
            let k0 = (pos.floor() as usize).min(n - 1);
            let k1 = (k0 + 1).min(n - 1);
            let w = (pos - k0 as f64).clamp(0.0, 1.0);
            data.push((smooth(k0) * (1.0 - w) + smooth(k1) * w) as f32);
        }
    }
    Radargram::new(r.n_traces, n_out, data, dt_out, r.dx_m, r.time_zero)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    /// Independent zero-mean Gaussian draws from ChaCha8 streams keyed by
    /// `(seed, trace index)`.
    GaussianChaCha8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub per_depth_std: Vec<f64>,
    pub family: NoiseFamily,
}

impl NoiseModel {
    pub fn new(per_depth_std: Vec<f64>) -> Self {
        Self {
            per_depth_std,
            family: NoiseFamily::GaussianChaCha8,
        }
    }
}

/// Per-sample standard deviation across the selected (object-free) traces.
pub fn estimate_noise(r: &Radargram, columns: &[Range<usize>]) -> Result<NoiseModel> {
    let mut selected = Vec::new();
    for c in columns {
        if c.end > r.n_traces || c.start > c.end {
            return Err(RadargramError::SelectionOutOfBounds {
                start: c.start,
                end: c.end,
                n_traces: r.n_traces,
            });
        }
        selected.extend(c.clone());
    }
    if selected.len() < 2 {
        return Err(RadargramError::EmptySelection);
    }
    let n = selected.len() as f64;
    let std = (0..r.n_samples)
        .map(|s| {
            let mean = selected.iter().map(|&i| r.get(i, s) as f64).sum::<f64>() / n;
            let var = selected
                .iter()
                .map(|&i| {
                    let d = r.get(i, s) as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / (n - 1.0);
            var.sqrt()
        })
        .collect();
    Ok(NoiseModel::new(std))
}

/// Adds independent Gaussian noise with the model's per-depth standard
/// deviation. Trace `i` draws from its own stream, so the result does not
/// depend on evaluation order.
pub fn add_noise(r: &Radargram, m: &NoiseModel, seed: u64) -> Result<Radargram> {
    if m.per_depth_std.len() != r.n_samples {
        return Err(RadargramError::LengthMismatch {
            model: m.per_depth_std.len(),
            samples: r.n_samples,
        });
    }
    let mut out = r.clone();
    for (i, tr) in out.traces_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        for (v, &std) in tr.iter_mut().zip(&m.per_depth_std) {
            let z: f64 = StandardNormal.sample(&mut rng);
            if std > 0.0 {
                *v = (*v as f64 + std * z) as f32;
            }
        }
    }
    Ok(out)
}

/// 8-bit grayscale image, row-major, row 0 = earliest time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(RadargramError::Invalid(format!(
                "{} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderMode {
    GlobalMinMax,
    /// Clip to the `p` and `100 - p` percentiles before scaling.
    Percentile(f64),
}

impl Default for RenderMode {
    fn default() -> Self {
        RenderMode::Percentile(2.0)
    }
}

fn quantile(sorted: &[f32], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - w) + sorted[hi] as f64 * w
}

/// Affine map of amplitudes onto 0..=255 (trace = column, sample = row). A
/// degenerate range renders as uniform 128.
pub fn to_image(r: &Radargram, mode: RenderMode) -> GrayImage {
    let (lo, hi) = match mode {
        RenderMode::GlobalMinMax => {
            let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
            for &v in &r.data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            (lo as f64, hi as f64)
        }
        RenderMode::Percentile(p) => {
            let mut sorted = r.data.clone();
            sorted.sort_by(f32::total_cmp);
            (quantile(&sorted, p / 100.0), quantile(&sorted, 1.0 - p / 100.0))
        }
    };
    let (w, h) = (r.n_traces, r.n_samples);
    if !(hi > lo) {
        return GrayImage::filled(w, h, 128);
    }
    let scale = 255.0 / (hi - lo);
    let mut pixels = vec![0u8; w * h];
    for (x, tr) in r.traces().enumerate() {
        for (y, &v) in tr.iter().enumerate() {
            let p = ((v as f64 - lo) * scale).round().clamp(0.0, 255.0);
            pixels[y * w + x] = p as u8;
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Conditioning applied before rendering: dewow, background removal,
/// time gain, percentile display.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub dewow_window: Option<usize>,
    pub remove_background: bool,
    pub gain: Option<(GainKind, f64)>,
    pub render: RenderMode,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            dewow_window: Some(31),
            remove_background: true,
            gain: Some((GainKind::Exponential, 1.5e7)),
            render: RenderMode::Percentile(2.0),
        }
    }
}

impl Preprocess {
    /// Every conditioning step except rendering.
    pub fn condition(&self, r: &Radargram) -> Result<Radargram> {
        let mut out = r.clone();
        if let Some(w) = self.dewow_window {
            out = dewow(&out, w)?;
        }
        if self.remove_background && out.n_traces >= 2 {
            out = remove_background(&out)?;
        }
        if let Some((kind, k)) = self.gain {
            out = apply_gain(&out, kind, k);
        }
        Ok(out)
    }
}

// --- GPRB -------------------------------------------------------------------

pub const GPRB_MAGIC: &[u8; 4] = b"GPRB";
pub const GPRB_VERSION: u16 = 1;
pub const GPRB_HEADER_LEN: usize = 38;

pub fn encode_gprb(r: &Radargram) -> Vec<u8> {
    let mut out = Vec::with_capacity(GPRB_HEADER_LEN + 4 * r.data.len());
    out.extend_from_slice(GPRB_MAGIC);
    out.extend_from_slice(&GPRB_VERSION.to_le_bytes());
    out.extend_from_slice(&(r.n_traces as u32).to_le_bytes());
    out.extend_from_slice(&(r.n_samples as u32).to_le_bytes());
    out.extend_from_slice(&r.dt.to_le_bytes());
    out.extend_from_slice(&r.dx_m.to_le_bytes());
    out.extend_from_slice(&r.time_zero.to_le_bytes());
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_gprb(bytes: &[u8]) -> Result<Radargram> {
    if bytes.len() < 4 {
        return Err(RadargramError::TruncatedFile {
            expected: GPRB_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != GPRB_MAGIC {
        return Err(RadargramError::BadMagic(magic));
    }
    if bytes.len() < GPRB_HEADER_LEN {
        return Err(RadargramError::TruncatedFile {
            expected: GPRB_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GPRB_VERSION {
        return Err(RadargramError::UnsupportedVersion(version));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let n_traces = u32_at(6);
    let n_samples = u32_at(10);
    let (dt, dx, t0) = (f64_at(14), f64_at(22), f64_at(30));
    let count = n_traces
        .checked_mul(n_samples)
        .ok_or_else(|| RadargramError::BadHeader("dimension overflow".into()))?;
    let expected = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(GPRB_HEADER_LEN))
        .ok_or_else(|| RadargramError::BadHeader("dimension overflow".into()))?;
    if bytes.len() < expected {
        return Err(RadargramError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RadargramError::TrailingData {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[GPRB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Radargram::new(n_traces, n_samples, data, dt, dx, t0)
        .map_err(|e| RadargramError::BadHeader(e.to_string()))
}

pub fn write_gprb(path: impl AsRef<Path>, r: &Radargram) -> Result<()> {
    fs::write(path, encode_gprb(r))?;
    Ok(())
}

pub fn read_gprb(path: impl AsRef<Path>) -> Result<Radargram> {
    decode_gprb(&fs::read(path)?)
}

// --- PGM (binary P5, maxval 255) --------------------------------------------

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 {
        return Err(RadargramError::TruncatedFile {
            expected: 2,
            found: bytes.len(),
        });
    }
    if &bytes[..2] != b"P5" {
        let mut magic = [0u8; 4];
        for (m, b) in magic.iter_mut().zip(bytes) {
            *m = *b;
        }
        return Err(RadargramError::BadMagic(magic));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(RadargramError::BadHeader("header ends early".into()));
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(RadargramError::BadHeader(format!(
                "expected a number at byte {start}"
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| RadargramError::BadHeader("header number out of range".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(RadargramError::BadHeader("missing separator after maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(RadargramError::UnsupportedMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(RadargramError::BadHeader(format!("empty image {w}x{h}")));
    }
    let count = (w as usize)
        .checked_mul(h as usize)
        .ok_or_else(|| RadargramError::BadHeader("dimension overflow".into()))?;
    let expected = pos + count;
    if bytes.len() < expected {
        return Err(RadargramError::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(RadargramError::TrailingData {
            expected,
            found: bytes.len(),
        });
    }
    GrayImage::new(w as usize, h as usize, bytes[pos..].to_vec())
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}
