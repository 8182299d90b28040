//! Hyperbola geometry, ground-truth boxes and annotated dataset generation.
//!
//! A dataset directory holds, per image index `i`, the rendered image
//! `{i}.pgm`, the conditioned radargram `{i}.gprb`, the labels `{i}.txt` and
//! the generating scene `{i}.scene`, plus `manifest.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fdtd::{run_bscan, source_delay, FdtdError, SolverConfig};
use crate::radargram::{
    add_noise, apply_lateral_gain, resample_time, to_image, write_gprb, write_pgm, GrayImage,
    NoiseModel, Preprocess, Radargram, RadargramError,
};
use crate::scene::{
    directives, expect_arity, parse_f64, parse_usize, serialize_scene, validate_scene, Material,
    ObjectSpec, Scan, Scene, SceneError, Shape, Waveform, WaveformKind, FREE_SPACE, HALFSPACE, PEC,
};
use crate::{derive_seed, parallel, C0};

pub const MANIFEST: &str = "manifest.txt";
/// Generator config echoed into every dataset directory.
pub const DATASET_CONFIG: &str = "config.txt";
pub const HYPERBOLA_CLASS: u32 = 0;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("object apex at {apex_time:e} s lies beyond the {window:e} s window")]
    ObjectNotImageable { apex_time: f64, window: f64 },
    #[error("object top at z = {z} m is not below the antenna depth")]
    ObjectAboveSurface { z: f64 },
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("image {index}: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: FdtdError,
    },
    #[error(transparent)]
    Radargram(#[from] RadargramError),
    #[error("{}: line {line}: malformed label line", file.display())]
    MalformedLabelLine { file: PathBuf, line: usize },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnnotateError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnnotateError + '_ {
    move |source| AnnotateError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// --- geometry ---------------------------------------------------------------

/// Propagation speed `c/√εr` in m/s.
pub fn wave_velocity(eps_r: f64) -> f64 {
    C0 / eps_r.sqrt()
}

/// Zero-offset two-way time to a point scatterer at depth `d` below `x0`.
pub fn hyperbola_travel_time(x: f64, x0: f64, d: f64, v: f64) -> f64 {
    2.0 * (d * d + (x - x0) * (x - x0)).sqrt() / v
}

/// Horizontal distance from the apex at which geometric spreading
/// `d / √(d² + Δx²)` drops to `tail_drop`.
pub fn tail_reach(d: f64, tail_drop: f64) -> f64 {
    d * (1.0 / (tail_drop * tail_drop) - 1.0).max(0.0).sqrt()
}

/// Axis-aligned pixel box, `[xmin, xmax) × [ymin, ymax)`. Columns are
/// traces, rows are time samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
    pub class_id: u32,
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
            class_id: HYPERBOLA_CLASS,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn is_valid(&self) -> bool {
        self.xmin < self.xmax && self.ymin < self.ymax
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
            ..*self
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let h = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn eps_at(s: &Scene, x: f64, z: f64, skip: Option<usize>) -> f64 {
    let hs = s.halfspace().map_or(1.0, |m| m.eps_r);
    match s.material_name_at(x, z, skip) {
        PEC => hs,
        name => s.material(name).map_or(hs, |m| m.eps_r),
    }
}

/// Velocity averaged in slowness along the vertical from the antenna to
/// depth `z`, ignoring object `skip`.
pub fn effective_velocity(s: &Scene, x: f64, z: f64, skip: Option<usize>) -> f64 {
    let z0 = s.source_depth;
    let n = (((z - z0) / (0.5 * s.dz)).ceil() as usize).max(8);
    let h = (z - z0) / n as f64;
    let slowness: f64 = (0..n)
        .map(|k| eps_at(s, x, z0 + (k as f64 + 0.5) * h, skip).sqrt() / C0)
        .sum::<f64>()
        / n as f64;
    1.0 / slowness
}

/// Reflector description used for box prediction: apex position, depth of
/// the curvature center below the antenna, standoff subtracted from both
/// path legs, and the half width of a flat top.
struct Reflector {
    x: f64,
    d: f64,
    standoff: f64,
    half_width: f64,
    v: f64,
}

impl Reflector {
    fn of(obj: &ObjectSpec, s: &Scene) -> Result<Self> {
        let skip = s.objects.iter().position(|o| o == obj);
        let z0 = s.source_depth;
        let (x, zc, standoff, half_width, ztop) = match obj.shape {
            Shape::Cylinder { xc, zc, r } => (xc, zc, r, 0.0, zc - r),
            Shape::Box { x1, z1, x2, .. } => (0.5 * (x1 + x2), z1, 0.0, 0.5 * (x2 - x1).abs(), z1),
        };
        if !(ztop > z0) {
            return Err(AnnotateError::ObjectAboveSurface { z: ztop });
        }
        Ok(Self {
            x,
            d: zc - z0,
            standoff,
            half_width,
            v: effective_velocity(s, x, ztop, skip),
        })
    }

    /// Two-way time for a transmitter at `tx` and receiver at `tx + off`.
    fn travel(&self, tx: f64, off: f64) -> f64 {
        let leg = |xa: f64| {
            let h = ((xa - self.x).abs() - self.half_width).max(0.0);
            (h * h + self.d * self.d).sqrt() - self.standoff
        };
        (leg(tx) + leg(tx + off)) / self.v
    }
}

/// Ground-truth box of one object in radargram pixel coordinates: from
/// half a wavelet period above the apex down to one period below the
/// arrival at the flanks, and sideways until spreading falls to
/// `tail_drop` of the apex amplitude.
pub fn object_bbox(obj: &ObjectSpec, s: &Scene, r: &Radargram, tail_drop: f64) -> Result<BBox> {
    let refl = Reflector::of(obj, s)?;
    let off = s.rx_offset;
    let period = 1.0 / s.waveform.center_freq;
    let spacing = s.scan.spacing().filter(|&d| d > 0.0).unwrap_or(r.dx_m);
    let last = r.n_traces() as f64 - 1.0;
    let col = ((refl.x - 0.5 * off - s.scan.x_start) / spacing).round().clamp(0.0, last);
    let tx_apex = s.scan.x_start + col * spacing;
    let t_apex = r.time_zero + refl.travel(tx_apex, off);
    if t_apex > r.time_window() {
        return Err(AnnotateError::ObjectNotImageable {
            apex_time: t_apex,
            window: r.time_window(),
        });
    }
    let reach = refl.half_width + tail_reach(refl.d, tail_drop);
    let hw = (reach / spacing).round();
    let t_edge = r.time_zero + refl.travel(refl.x + reach - 0.5 * off, off);
    let b = BBox::new(
        col - hw,
        ((t_apex - 0.5 * period) / r.dt).floor(),
        col + hw + 1.0,
        ((t_edge + period) / r.dt).ceil(),
    );
    Ok(b.clipped(r.n_traces() as f64, r.n_samples() as f64))
}

/// Pixel geometry of rendered radargrams: column `c` is the common-offset
/// midpoint `x_origin + c·dx_m`, row `r` is time `r·dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGeometry {
    pub dx_m: f64,
    pub x_origin: f64,
    pub dt: f64,
    pub time_zero: f64,
    pub center_freq: f64,
    pub width: usize,
    pub height: usize,
}

impl ImageGeometry {
    pub fn of_config(c: &GenConfig) -> Self {
        let x_start = c.scan_margin;
        let x_end = c.width - c.scan_margin - c.rx_offset;
        Self {
            dx_m: (x_end - x_start) / (c.traces - 1) as f64,
            x_origin: x_start + 0.5 * c.rx_offset,
            dt: c.time_window / c.rows as f64,
            time_zero: source_delay(c.frequency),
            center_freq: c.frequency,
            width: c.traces,
            height: c.rows,
        }
    }

    pub fn column(&self, x: f64) -> f64 {
        (x - self.x_origin) / self.dx_m
    }

    pub fn position(&self, col: f64) -> f64 {
        self.x_origin + col * self.dx_m
    }
}

/// Box of a zero-offset hyperbola with apex at midpoint `x0`, two-way apex
/// time `t0` (after the wavelet peak) and velocity `v`, using the same
/// extent rules as [`object_bbox`].
pub fn hyperbola_bbox(x0: f64, t0: f64, v: f64, g: &ImageGeometry, tail_drop: f64) -> BBox {
    let d = 0.5 * v * t0;
    let period = 1.0 / g.center_freq;
    let col = g.column(x0).round();
    let reach = tail_reach(d, tail_drop);
    let hw = (reach / g.dx_m).round();
    let t_edge = hyperbola_travel_time(x0 + reach, x0, d, v);
    BBox::new(
        col - hw,
        ((g.time_zero + t0 - 0.5 * period) / g.dt).floor(),
        col + hw + 1.0,
        ((g.time_zero + t_edge + period) / g.dt).ceil(),
    )
    .clipped(g.width as f64, g.height as f64)
}

// --- label files ------------------------------------------------------------

/// One line per box: `class_id xmin ymin xmax ymax [score]`.
pub fn format_labels(boxes: &[BBox]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = write!(out, "{} {} {} {} {}", b.class_id, b.xmin, b.ymin, b.xmax, b.ymax);
        if let Some(s) = b.score {
            let _ = write!(out, " {s}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_labels(text: &str, file: &Path) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let bad = || AnnotateError::MalformedLabelLine {
            file: file.to_path_buf(),
            line: line_no,
        };
        let tok: Vec<&str> = t.split_whitespace().collect();
        if tok.len() != 5 && tok.len() != 6 {
            return Err(bad());
        }
        let class_id = tok[0].parse::<u32>().map_err(|_| bad())?;
        let mut v = [0.0; 4];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = tok[k + 1].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad)?;
        }
        let score = match tok.get(5) {
            Some(s) => Some(s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad)?),
            None => None,
        };
        out.push(BBox {
            xmin: v[0],
            ymin: v[1],
            xmax: v[2],
            ymax: v[3],
            class_id,
            score,
        });
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_labels(boxes)).map_err(io_err(path))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text, path)
}

/// Sorted image indices `i` for which `{i}.{ext}` exists in `dir`.
pub fn indices_with(dir: &Path, ext: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(i) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse().ok()) {
            out.push(i);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// One labeled image of a dataset directory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub image: GrayImage,
    pub boxes: Vec<BBox>,
}

/// Loads every `{i}.pgm` with its `{i}.txt`, in index order, optionally
/// restricted to indices in `range`.
pub fn load_samples(dir: &Path, range: Option<std::ops::Range<usize>>) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for i in indices_with(dir, "pgm")? {
        if range.as_ref().is_some_and(|r| !r.contains(&i)) {
            continue;
        }
        let image = crate::radargram::read_pgm(dir.join(format!("{i}.pgm")))?;
        let boxes = read_labels(dir.join(format!("{i}.txt")))?;
        out.push(Sample {
            index: i,
            image,
            boxes,
        });
    }
    Ok(out)
}

// --- generator config -------------------------------------------------------

/// Closed interval sampled uniformly; `lo == hi` is a fixed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    fn valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Simulated,
    PseudoReal,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "simulated" => Some(Self::Simulated),
            "pseudo-real" => Some(Self::PseudoReal),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulated => "simulated",
            Self::PseudoReal => "pseudo-real",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub width: f64,
    pub depth: f64,
    pub cell: f64,
    pub time_window: f64,
    pub frequency: f64,
    pub traces: usize,
    /// Distance kept between the domain edges and the scan line ends.
    pub scan_margin: f64,
    pub rx_offset: f64,
    pub eps_r: Span,
    pub sigma: Span,
    pub objects: (usize, usize),
    /// Depth of object centers below the surface.
    pub object_depth: Span,
    pub radius: Span,
    /// Fraction of objects that are metallic; the rest are dielectric.
    pub pec_fraction: f64,
    pub object_eps: Span,
    /// Minimum horizontal distance between object centers.
    pub separation: f64,
    /// Noise std as a fraction of the 99th-percentile amplitude.
    pub noise: Span,
    /// Dipping layer interfaces (clutter); `(0, 0)` disables them.
    pub layers: (usize, usize),
    pub layer_eps: Span,
    /// Interface slope dz/dx.
    pub dip: Span,
    /// Gain ratio between the right and left scan edges.
    pub lateral_gain: Span,
    pub rows: usize,
    pub tail_drop: f64,
}

impl GenConfig {
    pub fn preset(p: Preset) -> Self {
        let sim = Self {
            count: 50,
            seed: 1,
            width: 3.6,
            depth: 1.6,
            cell: 0.025,
            time_window: 1e-7,
            frequency: 3e8,
            traces: 65,
            scan_margin: 0.15,
            rx_offset: 0.1,
            eps_r: Span::new(4.0, 9.0),
            sigma: Span::new(0.0, 0.005),
            objects: (1, 3),
            object_depth: Span::new(0.25, 0.6),
            radius: Span::new(0.03, 0.12),
            pec_fraction: 0.7,
            object_eps: Span::new(1.0, 1.0),
            separation: 1.0,
            noise: Span::new(0.02, 0.05),
            layers: (0, 0),
            layer_eps: Span::new(4.0, 12.0),
            dip: Span::new(-0.15, 0.15),
            lateral_gain: Span::fixed(1.0),
            rows: 200,
            tail_drop: 0.5,
        };
        match p {
            Preset::Simulated => sim,
            Preset::PseudoReal => Self {
                count: 100,
                seed: 2,
                sigma: Span::new(0.005, 0.02),
                noise: Span::new(0.06, 0.15),
                layers: (2, 4),
                pec_fraction: 0.5,
                object_eps: Span::new(1.0, 14.0),
                lateral_gain: Span::new(0.4, 2.5),
                ..sim
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnnotateError::InvalidConfig(m.to_string()));
        let spans = [
            ("eps_r", self.eps_r),
            ("sigma", self.sigma),
            ("depth", self.object_depth),
            ("radius", self.radius),
            ("object_eps", self.object_eps),
            ("noise", self.noise),
            ("layer_eps", self.layer_eps),
            ("dip", self.dip),
            ("lateral_gain", self.lateral_gain),
        ];
        for (name, s) in spans {
            if !s.valid() {
                return bad(&format!("{name} range is empty or not finite"));
            }
        }
        if self.eps_r.lo < 1.0 || self.object_eps.lo < 1.0 || self.layer_eps.lo < 1.0 {
            return bad("relative permittivity below 1");
        }
        if self.sigma.lo < 0.0 || self.noise.lo < 0.0 || self.radius.lo <= 0.0 {
            return bad("negative conductivity, noise, or non-positive radius");
        }
        if self.lateral_gain.lo <= 0.0 {
            return bad("lateral gain must be positive");
        }
        if self.objects.0 > self.objects.1 || self.layers.0 > self.layers.1 {
            return bad("count range is empty");
        }
        if !(self.width > 0.0 && self.depth > 0.0 && self.cell > 0.0) {
            return bad("domain and cell must be positive");
        }
        if !(self.time_window > 0.0 && self.frequency > 0.0) {
            return bad("time window and frequency must be positive");
        }
        if self.traces < 2 || self.rows < 2 {
            return bad("need at least 2 traces and 2 rows");
        }
        if !(0.0..=1.0).contains(&self.pec_fraction) {
            return bad("pec_fraction outside [0, 1]");
        }
        if !(self.tail_drop > 0.0 && self.tail_drop < 1.0) {
            return bad("tail_drop outside (0, 1)");
        }
        if self.scan_margin < 0.0 || self.width - 2.0 * self.scan_margin - self.rx_offset <= 0.0 {
            return bad("scan line does not fit in the domain");
        }
        if self.object_depth.hi + self.radius.hi >= self.depth || self.object_depth.lo - self.radius.hi <= 0.0 {
            return bad("objects must fit strictly inside the ground");
        }
        Ok(())
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::preset(Preset::Simulated)
    }
}

/// Parses a generator config in the scene-file grammar. An optional
/// `#preset:` line selects the base values; every other key overrides one
/// field.
pub fn parse_gen_config(text: &str) -> Result<GenConfig> {
    let ds = directives(text)?;
    let mut cfg = GenConfig::default();
    if let Some(d) = ds.iter().find(|d| d.name == "preset") {
        expect_arity(d, 1)?;
        cfg = Preset::parse(d.args[0]).map(GenConfig::preset).ok_or(AnnotateError::Config {
            line: d.line,
            message: format!("unknown preset {:?}", d.args[0]),
        })?;
    }
    let mut seen = std::collections::HashSet::new();
    for d in &ds {
        if !seen.insert(d.name) {
            return Err(SceneError::DuplicateDirective {
                line: d.line,
                directive: d.name.to_string(),
            }
            .into());
        }
        let span = |d: &crate::scene::Directive<'_>| -> Result<Span> {
            expect_arity(d, 2)?;
            Ok(Span::new(parse_f64(d.line, d.args[0])?, parse_f64(d.line, d.args[1])?))
        };
        let one = |d: &crate::scene::Directive<'_>| -> Result<f64> {
            expect_arity(d, 1)?;
            Ok(parse_f64(d.line, d.args[0])?)
        };
        let count = |d: &crate::scene::Directive<'_>| -> Result<usize> {
            expect_arity(d, 1)?;
            Ok(parse_usize(d.line, d.args[0])?)
        };
        let counts = |d: &crate::scene::Directive<'_>| -> Result<(usize, usize)> {
            expect_arity(d, 2)?;
            Ok((parse_usize(d.line, d.args[0])?, parse_usize(d.line, d.args[1])?))
        };
        match d.name {
            "preset" => {}
            "count" => cfg.count = count(d)?,
            "seed" => {
                expect_arity(d, 1)?;
                cfg.seed = d.args[0].parse().map_err(|_| SceneError::BadNumber {
                    line: d.line,
                    token: d.args[0].to_string(),
                })?;
            }
            "domain" => {
                let s = span(d)?;
                (cfg.width, cfg.depth) = (s.lo, s.hi);
            }
            "cell" => cfg.cell = one(d)?,
            "time_window" => cfg.time_window = one(d)?,
            "frequency" => cfg.frequency = one(d)?,
            "traces" => cfg.traces = count(d)?,
            "scan_margin" => cfg.scan_margin = one(d)?,
            "rx_offset" => cfg.rx_offset = one(d)?,
            "eps_r" => cfg.eps_r = span(d)?,
            "sigma" => cfg.sigma = span(d)?,
            "objects" => cfg.objects = counts(d)?,
            "depth" => cfg.object_depth = span(d)?,
            "radius" => cfg.radius = span(d)?,
            "pec_fraction" => cfg.pec_fraction = one(d)?,
            "object_eps" => cfg.object_eps = span(d)?,
            "separation" => cfg.separation = one(d)?,
            "noise" => cfg.noise = span(d)?,
            "layers" => cfg.layers = counts(d)?,
            "layer_eps" => cfg.layer_eps = span(d)?,
            "dip" => cfg.dip = span(d)?,
            "lateral_gain" => cfg.lateral_gain = span(d)?,
            "rows" => cfg.rows = count(d)?,
            "tail_drop" => cfg.tail_drop = one(d)?,
            other => {
                return Err(SceneError::UnknownDirective {
                    line: d.line,
                    name: other.to_string(),
                }
                .into())
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_gen_config(c: &GenConfig) -> String {
    let sp = |s: Span| format!("{} {}", s.lo, s.hi);
    let mut o = String::new();
    let _ = writeln!(o, "#count: {}", c.count);
    let _ = writeln!(o, "#seed: {}", c.seed);
    let _ = writeln!(o, "#domain: {} {}", c.width, c.depth);
    let _ = writeln!(o, "#cell: {}", c.cell);
    let _ = writeln!(o, "#time_window: {}", c.time_window);
    let _ = writeln!(o, "#frequency: {}", c.frequency);
    let _ = writeln!(o, "#traces: {}", c.traces);
    let _ = writeln!(o, "#scan_margin: {}", c.scan_margin);
    let _ = writeln!(o, "#rx_offset: {}", c.rx_offset);
    let _ = writeln!(o, "#eps_r: {}", sp(c.eps_r));
    let _ = writeln!(o, "#sigma: {}", sp(c.sigma));
    let _ = writeln!(o, "#objects: {} {}", c.objects.0, c.objects.1);
    let _ = writeln!(o, "#depth: {}", sp(c.object_depth));
    let _ = writeln!(o, "#radius: {}", sp(c.radius));
    let _ = writeln!(o, "#pec_fraction: {}", c.pec_fraction);
    let _ = writeln!(o, "#object_eps: {}", sp(c.object_eps));
    let _ = writeln!(o, "#separation: {}", c.separation);
    let _ = writeln!(o, "#noise: {}", sp(c.noise));
    let _ = writeln!(o, "#layers: {} {}", c.layers.0, c.layers.1);
    let _ = writeln!(o, "#layer_eps: {}", sp(c.layer_eps));
    let _ = writeln!(o, "#dip: {}", sp(c.dip));
    let _ = writeln!(o, "#lateral_gain: {}", sp(c.lateral_gain));
    let _ = writeln!(o, "#rows: {}", c.rows);
    let _ = writeln!(o, "#tail_drop: {}", c.tail_drop);
    o
}

/// The config a dataset directory was generated from.
pub fn read_dataset_config(dir: &Path) -> Result<GenConfig> {
    let p = dir.join(DATASET_CONFIG);
    parse_gen_config(&fs::read_to_string(&p).map_err(io_err(&p))?)
}

// --- generation -------------------------------------------------------------

/// Everything produced for one dataset index.
#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub index: usize,
    pub seed: u64,
    pub scene: Scene,
    pub radargram: Radargram,
    pub image: GrayImage,
    pub labels: Vec<BBox>,
}

/// Width of the vertical strips approximating a dipping interface.
const LAYER_STEP_CELLS: f64 = 4.0;

/// Draws the survey scene of one image.
pub fn draw_scene(cfg: &GenConfig, rng: &mut impl Rng) -> Scene {
    let mut materials = vec![Material::new(HALFSPACE, cfg.eps_r.sample(rng), cfg.sigma.sample(rng))];
    let mut objects = Vec::new();

    let n_layers = rng.random_range(cfg.layers.0..=cfg.layers.1);
    if n_layers > 0 {
        // interfaces spread over the ground below the shallowest object tops
        let mut tops: Vec<f64> = (0..n_layers)
            .map(|_| rng.random_range(0.15 * cfg.depth..0.95 * cfg.depth))
            .collect();
        tops.sort_by(f64::total_cmp);
        let step = LAYER_STEP_CELLS * cfg.cell;
        let n_strips = (cfg.width / step).ceil() as usize;
        for (k, z_mid) in tops.into_iter().enumerate() {
            let name = format!("layer{k}");
            materials.push(Material::new(&name, cfg.layer_eps.sample(rng), cfg.sigma.sample(rng)));
            let slope = cfg.dip.sample(rng);
            for s in 0..n_strips {
                let x1 = s as f64 * step;
                let x2 = (x1 + step).min(cfg.width);
                let z = (z_mid + slope * (0.5 * (x1 + x2) - 0.5 * cfg.width)).clamp(0.05, cfg.depth);
                if z < cfg.depth {
                    objects.push(ObjectSpec {
                        material: name.clone(),
                        shape: Shape::Box { x1, z1: z, x2, z2: cfg.depth },
                    });
                }
            }
        }
    }

    let x_start = cfg.scan_margin;
    let x_end = cfg.width - cfg.scan_margin - cfg.rx_offset;
    // apexes stay a little inside the scanned midpoints
    let lo = x_start + 0.5 * cfg.rx_offset + 0.1 * (x_end - x_start);
    let hi = x_start + 0.5 * cfg.rx_offset + 0.9 * (x_end - x_start);
    let n_obj = rng.random_range(cfg.objects.0..=cfg.objects.1);
    let mut xs: Vec<f64> = Vec::new();
    for _ in 0..n_obj {
        let mut placed = None;
        for _ in 0..200 {
            let x = rng.random_range(lo..=hi);
            if xs.iter().all(|&o| (o - x).abs() >= cfg.separation) {
                placed = Some(x);
                break;
            }
        }
        let Some(x) = placed else { break };
        xs.push(x);
        let zc = cfg.object_depth.sample(rng);
        let r = cfg.radius.sample(rng).max(cfg.cell);
        let material = if rng.random_bool(cfg.pec_fraction) {
            PEC.to_string()
        } else {
            let eps = cfg.object_eps.sample(rng);
            if eps == 1.0 {
                FREE_SPACE.to_string()
            } else {
                let name = format!("target{}", xs.len() - 1);
                materials.push(Material::new(&name, eps, 0.0));
                name
            }
        };
        objects.push(ObjectSpec {
            material,
            shape: Shape::Cylinder { xc: x, zc, r },
        });
    }

    Scene {
        width: cfg.width,
        depth: cfg.depth,
        dx: cfg.cell,
        dz: cfg.cell,
        time_window: cfg.time_window,
        materials,
        objects,
        waveform: Waveform {
            kind: WaveformKind::Ricker,
            amplitude: 1.0,
            center_freq: cfg.frequency,
        },
        source_depth: 0.0,
        rx_offset: cfg.rx_offset,
        scan: Scan {
            x_start,
            x_end,
            n_traces: cfg.traces,
        },
    }
}

/// Target objects of a generated scene (layer strips are clutter).
pub fn targets(s: &Scene) -> impl Iterator<Item = &ObjectSpec> {
    s.objects.iter().filter(|o| matches!(o.shape, Shape::Cylinder { .. }))
}

/// Noise model whose std grows linearly with depth from 0.5 to 1.5 times
/// `level` times the 99th-percentile absolute amplitude.
pub fn depth_noise_model(r: &Radargram, level: f64) -> NoiseModel {
    let mut mags: Vec<f32> = r.data().iter().map(|v| v.abs()).collect();
    let k = ((mags.len() as f64 * 0.99) as usize).min(mags.len() - 1);
    let (_, scale, _) = mags.select_nth_unstable_by(k, f32::total_cmp);
    let base = level * *scale as f64;
    let n = r.n_samples();
    NoiseModel::new(
        (0..n)
            .map(|t| base * (0.5 + t as f64 / (n - 1).max(1) as f64))
            .collect(),
    )
}

/// Simulates, conditions and annotates dataset image `index`.
pub fn generate_image(cfg: &GenConfig, index: usize, solver: &SolverConfig) -> Result<GeneratedImage> {
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = draw_scene(cfg, &mut rng);
    let diags = validate_scene(&scene);
    if let Some(d) = diags.first() {
        return Err(AnnotateError::InvalidConfig(format!("drawn scene is invalid: {d}")));
    }
    let raw = run_bscan(&scene, solver).map_err(|source| AnnotateError::Simulation { index, source })?;
    let mut r = Preprocess::default().condition(&resample_time(&raw, cfg.rows)?)?;
    let gain = cfg.lateral_gain.sample(&mut rng);
    if gain != 1.0 {
        let mirrored = rng.random_bool(0.5);
        let (l, rr) = if mirrored { (gain, 1.0) } else { (1.0, gain) };
        r = apply_lateral_gain(&r, l, rr);
    }
    let level = cfg.noise.sample(&mut rng);
    let noise_seed = rng.random::<u64>();
    r = add_noise(&r, &depth_noise_model(&r, level), noise_seed)?;
    let image = to_image(&r, Preprocess::default().render);
    let mut labels = Vec::new();
    for obj in targets(&scene) {
        labels.push(object_bbox(obj, &scene, &r, cfg.tail_drop)?);
    }
    debug_assert!(source_delay(cfg.frequency) == r.time_zero);
    Ok(GeneratedImage {
        index,
        seed,
        scene,
        radargram: r,
        image,
        labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut o = format!("seed {}\n", self.seed);
        for e in &self.entries {
            let _ = writeln!(o, "{} {} {}", e.index, e.seed, e.files.join(" "));
        }
        o
    }
}

pub fn write_image_files(dir: &Path, g: &GeneratedImage) -> Result<Vec<String>> {
    let i = g.index;
    let files = vec![
        format!("{i}.pgm"),
        format!("{i}.gprb"),
        format!("{i}.txt"),
        format!("{i}.scene"),
    ];
    write_pgm(dir.join(&files[0]), &g.image)?;
    write_gprb(dir.join(&files[1]), &g.radargram)?;
    write_labels(dir.join(&files[2]), &g.labels)?;
    let p = dir.join(&files[3]);
    fs::write(&p, serialize_scene(&g.scene)).map_err(io_err(&p))?;
    Ok(files)
}

/// Generates images `0..cfg.count` into `dir` (created if missing) and
/// writes the manifest last.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path, solver: &SolverConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(DATASET_CONFIG);
    fs::write(&p, serialize_gen_config(cfg)).map_err(io_err(&p))?;
    let results: Vec<Result<ManifestEntry>> = parallel::pool().install(|| {
        (0..cfg.count)
            .into_par_iter()
            .map(|i| {
                let g = generate_image(cfg, i, solver)?;
                let files = write_image_files(dir, &g)?;
                Ok(ManifestEntry {
                    index: i,
                    seed: g.seed,
                    files,
                })
            })
            .collect()
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        seed: cfg.seed,
        entries,
    };
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest.to_text()).map_err(io_err(&p))?;
    Ok(manifest)
}
