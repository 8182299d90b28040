//! Survey scene files.
//!
//! A scene is a line-oriented text file of `#name: args…` directives:
//!
//! ```text
//! // 2 m x 2 m survey over a wet sand half-space
//! #domain: 2.0 2.0
//! #cell: 0.01 0.01
//! #time_window: 1e-7
//! #material: halfspace 6.0 0.001
//! #waveform: ricker 1.0 3e8
//! #source: 0.0
//! #rx_offset: 0.1
//! #scan: 0.2 1.8 40
//! #cylinder: pec 1.0 0.5 0.05
//! ```
//!
//! Coordinates are metres; `x` runs along the surface and `z` is depth below
//! the surface. The names `free_space` and `pec` are built in, and exactly one
//! user material must be called `halfspace`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

pub const HALFSPACE: &str = "halfspace";
pub const FREE_SPACE: &str = "free_space";
pub const PEC: &str = "pec";

#[derive(Debug, Clone, PartialEq)]
pub struct Material {
    pub name: String,
    pub eps_r: f64,
    pub sigma: f64,
}

impl Material {
    pub fn new(name: impl Into<String>, eps_r: f64, sigma: f64) -> Self {
        Self {
            name: name.into(),
            eps_r,
            sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box { x1: f64, z1: f64, x2: f64, z2: f64 },
    Cylinder { xc: f64, zc: f64, r: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        match *self {
            Shape::Box { x1, z1, x2, z2 } => x >= x1 && x <= x2 && z >= z1 && z <= z2,
            Shape::Cylinder { xc, zc, r } => {
                let (dx, dz) = (x - xc, z - zc);
                dx * dx + dz * dz <= r * r
            }
        }
    }

    /// Axis-aligned extent `(xmin, zmin, xmax, zmax)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Box { x1, z1, x2, z2 } => (x1, z1, x2, z2),
            Shape::Cylinder { xc, zc, r } => (xc - r, zc - r, xc + r, zc + r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub material: String,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaveformKind {
    Ricker,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waveform {
    pub kind: WaveformKind,
    pub amplitude: f64,
    pub center_freq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scan {
    pub x_start: f64,
    pub x_end: f64,
    pub n_traces: usize,
}

impl Scan {
    /// Spacing between transmitter positions. A single-trace scan has no
    /// spacing and reports `None`.
    pub fn spacing(&self) -> Option<f64> {
        if self.n_traces < 2 {
            None
        } else {
            Some((self.x_end - self.x_start) / (self.n_traces - 1) as f64)
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        match self.spacing() {
            None => vec![self.x_start; self.n_traces.min(1)],
            Some(step) => (0..self.n_traces)
                .map(|i| self.x_start + step * i as f64)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: f64,
    pub depth: f64,
    pub dx: f64,
    pub dz: f64,
    pub time_window: f64,
    /// User materials in declaration order; built-ins are implicit.
    pub materials: Vec<Material>,
    /// Objects in declaration order; later objects win where they overlap.
    pub objects: Vec<ObjectSpec>,
    pub waveform: Waveform,
    pub source_depth: f64,
    pub rx_offset: f64,
    pub scan: Scan,
}

impl Scene {
    /// Looks up a material by name, including the built-in `free_space`.
    /// `pec` has no finite parameters and resolves to `None`.
    pub fn material(&self, name: &str) -> Option<Material> {
        if name == FREE_SPACE {
            return Some(Material::new(FREE_SPACE, 1.0, 0.0));
        }
        self.materials.iter().find(|m| m.name == name).cloned()
    }

    pub fn halfspace(&self) -> Option<&Material> {
        self.materials.iter().find(|m| m.name == HALFSPACE)
    }

    /// Name of the material occupying `(x, z)`; `z < 0` is free space.
    /// `skip` excludes one object index from the lookup.
    pub fn material_name_at(&self, x: f64, z: f64, skip: Option<usize>) -> &str {
        if z < 0.0 {
            return FREE_SPACE;
        }
        self.objects
            .iter()
            .enumerate()
            .rev()
            .find(|(i, o)| Some(*i) != skip && o.shape.contains(x, z))
            .map(|(_, o)| o.material.as_str())
            .unwrap_or(HALFSPACE)
    }

    pub fn is_known_material(&self, name: &str) -> bool {
        name == FREE_SPACE || name == PEC || self.materials.iter().any(|m| m.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiagnosticCode {
    OutOfRangeValue,
    ObjectOutsideDomain,
    ScanOutsideDomain,
    DanglingMaterialRef,
    DuplicateMaterial,
    ReservedMaterialName,
    MissingHalfspace,
}

/// What a diagnostic refers to, so the parser can attach a line number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    Domain,
    Cell,
    TimeWindow,
    Material(usize),
    Object(usize),
    Waveform,
    Source,
    RxOffset,
    Scan,
    Scene,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub code: DiagnosticCode,
    pub subject: Subject,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}({}): {}", self.code, self.field, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("line {line}: input is not valid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("line {line}: unknown directive `{name}`")]
    UnknownDirective { line: usize, name: String },
    #[error("line {line}: missing required directive `{name}`")]
    MissingRequiredDirective { line: usize, name: String },
    #[error("line {line}: `{directive}` expects {expected} argument(s), found {found}")]
    BadArity {
        line: usize,
        directive: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse `{token}` as a number")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: `{directive}` given more than once")]
    DuplicateDirective { line: usize, directive: String },
    #[error("line {line}: value out of range for {field}: {message}")]
    OutOfRangeValue {
        line: usize,
        field: String,
        message: String,
    },
    #[error("line {line}: object lies outside the domain: {message}")]
    ObjectOutsideDomain { line: usize, message: String },
    #[error("line {line}: reference to undefined material `{name}`")]
    DanglingMaterialRef { line: usize, name: String },
}

impl SceneError {
    pub fn line(&self) -> usize {
        match self {
            SceneError::InvalidUtf8 { line }
            | SceneError::UnknownDirective { line, .. }
            | SceneError::MissingRequiredDirective { line, .. }
            | SceneError::BadArity { line, .. }
            | SceneError::BadNumber { line, .. }
            | SceneError::DuplicateDirective { line, .. }
            | SceneError::OutOfRangeValue { line, .. }
            | SceneError::ObjectOutsideDomain { line, .. }
            | SceneError::DanglingMaterialRef { line, .. } => *line,
        }
    }
}

/// One `#name: args` line after comment stripping.
#[derive(Debug, Clone)]
pub struct Directive<'a> {
    pub line: usize,
    pub name: &'a str,
    pub args: Vec<&'a str>,
}

/// Splits text into directives. Shared with the dataset generator config,
/// which uses the same grammar.
pub fn directives(text: &str) -> Result<Vec<Directive<'_>>, SceneError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_end_matches('\r').trim();
        if trimmed.is_empty() || trimmed.starts_with("//") {
            continue;
        }
        let body = match trimmed.strip_prefix('#') {
            Some(b) => b,
            None => {
                return Err(SceneError::UnknownDirective {
                    line,
                    name: trimmed.split_whitespace().next().unwrap_or("").to_string(),
                })
            }
        };
        let (name, rest) = match body.split_once(':') {
            Some((n, r)) => (n.trim(), r),
            None => {
                return Err(SceneError::UnknownDirective {
                    line,
                    name: body.trim().to_string(),
                })
            }
        };
        let rest = rest.split("//").next().unwrap_or("");
        out.push(Directive {
            line,
            name,
            args: rest.split_whitespace().collect(),
        });
    }
    Ok(out)
}

pub fn parse_f64(line: usize, token: &str) -> Result<f64, SceneError> {
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(SceneError::BadNumber {
            line,
            token: token.to_string(),
        }),
    }
}

pub fn parse_usize(line: usize, token: &str) -> Result<usize, SceneError> {
    token.parse::<usize>().map_err(|_| SceneError::BadNumber {
        line,
        token: token.to_string(),
    })
}

pub fn expect_arity(d: &Directive<'_>, n: usize) -> Result<(), SceneError> {
    if d.args.len() != n {
        return Err(SceneError::BadArity {
            line: d.line,
            directive: d.name.to_string(),
            expected: n,
            found: d.args.len(),
        });
    }
    Ok(())
}

fn floats<const N: usize>(d: &Directive<'_>, from: usize) -> Result<[f64; N], SceneError> {
    let mut out = [0.0; N];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = parse_f64(d.line, d.args[from + k])?;
    }
    Ok(out)
}

/// Parses raw bytes, rejecting invalid UTF-8 with the line it occurs on.
pub fn parse_scene_bytes(bytes: &[u8]) -> Result<Scene, SceneError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_scene(text),
        Err(e) => {
            let line = bytes[..e.valid_up_to()]
                .iter()
                .filter(|&&b| b == b'\n')
                .count()
                + 1;
            Err(SceneError::InvalidUtf8 { line })
        }
    }
}

pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let dirs = directives(text)?;
    let last_line = text.lines().count().max(1);

    let mut singles: HashMap<&str, Directive<'_>> = HashMap::new();
    let mut materials: Vec<(usize, Material)> = Vec::new();
    let mut objects: Vec<(usize, ObjectSpec)> = Vec::new();

    for d in dirs {
        match d.name {
            "domain" | "cell" | "time_window" | "waveform" | "source" | "rx_offset" | "scan" => {
                let arity = match d.name {
                    "domain" | "cell" => 2,
                    "waveform" | "scan" => 3,
                    _ => 1,
                };
                expect_arity(&d, arity)?;
                if singles.contains_key(d.name) {
                    return Err(SceneError::DuplicateDirective {
                        line: d.line,
                        directive: d.name.to_string(),
                    });
                }
                singles.insert(d.name, d);
            }
            "material" => {
                expect_arity(&d, 3)?;
                let [eps_r, sigma] = floats::<2>(&d, 1)?;
                materials.push((d.line, Material::new(d.args[0], eps_r, sigma)));
            }
            "box" => {
                expect_arity(&d, 5)?;
                let [x1, z1, x2, z2] = floats::<4>(&d, 1)?;
                objects.push((
                    d.line,
                    ObjectSpec {
                        material: d.args[0].to_string(),
                        shape: Shape::Box { x1, z1, x2, z2 },
                    },
                ));
            }
            "cylinder" => {
                expect_arity(&d, 4)?;
                let [xc, zc, r] = floats::<3>(&d, 1)?;
                objects.push((
                    d.line,
                    ObjectSpec {
                        material: d.args[0].to_string(),
                        shape: Shape::Cylinder { xc, zc, r },
                    },
                ));
            }
            other => {
                return Err(SceneError::UnknownDirective {
                    line: d.line,
                    name: other.to_string(),
                })
            }
        }
    }

    let required = |name: &str| {
        singles
            .get(name)
            .ok_or_else(|| SceneError::MissingRequiredDirective {
                line: last_line,
                name: name.to_string(),
            })
    };
    let domain = required("domain")?;
    let [width, depth] = floats::<2>(domain, 0)?;
    let cell = required("cell")?;
    let [dx, dz] = floats::<2>(cell, 0)?;
    let tw = required("time_window")?;
    let [time_window] = floats::<1>(tw, 0)?;
    let wf = required("waveform")?;
    if wf.args[0] != "ricker" {
        return Err(SceneError::OutOfRangeValue {
            line: wf.line,
            field: "waveform".into(),
            message: format!("unsupported waveform type `{}`", wf.args[0]),
        });
    }
    let [amplitude, center_freq] = floats::<2>(wf, 1)?;
    let src = required("source")?;
    let [source_depth] = floats::<1>(src, 0)?;
    let rx = required("rx_offset")?;
    let [rx_offset] = floats::<1>(rx, 0)?;
    let sc = required("scan")?;
    let [x_start, x_end] = floats::<2>(sc, 0)?;
    let n_traces = parse_usize(sc.line, sc.args[2])?;

    if !materials.iter().any(|(_, m)| m.name == HALFSPACE) {
        return Err(SceneError::MissingRequiredDirective {
            line: last_line,
            name: "material halfspace".into(),
        });
    }

    let scene = Scene {
        width,
        depth,
        dx,
        dz,
        time_window,
        materials: materials.iter().map(|(_, m)| m.clone()).collect(),
        objects: objects.iter().map(|(_, o)| o.clone()).collect(),
        waveform: Waveform {
            kind: WaveformKind::Ricker,
            amplitude,
            center_freq,
        },
        source_depth,
        rx_offset,
        scan: Scan {
            x_start,
            x_end,
            n_traces,
        },
    };

    if let Some(diag) = validate_scene(&scene).into_iter().next() {
        let line = match diag.subject {
            Subject::Domain => singles["domain"].line,
            Subject::Cell => singles["cell"].line,
            Subject::TimeWindow => singles["time_window"].line,
            Subject::Waveform => singles["waveform"].line,
            Subject::Source => singles["source"].line,
            Subject::RxOffset => singles["rx_offset"].line,
            Subject::Scan => singles["scan"].line,
            Subject::Material(i) => materials[i].0,
            Subject::Object(i) => objects[i].0,
            Subject::Scene => last_line,
        };
        return Err(match diag.code {
            DiagnosticCode::ObjectOutsideDomain => SceneError::ObjectOutsideDomain {
                line,
                message: diag.message,
            },
            DiagnosticCode::DanglingMaterialRef => SceneError::DanglingMaterialRef {
                line,
                name: diag.field,
            },
            DiagnosticCode::MissingHalfspace => SceneError::MissingRequiredDirective {
                line,
                name: "material halfspace".into(),
            },
            _ => SceneError::OutOfRangeValue {
                line,
                field: diag.field,
                message: diag.message,
            },
        });
    }
    Ok(scene)
}

fn diag(
    out: &mut Vec<Diagnostic>,
    code: DiagnosticCode,
    subject: Subject,
    field: &str,
    message: String,
) {
    out.push(Diagnostic {
        code,
        subject,
        field: field.to_string(),
        message,
    });
}

/// Checks every scene invariant, returning one diagnostic per violation.
pub fn validate_scene(s: &Scene) -> Vec<Diagnostic> {
    use DiagnosticCode::*;
    let mut out = Vec::new();
    let positive = |v: f64| v.is_finite() && v > 0.0;

    if !positive(s.width) {
        diag(&mut out, OutOfRangeValue, Subject::Domain, "width", format!("{} must be > 0", s.width));
    }
    if !positive(s.depth) {
        diag(&mut out, OutOfRangeValue, Subject::Domain, "depth", format!("{} must be > 0", s.depth));
    }
    if !positive(s.dx) {
        diag(&mut out, OutOfRangeValue, Subject::Cell, "dx", format!("{} must be > 0", s.dx));
    }
    if !positive(s.dz) {
        diag(&mut out, OutOfRangeValue, Subject::Cell, "dz", format!("{} must be > 0", s.dz));
    }
    if !positive(s.time_window) {
        diag(
            &mut out,
            OutOfRangeValue,
            Subject::TimeWindow,
            "time_window",
            format!("{} must be > 0", s.time_window),
        );
    }

    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, m) in s.materials.iter().enumerate() {
        if m.name == FREE_SPACE || m.name == PEC {
            diag(
                &mut out,
                ReservedMaterialName,
                Subject::Material(i),
                "name",
                format!("`{}` is a built-in material", m.name),
            );
        }
        if seen.insert(m.name.as_str(), i).is_some() {
            diag(
                &mut out,
                DuplicateMaterial,
                Subject::Material(i),
                "name",
                format!("material `{}` defined twice", m.name),
            );
        }
        if !(m.eps_r.is_finite() && m.eps_r >= 1.0) {
            diag(
                &mut out,
                OutOfRangeValue,
                Subject::Material(i),
                "eps_r",
                format!("{} must be >= 1", m.eps_r),
            );
        }
        if !(m.sigma.is_finite() && m.sigma >= 0.0) {
            diag(
                &mut out,
                OutOfRangeValue,
                Subject::Material(i),
                "sigma",
                format!("{} must be >= 0", m.sigma),
            );
        }
    }
    if !s.materials.iter().any(|m| m.name == HALFSPACE) {
        diag(
            &mut out,
            MissingHalfspace,
            Subject::Scene,
            HALFSPACE,
            "no material named `halfspace`".into(),
        );
    }

    for (i, o) in s.objects.iter().enumerate() {
        if !s.is_known_material(&o.material) {
            diag(
                &mut out,
                DanglingMaterialRef,
                Subject::Object(i),
                &o.material,
                format!("object {} uses undefined material `{}`", i, o.material),
            );
        }
        match o.shape {
            Shape::Box { x1, z1, x2, z2 } => {
                if !(x1 < x2 && z1 < z2) {
                    diag(
                        &mut out,
                        OutOfRangeValue,
                        Subject::Object(i),
                        "box",
                        format!("corners ({x1}, {z1}) ({x2}, {z2}) are not ordered"),
                    );
                }
            }
            Shape::Cylinder { r, .. } => {
                if !positive(r) {
                    diag(
                        &mut out,
                        OutOfRangeValue,
                        Subject::Object(i),
                        "radius",
                        format!("{r} must be > 0"),
                    );
                }
            }
        }
        let (xmin, zmin, xmax, zmax) = o.shape.extent();
        if xmin < 0.0 || zmin < 0.0 || xmax > s.width || zmax > s.depth {
            diag(
                &mut out,
                ObjectOutsideDomain,
                Subject::Object(i),
                "geometry",
                format!(
                    "object {i} spans x [{xmin}, {xmax}], z [{zmin}, {zmax}] outside {} x {}",
                    s.width, s.depth
                ),
            );
        }
    }

    if !(positive(s.waveform.center_freq)) {
        diag(
            &mut out,
            OutOfRangeValue,
            Subject::Waveform,
            "center_freq",
            format!("{} must be > 0", s.waveform.center_freq),
        );
    }
    if !s.waveform.amplitude.is_finite() {
        diag(
            &mut out,
            OutOfRangeValue,
            Subject::Waveform,
            "amplitude",
            "must be finite".into(),
        );
    }
    if !(s.source_depth.is_finite() && s.source_depth >= 0.0 && s.source_depth <= s.depth) {
        diag(
            &mut out,
            OutOfRangeValue,
            Subject::Source,
            "source_depth",
            format!("{} must lie in [0, {}]", s.source_depth, s.depth),
        );
    }
    if s.scan.n_traces < 1 {
        diag(&mut out, OutOfRangeValue, Subject::Scan, "n_traces", "must be >= 1".into());
    }
    if !(s.scan.x_start <= s.scan.x_end) {
        diag(
            &mut out,
            OutOfRangeValue,
            Subject::Scan,
            "x_end",
            format!("x_end {} precedes x_start {}", s.scan.x_end, s.scan.x_start),
        );
    }
    let xs = [
        s.scan.x_start,
        s.scan.x_end,
        s.scan.x_start + s.rx_offset,
        s.scan.x_end + s.rx_offset,
    ];
    if xs.iter().any(|&x| !(x >= 0.0 && x <= s.width)) {
        diag(
            &mut out,
            ScanOutsideDomain,
            Subject::Scan,
            "scan",
            format!(
                "scan {}..{} with rx_offset {} leaves [0, {}]",
                s.scan.x_start, s.scan.x_end, s.rx_offset, s.width
            ),
        );
    }
    out
}

/// Writes a scene in canonical directive order with shortest round-trip
/// float formatting.
pub fn serialize_scene(s: &Scene) -> String {
    let mut out = String::new();
    let mut push = |line: String| {
        out.push_str(&line);
        out.push('\n');
    };
    push(format!("#domain: {} {}", s.width, s.depth));
    push(format!("#cell: {} {}", s.dx, s.dz));
    push(format!("#time_window: {}", s.time_window));
    for m in &s.materials {
        push(format!("#material: {} {} {}", m.name, m.eps_r, m.sigma));
    }
    push(format!(
        "#waveform: ricker {} {}",
        s.waveform.amplitude, s.waveform.center_freq
    ));
    push(format!("#source: {}", s.source_depth));
    push(format!("#rx_offset: {}", s.rx_offset));
    push(format!(
        "#scan: {} {} {}",
        s.scan.x_start, s.scan.x_end, s.scan.n_traces
    ));
    for o in &s.objects {
        match o.shape {
            Shape::Box { x1, z1, x2, z2 } => {
                push(format!("#box: {} {} {} {} {}", o.material, x1, z1, x2, z2))
            }
            Shape::Cylinder { xc, zc, r } => {
                push(format!("#cylinder: {} {} {} {}", o.material, xc, zc, r))
            }
        }
    }
    out
}
