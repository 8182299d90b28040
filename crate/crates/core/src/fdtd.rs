//! Two-dimensional TM (Ez, Hx, Hy) finite-difference time-domain solver.
//!
//! The simulated region is the scene domain padded with an air layer above
//! the surface and a split-field PML on every side:
//!
//! ```text
//!   +-----------------------------+  <- PML (free space)
//!   |  air (air_cells rows)       |
//!   +-----------------------------+  z = 0, surface
//!   |  scene domain (nx x nz)     |
//!   +-----------------------------+  <- PML (edge materials extended)
//! ```
//!
//! Ez lives on cell corners, Hx on horizontal edges and Hy on vertical
//! edges. Magnetic fields are stored scaled by the free-space impedance so
//! both field kinds have comparable magnitudes.

use rayon::prelude::*;
use thiserror::Error;

use crate::parallel;
use crate::radargram::Radargram;
use crate::scene::{Scene, Waveform, FREE_SPACE, PEC};
use crate::C0;

const ETA0: f64 = 376.730_313_668;
const EPS0: f64 = 8.854_187_812_8e-12;
const BLOWUP: f32 = 1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdtdError {
    #[error("field exceeded 1e30 at step {step}: unstable time step or bad material")]
    NumericalBlowup { step: usize },
    #[error("trace {trace}: {source}")]
    Trace {
        trace: usize,
        #[source]
        source: Box<FdtdError>,
    },
    #[error("point ({x}, {z}) lies outside the simulated grid")]
    OutsideGrid { x: f64, z: f64 },
    #[error("invalid solver input: {0}")]
    Invalid(String),
}

/// Ricker wavelet `(1 - 2π²f²τ²)·exp(-π²f²τ²)` with `τ = t - delay`.
pub fn ricker(t: f64, fc: f64, delay: f64) -> f64 {
    let a = (std::f64::consts::PI * fc * (t - delay)).powi(2);
    (1.0 - 2.0 * a) * (-a).exp()
}

/// Source delay used by the solver, so the wavelet starts near zero.
pub fn source_delay(fc: f64) -> f64 {
    1.5 / fc
}

/// Largest stable step scaled by `courant`:
/// `courant / (c·sqrt(1/dx² + 1/dz²))`.
pub fn cfl_timestep(dx: f64, dz: f64, courant: f64) -> f64 {
    courant / (C0 * (1.0 / (dx * dx) + 1.0 / (dz * dz)).sqrt())
}

/// Per-cell electrical properties of the scene domain. Row `j` is depth.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialGrid {
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
    pub eps_r: Vec<f64>,
    pub sigma: Vec<f64>,
    pub pec_mask: Vec<bool>,
}

impl MaterialGrid {
    pub fn uniform(nx: usize, nz: usize, dx: f64, dz: f64, eps_r: f64, sigma: f64) -> Self {
        Self {
            nx,
            nz,
            dx,
            dz,
            eps_r: vec![eps_r; nx * nz],
            sigma: vec![sigma; nx * nz],
            pec_mask: vec![false; nx * nz],
        }
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
}

/// Assigns every cell the material of the last object covering its center;
/// uncovered cells take `halfspace`.
pub fn rasterize_scene(s: &Scene) -> MaterialGrid {
    let nx = (s.width / s.dx).round().max(1.0) as usize;
    let nz = (s.depth / s.dz).round().max(1.0) as usize;
    let hs = s.halfspace().cloned();
    let (bg_eps, bg_sigma) = hs.map_or((1.0, 0.0), |m| (m.eps_r, m.sigma));
    let mut grid = MaterialGrid::uniform(nx, nz, s.dx, s.dz, bg_eps, bg_sigma);

    for obj in &s.objects {
        let (xmin, zmin, xmax, zmax) = obj.shape.extent();
        let i0 = ((xmin / s.dx).floor().max(0.0) as usize).min(nx);
        let i1 = ((xmax / s.dx).ceil().max(0.0) as usize).min(nx);
        let j0 = ((zmin / s.dz).floor().max(0.0) as usize).min(nz);
        let j1 = ((zmax / s.dz).ceil().max(0.0) as usize).min(nz);
        let props = match obj.material.as_str() {
            PEC => None,
            FREE_SPACE => Some((1.0, 0.0)),
            name => s.material(name).map(|m| (m.eps_r, m.sigma)),
        };
        for j in j0..j1 {
            let zc = (j as f64 + 0.5) * s.dz;
            for i in i0..i1 {
                let xc = (i as f64 + 0.5) * s.dx;
                if !obj.shape.contains(xc, zc) {
                    continue;
                }
                let k = grid.index(i, j);
                match props {
                    None => grid.pec_mask[k] = true,
                    Some((e, sg)) => {
                        grid.pec_mask[k] = false;
                        grid.eps_r[k] = e;
                        grid.sigma[k] = sg;
                    }
                }
            }
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub courant: f64,
    /// Absorbing layer thickness in cells; 0 gives a closed PEC box.
    pub pml_cells: usize,
    pub pml_order: i32,
    /// Free-space rows above the surface.
    pub air_cells: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            courant: 0.95,
            pml_cells: 10,
            pml_order: 3,
            air_cells: 20,
        }
    }
}

impl SolverConfig {
    pub fn with_courant(courant: f64) -> Self {
        Self {
            courant,
            ..Self::default()
        }
    }
}

/// A-scan: receiver Ez against time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f32>,
    pub dt: f64,
    /// Time at which the source wavelet peaks.
    pub time_zero: f64,
}

/// Precomputed update coefficients for one padded grid and time step.
pub struct Solver {
    nxp: usize,
    nzp: usize,
    stride: usize,
    x_off: usize,
    z_off: usize,
    dx: f64,
    dz: f64,
    pub dt: f64,
    pub n_steps: usize,
    cax: Vec<f32>,
    cbx: Vec<f32>,
    cay: Vec<f32>,
    cby: Vec<f32>,
    dax: Vec<f32>,
    dbx: Vec<f32>,
    day: Vec<f32>,
    dby: Vec<f32>,
    node_eps: Vec<f64>,
    node_sigma: Vec<f64>,
}

/// Mutable field arrays of one run.
pub struct FieldState {
    pub ez: Vec<f32>,
    pub ezx: Vec<f32>,
    pub ezy: Vec<f32>,
    pub hx: Vec<f32>,
    pub hy: Vec<f32>,
    pub step: usize,
}

impl FieldState {
    fn zeros(len: usize) -> Self {
        Self {
            ez: vec![0.0; len],
            ezx: vec![0.0; len],
            ezy: vec![0.0; len],
            hx: vec![0.0; len],
            hy: vec![0.0; len],
            step: 0,
        }
    }

    pub fn max_abs_ez(&self) -> f32 {
        self.ez.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

impl Solver {
    pub fn new(grid: &MaterialGrid, cfg: &SolverConfig, time_window: f64) -> Result<Self, FdtdError> {
        if !(cfg.courant > 0.0) {
            return Err(FdtdError::Invalid(format!("courant {}", cfg.courant)));
        }
        if !(time_window > 0.0) {
            return Err(FdtdError::Invalid(format!("time window {time_window}")));
        }
        if grid.nx == 0 || grid.nz == 0 {
            return Err(FdtdError::Invalid("empty grid".into()));
        }
        let p = cfg.pml_cells;
        let nxp = grid.nx + 2 * p;
        let nzp = grid.nz + cfg.air_cells + 2 * p;
        let stride = nxp + 1;
        let len = stride * (nzp + 1);
        let z_off = p + cfg.air_cells;
        let dt = cfl_timestep(grid.dx, grid.dz, cfg.courant);
        let n_steps = (time_window / dt).ceil() as usize;

        // Cell properties in padded coordinates: PML copies the nearest edge
        // material, air above the surface, PEC only inside the domain.
        let cell = |ci: isize, cj: isize| -> (f64, f64, bool) {
            let ci = ci.clamp(0, nxp as isize - 1);
            let cj = cj.clamp(0, nzp as isize - 1);
            let dj = cj - z_off as isize;
            if dj < 0 {
                return (1.0, 0.0, false);
            }
            let di = ci - p as isize;
            let inside = di >= 0 && (di as usize) < grid.nx && (dj as usize) < grid.nz;
            let i = di.clamp(0, grid.nx as isize - 1) as usize;
            let j = (dj as usize).min(grid.nz - 1);
            let k = grid.index(i, j);
            (grid.eps_r[k], grid.sigma[k], inside && grid.pec_mask[k])
        };

        let mut node_eps = vec![1.0; len];
        let mut node_sigma = vec![0.0; len];
        let mut node_pec = vec![false; len];
        for jn in 0..=nzp {
            for in_ in 0..=nxp {
                let (mut e, mut s, mut pec) = (0.0, 0.0, false);
                for (di, dj) in [(-1, -1), (0, -1), (-1, 0), (0, 0)] {
                    let (ce, cs, cp) = cell(in_ as isize + di, jn as isize + dj);
                    e += ce;
                    s += cs;
                    pec |= cp;
                }
                let k = jn * stride + in_;
                node_eps[k] = e / 4.0;
                node_sigma[k] = s / 4.0;
                node_pec[k] = pec;
            }
        }

        // Polynomial PML loss rate (sigma/eps, 1/s) at fractional node
        // coordinate `u` along an axis with `n` cells. The rate depends on
        // position only, never on the local material, so the layer is the
        // same coordinate stretch everywhere and the grid stays reciprocal.
        // The grading targets the mean domain permittivity.
        let order = cfg.pml_order;
        let eps_ref = grid.eps_r.iter().sum::<f64>() / grid.eps_r.len() as f64;
        let profile = |u: f64, n: usize, d: f64| -> f64 {
            if p == 0 {
                return 0.0;
            }
            let pf = p as f64;
            let depth = (pf - u).max(u - (n as f64 - pf)).max(0.0) / pf;
            let depth = depth.min(1.0);
            let smax = 0.8 * (order as f64 + 1.0) / (ETA0 * d * eps_ref.sqrt());
            smax / (EPS0 * eps_ref) * depth.powi(order)
        };

        let mut s = Self {
            nxp,
            nzp,
            stride,
            x_off: p,
            z_off,
            dx: grid.dx,
            dz: grid.dz,
            dt,
            n_steps,
            cax: vec![0.0; len],
            cbx: vec![0.0; len],
            cay: vec![0.0; len],
            cby: vec![0.0; len],
            dax: vec![1.0; len],
            dbx: vec![0.0; len],
            day: vec![1.0; len],
            dby: vec![0.0; len],
            node_eps: node_eps.clone(),
            node_sigma: node_sigma.clone(),
        };

        for jn in 0..=nzp {
            for in_ in 0..=nxp {
                let k = jn * stride + in_;
                let eps = node_eps[k];
                let eps_abs = EPS0 * eps;
                if !node_pec[k] {
                    let loss = node_sigma[k] * dt / (2.0 * eps_abs);
                    let ax = loss + profile(in_ as f64, nxp, grid.dx) * dt / 2.0;
                    let az = loss + profile(jn as f64, nzp, grid.dz) * dt / 2.0;
                    s.cax[k] = ((1.0 - ax) / (1.0 + ax)) as f32;
                    s.cbx[k] = (C0 * dt / (eps * grid.dx) / (1.0 + ax)) as f32;
                    s.cay[k] = ((1.0 - az) / (1.0 + az)) as f32;
                    s.cby[k] = (C0 * dt / (eps * grid.dz) / (1.0 + az)) as f32;
                }
                // Hx sits between nodes (i, j) and (i, j+1).
                if jn < nzp {
                    let b = profile(jn as f64 + 0.5, nzp, grid.dz) * dt / 2.0;
                    s.dax[k] = ((1.0 - b) / (1.0 + b)) as f32;
                    s.dbx[k] = (C0 * dt / grid.dz / (1.0 + b)) as f32;
                }
                // Hy sits between nodes (i, j) and (i+1, j).
                if in_ < nxp {
                    let b = profile(in_ as f64 + 0.5, nxp, grid.dx) * dt / 2.0;
                    s.day[k] = ((1.0 - b) / (1.0 + b)) as f32;
                    s.dby[k] = (C0 * dt / grid.dx / (1.0 + b)) as f32;
                }
            }
        }
        Ok(s)
    }

    /// Nearest Ez node to a point in scene coordinates (z < 0 is air).
    pub fn node_at(&self, x: f64, z: f64) -> Result<usize, FdtdError> {
        let i = (x / self.dx).round() + self.x_off as f64;
        let j = (z / self.dz).round() + self.z_off as f64;
        if !(i >= 1.0 && j >= 1.0 && i < self.nxp as f64 && j < self.nzp as f64) {
            return Err(FdtdError::OutsideGrid { x, z });
        }
        Ok(j as usize * self.stride + i as usize)
    }

    pub fn new_state(&self) -> FieldState {
        FieldState::zeros(self.stride * (self.nzp + 1))
    }

    /// Advances H then E by one step.
    pub fn step(&self, f: &mut FieldState) {
        let st = self.stride;
        // Hx = dax*Hx - dbx*dEz/dz
        for j in 0..self.nzp {
            let row = j * st..(j + 1) * st;
            let (e0, e1) = (&f.ez[row.clone()], &f.ez[row.start + st..row.end + st]);
            let (da, db) = (&self.dax[row.clone()], &self.dbx[row.clone()]);
            for ((((h, a), b), lo), hi) in f.hx[row].iter_mut().zip(da).zip(db).zip(e0).zip(e1) {
                *h = a * *h - b * (hi - lo);
            }
        }
        // Hy = day*Hy + dby*dEz/dx
        for j in 0..=self.nzp {
            let row = j * st..j * st + self.nxp;
            let e = &f.ez[row.start..row.end + 1];
            let (da, db) = (&self.day[row.clone()], &self.dby[row.clone()]);
            for (((h, a), b), w) in f.hy[row].iter_mut().zip(da).zip(db).zip(e.windows(2)) {
                *h = a * *h + b * (w[1] - w[0]);
            }
        }
        // Split Ez: ezx driven by dHy/dx, ezy by -dHx/dz.
        for j in 1..self.nzp {
            let base = j * st;
            let r = base + 1..base + self.nxp;
            let hy_c = &f.hy[r.clone()];
            let hy_l = &f.hy[r.start - 1..r.end - 1];
            let hx_c = &f.hx[r.clone()];
            let hx_u = &f.hx[r.start - st..r.end - st];
            let (cax, cbx) = (&self.cax[r.clone()], &self.cbx[r.clone()]);
            let (cay, cby) = (&self.cay[r.clone()], &self.cby[r.clone()]);
            let ezx = &mut f.ezx[r.clone()];
            let ezy = &mut f.ezy[r.clone()];
            let ez = &mut f.ez[r];
            for k in 0..ez.len() {
                let x = cax[k] * ezx[k] + cbx[k] * (hy_c[k] - hy_l[k]);
                let y = cay[k] * ezy[k] - cby[k] * (hx_c[k] - hx_u[k]);
                ezx[k] = x;
                ezy[k] = y;
                ez[k] = x + y;
            }
        }
        f.step += 1;
    }

    /// Adds a soft source value at node `k`, scaled like a current
    /// injection so transmitter and receiver are interchangeable.
    pub fn inject(&self, f: &mut FieldState, k: usize, value: f64) {
        let scale = self.cbx[k] as f64 * self.dx / (C0 * self.dt);
        let v = (value * scale) as f32;
        f.ezx[k] += v;
        f.ez[k] += v;
    }

    /// Runs one A-scan between two points in scene coordinates.
    pub fn run(&self, tx: (f64, f64), rx: (f64, f64), waveform: &Waveform) -> Result<Trace, FdtdError> {
        let src = self.node_at(tx.0, tx.1)?;
        let rec = self.node_at(rx.0, rx.1)?;
        let fc = waveform.center_freq;
        let delay = source_delay(fc);
        let mut f = self.new_state();
        let mut samples = Vec::with_capacity(self.n_steps);
        for n in 0..self.n_steps {
            self.step(&mut f);
            let t = n as f64 * self.dt;
            self.inject(&mut f, src, waveform.amplitude * ricker(t, fc, delay));
            let v = f.ez[rec];
            if !(v.abs() < BLOWUP) || (n % 32 == 31 && !(f.max_abs_ez() < BLOWUP)) {
                return Err(FdtdError::NumericalBlowup { step: n });
            }
            samples.push(v);
        }
        if !(f.max_abs_ez() < BLOWUP) {
            return Err(FdtdError::NumericalBlowup { step: self.n_steps });
        }
        Ok(Trace {
            samples,
            dt: self.dt,
            time_zero: delay,
        })
    }

    pub fn node_eps(&self, k: usize) -> f64 {
        self.node_eps[k]
    }

    pub fn node_sigma(&self, k: usize) -> f64 {
        self.node_sigma[k]
    }
}

pub fn run_ascan(
    grid: &MaterialGrid,
    tx: (f64, f64),
    rx: (f64, f64),
    waveform: &Waveform,
    time_window: f64,
    cfg: &SolverConfig,
) -> Result<Trace, FdtdError> {
    Solver::new(grid, cfg, time_window)?.run(tx, rx, waveform)
}

/// One A-scan per scan position (transmitter at the position, receiver
/// `rx_offset` to the right), assembled left to right.
pub fn run_bscan(s: &Scene, cfg: &SolverConfig) -> Result<Radargram, FdtdError> {
    let grid = rasterize_scene(s);
    let solver = Solver::new(&grid, cfg, s.time_window)?;
    let positions = s.scan.positions();
    let z = s.source_depth;
    let results: Vec<Result<Trace, FdtdError>> = parallel::pool().install(|| {
        positions
            .par_iter()
            .map(|&x| solver.run((x, z), (x + s.rx_offset, z), &s.waveform))
            .collect()
    });
    let mut traces = Vec::with_capacity(results.len());
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => traces.push(t.samples),
            Err(e) => {
                return Err(FdtdError::Trace {
                    trace: i,
                    source: Box::new(e),
                })
            }
        }
    }
    let dx_m = s.scan.spacing().filter(|&d| d > 0.0).unwrap_or(s.dx);
    Radargram::from_traces(&traces, solver.dt, dx_m, source_delay(s.waveform.center_freq))
        .map_err(|e| FdtdError::Invalid(e.to_string()))
}
