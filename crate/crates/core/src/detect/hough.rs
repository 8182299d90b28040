//! Randomized Hough transform for diffraction hyperbolas.
//!
//! Every triple of edge points fixes `t² = t0² + (4/v²)(x − x0)²` exactly,
//! so each sampled triple casts a single vote in `(x0, t0, v)` space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{nms, Detection};
use crate::annotate::{hyperbola_bbox, ImageGeometry, HYPERBOLA_CLASS};
use crate::radargram::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperbolaFit {
    /// Apex midpoint position, m.
    pub x0: f64,
    /// Two-way apex time after the wavelet peak, s.
    pub t0: f64,
    /// Propagation velocity, m/s.
    pub v: f64,
}

impl HyperbolaFit {
    pub fn time_at(&self, x: f64) -> f64 {
        let dx = x - self.x0;
        (self.t0 * self.t0 + 4.0 * dx * dx / (self.v * self.v)).sqrt()
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum TripleError {
    #[error("two points share an abscissa")]
    RepeatedAbscissa,
    #[error("points are collinear or open downwards in (x, t²)")]
    NotConvex,
    #[error("apex time squared is not positive")]
    NonPositiveApex,
}

/// Exact hyperbola through three `(x, t)` points, via the Newton form of
/// the quadratic `u = t²` in `x`.
pub fn solve_triple(pts: [(f64, f64); 3]) -> Result<HyperbolaFit, TripleError> {
    let [(x1, t1), (x2, t2), (x3, t3)] = pts;
    if x1 == x2 || x1 == x3 || x2 == x3 {
        return Err(TripleError::RepeatedAbscissa);
    }
    let (u1, u2, u3) = (t1 * t1, t2 * t2, t3 * t3);
    let d12 = (u2 - u1) / (x2 - x1);
    let d23 = (u3 - u2) / (x3 - x2);
    let a = (d23 - d12) / (x3 - x1);
    if !(a > 0.0) || !a.is_finite() {
        return Err(TripleError::NotConvex);
    }
    // vertex of u1 + d12 (x − x1) + a (x − x1)(x − x2)
    let x0 = 0.5 * (x1 + x2) - d12 / (2.0 * a);
    let t0sq = u1 + d12 * (x0 - x1) + a * (x0 - x1) * (x0 - x2);
    if !(t0sq > 0.0) {
        return Err(TripleError::NonPositiveApex);
    }
    Ok(HyperbolaFit {
        x0,
        t0: t0sq.sqrt(),
        v: 2.0 / a.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoughParams {
    pub geometry: ImageGeometry,
    /// Edge points must exceed this percentile of `|pixel − median|`.
    pub edge_percentile: f64,
    pub n_samples: usize,
    /// Accumulator bins along `x0`, `t0` and `v`.
    pub bins: [usize; 3],
    pub v_range: (f64, f64),
    /// Partner points are drawn within this many columns of the first.
    pub neighbourhood: usize,
    pub min_votes: usize,
    pub tail_drop: f64,
    pub nms_thresh: f64,
    pub seed: u64,
}

impl HoughParams {
    pub fn new(geometry: ImageGeometry) -> Self {
        Self {
            geometry,
            edge_percentile: 97.0,
            n_samples: 20_000,
            bins: [geometry.width.max(1), geometry.height.max(1) / 2, 24],
            v_range: (6e7, 1.6e8),
            neighbourhood: 10,
            min_votes: 30,
            tail_drop: 0.5,
            nms_thresh: 0.3,
            seed: 0,
        }
    }
}

/// Per-column local maxima of `|pixel − median|` above the percentile
/// threshold, as `(column, row)` with the row refined by a parabola
/// through the peak and its two neighbours.
pub fn edge_points(img: &GrayImage, percentile: f64) -> Vec<(usize, f64)> {
    let mut sorted = img.pixels.clone();
    sorted.sort_unstable();
    let Some(&median) = sorted.get(sorted.len() / 2) else {
        return Vec::new();
    };
    let amp: Vec<u8> = img.pixels.iter().map(|&p| p.abs_diff(median)).collect();
    let mut ranked = amp.clone();
    ranked.sort_unstable();
    let q = ((percentile / 100.0) * (ranked.len() - 1) as f64).round() as usize;
    let thr = ranked[q.min(ranked.len() - 1)];
    let (w, h) = (img.width, img.height);
    let mut pts = Vec::new();
    for c in 0..w {
        for r in 0..h {
            let a = amp[r * w + c];
            if a == 0 || a <= thr {
                continue;
            }
            let up = if r > 0 { amp[(r - 1) * w + c] } else { 0 };
            let down = if r + 1 < h { amp[(r + 1) * w + c] } else { 0 };
            if a > up && a >= down {
                let (u, m, d) = (up as f64, a as f64, down as f64);
                let curv = u - 2.0 * m + d;
                let shift = if curv < 0.0 { (0.5 * (u - d) / curv).clamp(-0.5, 0.5) } else { 0.0 };
                pts.push((c, r as f64 + shift));
            }
        }
    }
    pts
}

/// Accumulator peaks with at least `min_votes`, strongest first, each with
/// a box from the same geometry rules as ground-truth labels and score
/// `1 − exp(−votes/min_votes)`; overlapping boxes are suppressed.
pub fn hough_detect(img: &GrayImage, p: &HoughParams) -> Vec<(HyperbolaFit, Detection)> {
    let g = &p.geometry;
    let pts = edge_points(img, p.edge_percentile);
    if pts.len() < 3 {
        return Vec::new();
    }
    let mut by_col: Vec<Vec<f64>> = vec![Vec::new(); img.width];
    for &(c, r) in &pts {
        let t = r * g.dt - g.time_zero;
        if t > 0.0 {
            by_col[c].push(t);
        }
    }
    let cols: Vec<usize> = (0..img.width).filter(|&c| !by_col[c].is_empty()).collect();
    if cols.len() < 3 {
        return Vec::new();
    }
    let [nx, nt, nv] = p.bins.map(|b| b.max(1));
    let x_lo = g.position(-0.5);
    let x_hi = g.position(img.width as f64 - 0.5);
    let t_hi = img.height as f64 * g.dt - g.time_zero;
    let (v_lo, v_hi) = p.v_range;
    let bin = |v: f64, lo: f64, hi: f64, n: usize| -> Option<usize> {
        let f = (v - lo) / (hi - lo);
        (0.0..1.0).contains(&f).then(|| (f * n as f64) as usize)
    };
    let mut acc = vec![0u32; nx * nt * nv];
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let nb = p.neighbourhood as i64;
    for _ in 0..p.n_samples {
        let c1 = cols[rng.random_range(0..cols.len())];
        let pick = |rng: &mut ChaCha8Rng| -> Option<usize> {
            let c = c1 as i64 + rng.random_range(-nb..=nb);
            (c >= 0 && (c as usize) < img.width && c as usize != c1 && !by_col[c as usize].is_empty())
                .then_some(c as usize)
        };
        let (Some(c2), Some(c3)) = (pick(&mut rng), pick(&mut rng)) else {
            continue;
        };
        if c2 == c3 {
            continue;
        }
        let point = |c: usize, rng: &mut ChaCha8Rng| (g.position(c as f64), by_col[c][rng.random_range(0..by_col[c].len())]);
        let triple = [point(c1, &mut rng), point(c2, &mut rng), point(c3, &mut rng)];
        let Ok(f) = solve_triple(triple) else {
            continue;
        };
        if let (Some(i), Some(j), Some(k)) = (bin(f.x0, x_lo, x_hi, nx), bin(f.t0, 0.0, t_hi, nt), bin(f.v, v_lo, v_hi, nv)) {
            acc[(i * nt + j) * nv + k] += 1;
        }
    }
    let at = |i: usize, j: usize, k: usize| acc[(i * nt + j) * nv + k];
    let mut peaks: Vec<(u32, usize, usize, usize)> = Vec::new();
    for i in 0..nx {
        for j in 0..nt {
            for k in 0..nv {
                let votes = at(i, j, k);
                if (votes as usize) < p.min_votes.max(1) {
                    continue;
                }
                let mut is_max = true;
                'nb: for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        for dk in -1isize..=1 {
                            let (a, b, c) = (i as isize + di, j as isize + dj, k as isize + dk);
                            if (di, dj, dk) == (0, 0, 0) || a < 0 || b < 0 || c < 0 {
                                continue;
                            }
                            let (a, b, c) = (a as usize, b as usize, c as usize);
                            if a >= nx || b >= nt || c >= nv {
                                continue;
                            }
                            let o = at(a, b, c);
                            // plateaus keep their first cell in scan order
                            if o > votes || (o == votes && (a, b, c) < (i, j, k)) {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_max {
                    peaks.push((votes, i, j, k));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let center = |i: usize, lo: f64, hi: f64, n: usize| lo + (i as f64 + 0.5) * (hi - lo) / n as f64;
    let mut fits = Vec::new();
    let mut dets = Vec::new();
    for (votes, i, j, k) in peaks {
        let f = HyperbolaFit {
            x0: center(i, x_lo, x_hi, nx),
            t0: center(j, 0.0, t_hi, nt),
            v: center(k, v_lo, v_hi, nv),
        };
        let mut b = hyperbola_bbox(f.x0, f.t0, f.v, g, p.tail_drop);
        b.class_id = HYPERBOLA_CLASS;
        if !b.is_valid() {
            continue;
        }
        let score = 1.0 - (-(votes as f64) / p.min_votes.max(1) as f64).exp();
        fits.push(f);
        dets.push(Detection::new(b, score));
    }
    let kept = nms(&dets, p.nms_thresh);
    kept.into_iter()
        .map(|d| {
            let i = dets.iter().position(|e| *e == d).expect("kept detection comes from the list");
            (fits[i], d)
        })
        .collect()
}
