//! Normalized cross-correlation against analytic hyperbola templates.

use super::{nms, Detection};
use crate::annotate::{hyperbola_bbox, wave_velocity, ImageGeometry, HYPERBOLA_CLASS};
use crate::fdtd::ricker;
use crate::radargram::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateParams {
    /// Reflector depth, m.
    pub depth: f64,
    pub eps_r: f64,
    /// Negative polarity, as for a reflector slower than its host.
    pub invert: bool,
}

/// Zero-mean template pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub params: TemplateParams,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

/// Ricker band along the zero-offset travel-time curve, framed exactly like
/// a ground-truth box of the same hyperbola so a match at offset `(x, y)`
/// maps to the box `(x, y, x + width, y + height)`.
pub fn render_template(p: TemplateParams, g: &ImageGeometry, tail_drop: f64) -> Template {
    let v = wave_velocity(p.eps_r);
    let t0 = 2.0 * p.depth / v;
    // a frame wide enough that clipping at the image edge does not bite
    let wide = ImageGeometry {
        width: usize::MAX / 4,
        height: usize::MAX / 4,
        x_origin: 0.0,
        ..*g
    };
    let x0 = wide.position((1usize << 20) as f64);
    let b = hyperbola_bbox(x0, t0, v, &wide, tail_drop);
    let (width, height) = (b.width() as usize, b.height() as usize);
    let sign = if p.invert { -1.0 } else { 1.0 };
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        let t = (b.ymin + r as f64 + 0.5) * g.dt - g.time_zero;
        for c in 0..width {
            let x = wide.position(b.xmin + c as f64);
            let dx = x - x0;
            let tx = (t0 * t0 + 4.0 * dx * dx / (v * v)).sqrt();
            pixels.push(sign * ricker(t, g.center_freq, tx));
        }
    }
    let mean = pixels.iter().sum::<f64>() / pixels.len().max(1) as f64;
    pixels.iter_mut().for_each(|v| *v -= mean);
    Template {
        params: p,
        width,
        height,
        pixels,
    }
}

/// Depths {0.2, 0.4, 0.6} m × permittivities {4, 6.5, 9} × both polarities.
pub fn template_bank(g: &ImageGeometry, tail_drop: f64) -> Vec<Template> {
    let mut out = Vec::new();
    for depth in [0.2, 0.4, 0.6] {
        for eps_r in [4.0, 6.5, 9.0] {
            for invert in [false, true] {
                out.push(render_template(TemplateParams { depth, eps_r, invert }, g, tail_drop));
            }
        }
    }
    out
}

/// NCC in `[−1, 1]` at every offset where the template fits, row-major over
/// `(H − h + 1) × (W − w + 1)`. Windows (or templates) with zero variance
/// score `None`.
pub fn ncc_map(img: &GrayImage, t: &Template) -> Vec<Option<f64>> {
    let (w, h) = (img.width, img.height);
    if t.width == 0 || t.height == 0 || t.width > w || t.height > h {
        return Vec::new();
    }
    let (ow, oh) = (w - t.width + 1, h - t.height + 1);
    let tnorm = t.pixels.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = (t.width * t.height) as f64;
    let px: Vec<f64> = img.pixels.iter().map(|&p| p as f64).collect();
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let (mut s, mut s2, mut st) = (0.0, 0.0, 0.0);
            for r in 0..t.height {
                let row = &px[(y + r) * w + x..(y + r) * w + x + t.width];
                let trow = &t.pixels[r * t.width..(r + 1) * t.width];
                for (a, b) in row.iter().zip(trow) {
                    s += a;
                    s2 += a * a;
                    st += a * b;
                }
            }
            // template is zero-mean, so Σ (a − ā) b = Σ a b
            let var = s2 - s * s / n;
            let denom = var.max(0.0).sqrt() * tnorm;
            out.push((denom > 1e-9 * n && tnorm > 0.0).then(|| (st / denom).clamp(-1.0, 1.0)));
        }
    }
    out
}

/// Detections from every template: local maxima of the mapped score
/// `(s + 1)/2` (degenerate windows score 0) at or above `score_thresh`,
/// then NMS across the whole bank.
pub fn template_match(img: &GrayImage, bank: &[Template], score_thresh: f64, nms_thresh: f64) -> Vec<Detection> {
    let mut dets = Vec::new();
    for t in bank {
        let map = ncc_map(img, t);
        if map.is_empty() {
            continue;
        }
        let ow = img.width - t.width + 1;
        let oh = img.height - t.height + 1;
        let score = |x: usize, y: usize| map[y * ow + x].map_or(0.0, |s| 0.5 * (s + 1.0));
        for y in 0..oh {
            for x in 0..ow {
                let s = score(x, y);
                if s < score_thresh {
                    continue;
                }
                let mut is_max = true;
                for yy in y.saturating_sub(1)..(y + 2).min(oh) {
                    for xx in x.saturating_sub(1)..(x + 2).min(ow) {
                        let o = score(xx, yy);
                        if o > s || (o == s && (yy, xx) < (y, x)) {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    let mut b = crate::annotate::BBox::new(
                        x as f64,
                        y as f64,
                        (x + t.width) as f64,
                        (y + t.height) as f64,
                    );
                    b.class_id = HYPERBOLA_CLASS;
                    dets.push(Detection::new(b, s));
                }
            }
        }
    }
    nms(&dets, nms_thresh)
}
