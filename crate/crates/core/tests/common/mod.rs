//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use gprforge::annotate::{BBox, Sample};
use gprforge::fdtd::ricker;
use gprforge::radargram::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const FIXTURE_W: usize = 64;
pub const FIXTURE_H: usize = 96;

/// Gray image with one bright Ricker-band hyperbola
/// `row(c) = sqrt(r0² + k²(c − c0)²)` over mild Gaussian noise, labeled
/// from the apex lobe down to the band at the flank columns.
pub fn hyperbola_sample(index: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(index as u64));
    let (w, h) = (FIXTURE_W, FIXTURE_H);
    let c0: f64 = rng.random_range(20.0..44.0);
    let r0: f64 = rng.random_range(20.0..50.0);
    let k: f64 = rng.random_range(1.2..2.0);
    let hw: f64 = rng.random_range(10.0..16.0);
    let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let noise = Normal::new(0.0, 6.0).unwrap();
    let lobe = 2.5;
    let mut pixels = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            let dc = c as f64 - c0;
            let band = (r0 * r0 + k * k * dc * dc).sqrt();
            let fade = (-(dc / (1.5 * hw)).powi(2)).exp();
            let v = 128.0 + polarity * 90.0 * fade * ricker(r as f64, 1.0 / (2.0 * lobe), band) + noise.sample(&mut rng);
            pixels[r * w + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    let edge = (r0 * r0 + k * k * hw * hw).sqrt();
    let b = BBox::new(
        (c0 - hw).floor().max(0.0),
        (r0 - 2.0 * lobe).floor().max(0.0),
        (c0 + hw).ceil().min(w as f64),
        (edge + 2.0 * lobe).ceil().min(h as f64),
    );
    Sample {
        index,
        image: GrayImage::new(w, h, pixels).unwrap(),
        boxes: vec![b],
    }
}

pub fn fixture(n: usize, seed: u64) -> Vec<Sample> {
    (0..n).map(|i| hyperbola_sample(i, seed)).collect()
}
