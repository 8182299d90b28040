//! Ground-penetrating-radar toolkit: scene files, a 2D TM FDTD solver,
//! radargram conditioning, annotated dataset generation, a small CNN engine,
//! a two-stage region-proposal hyperbola detector with classical baselines,
//! and detection scoring.
//!
//! The modules are layered bottom-up:
//!
//! - [`scene`]: the `#directive: args` survey description format.
//! - [`fdtd`]: Yee-grid solver producing A-scans and B-scans.
//! - [`radargram`]: B-scan container, preprocessing, noise, rendering, file I/O.
//! - [`annotate`]: hyperbola geometry, ground-truth boxes, dataset generation.
//! - [`nn`]: tensors, layers with explicit backprop, SGD, backbone pretraining.
//! - [`detect`]: anchors, proposals, ROI head, training, inference, baselines.
//! - [`eval`]: matching, precision/recall, average precision, reports.

pub mod annotate;
pub mod detect;
pub mod eval;
pub mod fdtd;
pub mod nn;
pub mod parallel;
pub mod radargram;
pub mod scene;
pub mod scenario;

/// Speed of light in vacuum, m/s.
pub const C0: f64 = 2.997_924_58e8;

/// Derives an independent generator seed for stream `index` under `seed`
/// (splitmix64 finalizer), so per-trace and per-image streams do not depend
/// on processing order.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
