mod common;

use gprforge::annotate::{iou, BBox, GenConfig, ImageGeometry, Preset};
use gprforge::detect::*;
use gprforge::fdtd::ricker;
use gprforge::nn::{decode_weights, encode_weights, Backbone, Tensor, Weights};
use gprforge::radargram::GrayImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pretrained() -> Weights {
    Backbone::<f32>::init((32, 32), 2, 11).to_weights()
}

fn gen_geometry() -> ImageGeometry {
    ImageGeometry::of_config(&GenConfig::preset(Preset::Simulated))
}

#[test]
fn anchor_examples() {
    let a = gen_anchors(4, 4, 8);
    assert_eq!(a.anchors.len(), 96);
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..ANCHORS_PER_CELL {
                let c = a.anchors[(i * 4 + j) * ANCHORS_PER_CELL + k].center();
                assert_eq!(c, ((j as f64 + 0.5) * 8.0, (i as f64 + 0.5) * 8.0));
            }
        }
    }
    let wide = a.anchors[3];
    assert_eq!((wide.width(), wide.height()), (45.0, 23.0));
    let crossing = a.crossing(32.0, 32.0);
    assert!(crossing.iter().any(|&c| c) && crossing.iter().any(|&c| !c));
}

#[test]
fn box_coding_examples() {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_box(&a, &a), [0.0; 4]);
    let t = encode_box(&a, &BBox::new(5.0, 0.0, 15.0, 10.0));
    assert_eq!(t, [0.5, 0.0, 0.0, 0.0]);
    let g = BBox::new(3.0, -2.0, 30.0, 7.5);
    let d = decode_box(&a, encode_box(&a, &g));
    for (x, y) in [(d.xmin, g.xmin), (d.ymin, g.ymin), (d.xmax, g.xmax), (d.ymax, g.ymax)] {
        assert!((x - y).abs() < 1e-4);
    }
}

#[test]
fn assignment_examples() {
    let anchors = gen_anchors(4, 4, 8).anchors;
    assert!(assign_anchors(&anchors, &[], 0.7, 0.3).iter().all(|l| *l == AnchorLabel::Negative));

    let labels = assign_anchors(&anchors, &[anchors[13]], 0.7, 0.3);
    assert_eq!(labels[13], AnchorLabel::Positive(0));

    let a = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)];
    let gt = BBox::new(0.0, 0.0, 10.0, 20.0);
    assert_eq!(iou(&a[0], &gt), 0.5);
    let labels = assign_anchors(&a, &[gt], 0.7, 0.3);
    assert_eq!(labels, vec![AnchorLabel::Positive(0), AnchorLabel::Negative]);
}

fn det(x: f64, y: f64, w: f64, h: f64, s: f64) -> Detection {
    Detection::new(BBox::new(x, y, x + w, y + h), s)
}

#[test]
fn nms_examples() {
    let one = [det(1.0, 1.0, 5.0, 5.0, 0.4)];
    assert_eq!(nms(&one, 0.3), one.to_vec());
    let same = [det(0.0, 0.0, 10.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 10.0, 0.9)];
    assert_eq!(nms(&same, 0.3), vec![same[1]]);
    let disjoint = [det(0.0, 0.0, 5.0, 5.0, 0.2), det(10.0, 0.0, 5.0, 5.0, 0.7), det(20.0, 0.0, 5.0, 5.0, 0.5)];
    assert_eq!(nms(&disjoint, 0.3), vec![disjoint[1], disjoint[2], disjoint[0]]);
    // equal scores keep index order
    let tie = [det(0.0, 0.0, 10.0, 10.0, 0.5), det(1.0, 0.0, 10.0, 10.0, 0.5)];
    assert_eq!(nms(&tie, 0.3), vec![tie[0]]);
}

#[test]
fn roi_pool_examples() {
    let feat = Tensor::from_vec(&[3, 6, 5], vec![2.5f64; 90]).unwrap();
    let (y, _) = roi_pool(&feat, &BBox::new(0.0, 0.0, 40.0, 48.0), 4, 8);
    assert_eq!(y.shape, vec![3, 4, 4]);
    assert!(y.data.iter().all(|&v| v == 2.5));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (w, h): (f64, f64) = (rng.random_range(4.0..36.0), rng.random_range(4.0..44.0));
        let x = rng.random_range(0.0..40.0 - w);
        let b = BBox::new(x, 1.0, x + w, 1.0 + h);
        assert_eq!(roi_pool(&feat, &b, 4, 8).0.shape, vec![3, 4, 4]);
    }

    let ramp = Tensor::from_vec(&[1, 8, 8], (0..64).map(|k| k as f64).collect()).unwrap();
    let (y, _) = roi_pool(&ramp, &BBox::new(0.0, 0.0, 64.0, 64.0), 4, 8);
    let corners: Vec<f64> = (0..4)
        .flat_map(|i| (0..4).map(move |j| ((2 * i + 1) * 8 + 2 * j + 1) as f64))
        .collect();
    assert_eq!(y.data, corners);

    // a box beyond the map pools nothing
    let (y, arg) = roi_pool(&ramp, &BBox::new(80.0, 80.0, 100.0, 100.0), 4, 8);
    assert!(y.data.iter().all(|&v| v == 0.0) && arg.iter().all(|&a| a == EMPTY_BIN));
}

#[test]
fn roi_pool_backward_routes_to_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..2 * 5 * 7).map(|_| rng.random()).collect();
    let feat = Tensor::from_vec(&[2, 5, 7], data).unwrap();
    let b = BBox::new(3.0, 2.0, 50.0, 37.0);
    let (y, arg) = roi_pool(&feat, &b, 4, 8);
    let dy: Vec<f64> = (0..y.len()).map(|k| k as f64 + 1.0).collect();
    let mut d = Tensor::zeros(&feat.shape);
    roi_pool_backward(&dy, &arg, &mut d);
    assert!((d.data.iter().sum::<f64>() - dy.iter().sum::<f64>()).abs() < 1e-9);
    for (o, &k) in arg.iter().enumerate() {
        let ch = o / 16;
        assert_eq!(feat.data[ch * 35 + k as usize], y.data[o]);
    }
}

#[test]
fn full_detector_loss_passes_grad_check() {
    let (img, gts) = common::grad::detector_crop(4);
    let c = common::grad::detector_check(&pretrained(), &img, &gts);
    assert!(c.report.checked >= 200, "{:?}", c.report);
    assert!(c.report.max_rel_error <= 1e-3, "{:?}", c.report);
    for (name, worst) in c.heads {
        assert!(worst <= 1e-3, "{name} error {worst}");
    }
    assert!(c.corrupted > 5e-3, "a 1% gradient error went unnoticed: {}", c.corrupted);
}

#[test]
fn zero_epochs_gives_initial_model() {
    let samples = common::fixture(2, 1);
    let pre = pretrained();
    let tc = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let (m, log) = train_detector(&samples, &pre, &DetectorConfig::default(), &tc, 5).unwrap();
    assert!(log.is_empty());
    let bb = Backbone::<f32>::from_weights(&pre, "").unwrap();
    assert_eq!(&m.params[..8], &bb.params[..8]);
    let again = train_detector(&samples, &pre, &DetectorConfig::default(), &tc, 5).unwrap().0;
    assert_eq!(m, again);
    assert!(matches!(
        train_detector(&[], &pre, &DetectorConfig::default(), &tc, 5),
        Err(DetectError::EmptyDataset)
    ));
}

#[test]
fn training_is_deterministic_and_models_round_trip() {
    let samples = common::fixture(4, 2);
    let tc = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let cfg = DetectorConfig::default();
    let (a, la) = train_detector(&samples, &pretrained(), &cfg, &tc, 9).unwrap();
    let (b, lb) = train_detector(&samples, &pretrained(), &cfg, &tc, 9).unwrap();
    assert_eq!(la, lb);
    assert_eq!(encode_weights(&a.to_weights()), encode_weights(&b.to_weights()));
    let (c, _) = train_detector(&samples, &pretrained(), &cfg, &tc, 10).unwrap();
    assert_ne!(a.params, c.params);

    let back = DetectorModel::from_weights(&decode_weights(&encode_weights(&a.to_weights())).unwrap()).unwrap();
    // parameters are exact; the config snapshot is stored in f32
    assert_eq!(back.params, a.params);
    assert_eq!(back.config, a.config);
    assert_eq!(encode_weights(&back.to_weights()), encode_weights(&a.to_weights()));
    // a plain backbone file is not a detector
    assert!(DetectorModel::from_weights(&pretrained()).is_err());

    let img = &samples[0].image;
    assert_eq!(detect(&a, img, 0.0, 0.3).unwrap(), detect(&back, img, 0.0, 0.3).unwrap());
}

#[test]
fn overfits_small_hyperbola_set() {
    let samples = common::fixture(20, 7);
    let tc = TrainConfig {
        epochs: 50,
        milestones: vec![35],
        ..TrainConfig::default()
    };
    let (m, log) = train_detector(&samples, &pretrained(), &DetectorConfig::default(), &tc, 3).unwrap();
    let first = log[0].loss();
    let last = log.last().unwrap().loss();
    assert!(last < 0.25 * first, "loss {first} -> {last}");
    let mut hits = 0;
    for s in &samples {
        let dets = detect(&m, &s.image, 0.7, 0.3).unwrap();
        for d in &dets {
            assert!(d.score >= 0.7 && d.score <= 1.0);
            assert!(d.bbox.xmin >= 0.0 && d.bbox.ymin >= 0.0);
            assert!(d.bbox.xmax <= s.image.width as f64 && d.bbox.ymax <= s.image.height as f64);
        }
        hits += dets.iter().any(|d| iou(&d.bbox, &s.boxes[0]) >= 0.5) as usize;
    }
    assert!(hits >= 18, "{hits}/20 images detected");
    // inference is a pure function of model and image
    assert_eq!(detect(&m, &samples[3].image, 0.7, 0.3).unwrap(), detect(&m, &samples[3].image, 0.7, 0.3).unwrap());
}

#[test]
fn zero_heads_find_nothing_on_gray() {
    let m = DetectorModel::with_zero_heads(&pretrained()).unwrap();
    let img = GrayImage::filled(64, 96, 128);
    assert!(detect(&m, &img, 0.7, 0.3).unwrap().is_empty());
    // every ROI scores exactly one half
    let all = detect(&m, &img, 0.0, 1.0).unwrap();
    assert!(!all.is_empty() && all.iter().all(|d| d.score == 0.5));
}

#[test]
fn prediction_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("0.txt");
    let dets = vec![det(1.0, 2.0, 3.5, 4.0, 0.875), det(10.0, 20.0, 5.0, 6.0, 0.71)];
    write_predictions(&p, &dets).unwrap();
    assert_eq!(read_predictions(&p).unwrap(), dets);
}

// --- Hough ----------------------------------------------------------------

#[test]
fn triple_solver_recovers_parameters() {
    let truth = HyperbolaFit {
        x0: 1.0,
        t0: 20e-9,
        v: 1e8,
    };
    let pts = [0.8, 1.05, 1.4].map(|x| (x, truth.time_at(x)));
    let f = solve_triple(pts).unwrap();
    assert!((f.x0 - 1.0).abs() <= 1e-6);
    assert!((f.t0 - 20e-9).abs() <= 1e-6 * 20e-9);
    assert!((f.v - 1e8).abs() <= 1e-6 * 1e8);

    assert_eq!(solve_triple([(1.0, 1.0), (1.0, 2.0), (2.0, 3.0)]), Err(TripleError::RepeatedAbscissa));
    // collinear in (x, t²)
    let line = [0.0f64, 1.0, 2.0].map(|x| (x, (1.0 + x).sqrt()));
    assert_eq!(solve_triple(line), Err(TripleError::NotConvex));
    // opening downwards
    assert_eq!(solve_triple([(0.0, 1.0), (1.0, 2.0), (2.0, 1.0)]), Err(TripleError::NotConvex));
    // apex below zero time
    let bad = [1.0f64, 2.0, 3.0].map(|x: f64| (x, (x * x - 0.5).sqrt()));
    assert_eq!(solve_triple(bad), Err(TripleError::NonPositiveApex));
}

/// Noise-free rendering of a zero-offset hyperbola in dataset geometry.
fn synthetic_bscan(g: &ImageGeometry, f: HyperbolaFit) -> GrayImage {
    let mut px = vec![0u8; g.width * g.height];
    for r in 0..g.height {
        for c in 0..g.width {
            let t = r as f64 * g.dt;
            let arrival = g.time_zero + f.time_at(g.position(c as f64));
            px[r * g.width + c] = (128.0 + 110.0 * ricker(t, g.center_freq, arrival)).round() as u8;
        }
    }
    GrayImage::new(g.width, g.height, px).unwrap()
}

#[test]
fn hough_peak_lands_on_true_bin() {
    let g = gen_geometry();
    let truth = HyperbolaFit {
        x0: g.position(30.3),
        t0: 2.0 * 0.5 / 1.1e8,
        v: 1.1e8,
    };
    let img = synthetic_bscan(&g, truth);
    let p = HoughParams {
        seed: 4,
        ..HoughParams::new(g)
    };
    let found = hough_detect(&img, &p);
    assert!(!found.is_empty());
    let (f, d) = found[0];
    let [nx, nt, nv] = p.bins;
    let x_w = g.dx_m * g.width as f64 / nx as f64;
    let t_w = (g.height as f64 * g.dt - g.time_zero) / nt as f64;
    let v_w = (p.v_range.1 - p.v_range.0) / nv as f64;
    assert!((f.x0 - truth.x0).abs() <= 1.5 * x_w, "x0 {} vs {}", f.x0, truth.x0);
    assert!((f.t0 - truth.t0).abs() <= 1.5 * t_w, "t0 {} vs {}", f.t0, truth.t0);
    assert!((f.v - truth.v).abs() <= 1.5 * v_w, "v {} vs {}", f.v, truth.v);
    assert!(d.score > 0.0 && d.score < 1.0);
    // same seed, same answer
    assert_eq!(hough_detect(&img, &p), found);
}

#[test]
fn hough_on_blank_image_is_empty() {
    let g = gen_geometry();
    let img = GrayImage::filled(g.width, g.height, 90);
    assert!(edge_points(&img, 97.0).is_empty());
    assert!(hough_detect(&img, &HoughParams::new(g)).is_empty());
}

// --- template matching ------------------------------------------------------

fn template_image(t: &Template) -> Vec<u8> {
    let max = t.pixels.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    t.pixels.iter().map(|v| (128.0 + 100.0 * v / max).round() as u8).collect()
}

#[test]
fn template_self_match_and_offset() {
    let g = gen_geometry();
    let t = render_template(
        TemplateParams {
            depth: 0.5,
            eps_r: 6.5,
            invert: false,
        },
        &g,
        0.5,
    );
    assert!(t.width > 5 && t.height > 5);
    let own = GrayImage::new(t.width, t.height, template_image(&t)).unwrap();
    let map = ncc_map(&own, &t);
    assert_eq!(map.len(), 1);
    assert!((map[0].unwrap() - 1.0).abs() < 1e-3);
    let dets = template_match(&own, std::slice::from_ref(&t), 0.5, 0.3);
    assert!((dets[0].score - 1.0).abs() < 1e-3);

    // pasted at (10, 20) into a flat canvas
    let (w, h) = (t.width + 30, t.height + 40);
    let mut px = vec![128u8; w * h];
    let tp = template_image(&t);
    for r in 0..t.height {
        px[(20 + r) * w + 10..(20 + r) * w + 10 + t.width].copy_from_slice(&tp[r * t.width..(r + 1) * t.width]);
    }
    let canvas = GrayImage::new(w, h, px).unwrap();
    let map = ncc_map(&canvas, &t);
    let ow = w - t.width + 1;
    let best = (0..map.len())
        .max_by(|&a, &b| map[a].unwrap_or(-2.0).total_cmp(&map[b].unwrap_or(-2.0)))
        .unwrap();
    assert_eq!((best % ow, best / ow), (10, 20));
    let d = template_match(&canvas, std::slice::from_ref(&t), 0.9, 0.3);
    assert_eq!(d[0].bbox, BBox::new(10.0, 20.0, (10 + t.width) as f64, (20 + t.height) as f64));
}

#[test]
fn constant_image_scores_zero() {
    let g = gen_geometry();
    let bank = template_bank(&g, 0.5);
    assert_eq!(bank.len(), 18);
    let img = GrayImage::filled(g.width, g.height, 77);
    for t in &bank {
        assert!(ncc_map(&img, t).iter().all(Option::is_none));
    }
    assert!(template_match(&img, &bank, 0.0, 0.3).iter().all(|d| d.score == 0.0));
    assert!(template_match(&img, &bank, 0.01, 0.3).is_empty());
}

// --- HOG --------------------------------------------------------------------

#[test]
fn hog_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let win: Vec<f32> = (0..1024).map(|_| rng.random()).collect();
    assert_eq!(hog_features(&win).len(), 324);
    assert_eq!(HOG_LEN, 324);
    assert!(hog_features(&[0.4; 1024]).iter().all(|&v| v == 0.0));
    // a vertical edge votes only the horizontal-gradient bins (0° sits
    // halfway between the 10° and 170° centers)
    let edge: Vec<f32> = (0..1024).map(|k| if k % 32 < 16 { 0.0 } else { 1.0 }).collect();
    let f = hog_features(&edge);
    for block in f.chunks(36) {
        for cell in block.chunks(9) {
            assert!(cell[1..8].iter().all(|&v| v == 0.0));
            assert!((cell[0] - cell[8]).abs() < 1e-12);
        }
    }
}

#[test]
fn hog_classifier_separates_hyperbolas_from_background() {
    let samples = common::fixture(12, 3);
    let cfg = HogConfig {
        epochs: 30,
        per_class: 120,
        ..HogConfig::default()
    };
    let model = train_hog_on_samples(&samples, &cfg, 2).unwrap();
    let again = train_hog_on_samples(&samples, &cfg, 2).unwrap();
    assert_eq!(model, again);
    let back = HogModel::from_weights(&model.to_weights()).unwrap();
    assert!(back.w.iter().zip(&model.w).all(|(a, b)| (a - b).abs() < 1e-6));

    let test = common::fixture(6, 99);
    let mut hits = 0;
    for s in &test {
        let dets = hog_detect(&model, &s.image, 8, &[32, 48, 64], 0.5, 0.3);
        assert!(dets.iter().all(|d| d.score >= 0.5));
        hits += dets.iter().any(|d| iou(&d.bbox, &s.boxes[0]) >= 0.3) as usize;
    }
    assert!(hits >= 4, "{hits}/6");
}

proptest! {
    #[test]
    fn coding_round_trips(ax in -50.0f64..50.0, ay in -50.0f64..50.0, aw in 2.0f64..80.0, ah in 2.0f64..80.0,
                          gx in -50.0f64..50.0, gy in -50.0f64..50.0, gw in 2.0f64..80.0, gh in 2.0f64..80.0) {
        let a = BBox::new(ax, ay, ax + aw, ay + ah);
        let g = BBox::new(gx, gy, gx + gw, gy + gh);
        let d = decode_box(&a, encode_box(&a, &g));
        prop_assert!((d.xmin - g.xmin).abs() < 1e-4 && (d.xmax - g.xmax).abs() < 1e-4);
        prop_assert!((d.ymin - g.ymin).abs() < 1e-4 && (d.ymax - g.ymax).abs() < 1e-4);
        let t = [(gx - ax) / 80.0, (gy - ay) / 80.0, (gw / aw).ln() / 2.0, (gh / ah).ln() / 2.0];
        let back = encode_box(&a, &decode_box(&a, t));
        for k in 0..4 {
            prop_assert!((back[k] - t[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_postcondition(seed in 0u64..10_000, n in 1usize..30, thresh in 0.1f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets: Vec<Detection> = (0..n)
            .map(|_| det(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0),
                         rng.random_range(2.0..20.0), rng.random_range(2.0..20.0),
                         (rng.random_range(0..5) as f64) / 4.0))
            .collect();
        let kept = nms(&dets, thresh);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= thresh);
                prop_assert!(a.score >= b.score);
            }
        }
        for d in &dets {
            if !kept.contains(d) {
                prop_assert!(kept.iter().any(|k| k.score >= d.score && iou(&k.bbox, &d.bbox) > thresh));
            }
        }
    }

    #[test]
    fn every_gt_gets_a_positive(seed in 0u64..10_000, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anchors = gen_anchors(8, 12, 8).anchors;
        let gts: Vec<BBox> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..50.0), rng.random_range(0.0..80.0));
                BBox::new(x, y, x + rng.random_range(4.0..40.0), y + rng.random_range(4.0..40.0))
            })
            .collect();
        let labels = assign_anchors(&anchors, &gts, 0.7, 0.3);
        for g in 0..n {
            prop_assert!(labels.contains(&AnchorLabel::Positive(g)) || gts.iter().take(g).any(|o| *o == gts[g]));
        }
    }

    #[test]
    fn triple_residual(x0 in -2.0f64..4.0, t0 in 1e-9f64..8e-8, v in 5e7f64..2.5e8,
                       a in -1.0f64..-0.05, b in 0.05f64..1.0, c in 1.05f64..2.0) {
        let truth = HyperbolaFit { x0, t0, v };
        let pts = [x0 + a, x0 + b, x0 + c].map(|x| (x, truth.time_at(x)));
        let f = solve_triple(pts).unwrap();
        for (x, t) in pts {
            prop_assert!((f.time_at(x) - t).abs() <= 1e-9 * t, "{} vs {}", f.time_at(x), t);
        }
    }

    #[test]
    fn hog_blocks_are_unit_bounded(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let win: Vec<f32> = (0..1024).map(|_| rng.random::<f32>() * 255.0).collect();
        for block in hog_features(&win).chunks(36) {
            let n = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n <= 1.0 + 1e-6);
        }
    }
}
