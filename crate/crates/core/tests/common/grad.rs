//! Networks and losses whose gradients are checked against central
//! differences.

use std::hash::{Hash, Hasher};

use gprforge::annotate::BBox;
use gprforge::detect::{detector_loss, image_tensor, DetectorConfig, DetectorModel, TrainConfig, HEAD_NAMES, REG_B, RPN_W};
use gprforge::nn::*;
use gprforge::radargram::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(shape, 1.0, &mut rng)
}

/// conv → relu → pool → fc → cross-entropy plus a smooth-L1 term on a
/// second fc output, on a 1×8×8 input.
pub fn small_net_eval(params: &[Tensor<f64>], x: &Tensor<f64>, corrupt_conv: f64) -> Evaluation<f64> {
    let (mut y, cc) = conv2d(x, &params[0], &params[1], 2, 1).unwrap();
    relu(&mut y);
    let (p, arg) = maxpool2(&y);
    let n_flat = p.len();
    let logits = fc(&p.data, 1, &params[2], &params[3]).unwrap();
    let (ce, dlogits) = softmax_cross_entropy(&logits, 3, &[Some(1)]);
    let reg = fc(&p.data, 1, &params[4], &params[5]).unwrap();
    let target = [0.3, -2.0];
    let (sl, dreg) = smooth_l1(&reg, &target);

    let mut grads: Vec<Tensor<f64>> = params.iter().map(|t| Tensor::zeros(&t.shape)).collect();
    let (a, b) = grads.split_at_mut(3);
    let mut dp = fc_backward(&p.data, 1, &params[2], &dlogits, &mut a[2], &mut b[0]);
    let (c, d) = grads.split_at_mut(5);
    let dp2 = fc_backward(&p.data, 1, &params[4], &dreg, &mut c[4], &mut d[0]);
    for (u, v) in dp.iter_mut().zip(dp2) {
        *u += v;
    }
    let dpool = Tensor::from_vec(&p.shape, dp).unwrap();
    let mut dy = maxpool2_backward(&dpool, &arg, y.chw());
    relu_backward(&y, &mut dy);
    let (g0, g1) = grads.split_at_mut(1);
    conv2d_backward(&cc, &params[0], &dy, &mut g0[0], &mut g1[0], false);
    grads[0].data.iter_mut().for_each(|v| *v *= corrupt_conv);
    assert_eq!(n_flat, 4 * 4 * 4);

    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in &y.data {
        (*v > 0.0).hash(&mut h);
    }
    arg.hash(&mut h);
    Evaluation {
        loss: ce + sl,
        grads,
        signature: h.finish(),
    }
}

pub fn small_net_params() -> Vec<Tensor<f64>> {
    vec![
        random(&[4, 1, 5, 5], 1),
        random(&[4], 2),
        random(&[3, 64], 3),
        random(&[3], 4),
        random(&[2, 64], 5),
        random(&[2], 6),
    ]
}

pub fn backbone_check(seed: u64) -> GradCheckReport {
    let model = Backbone::<f64>::init((16, 16), 4, seed);
    let x = random(&[1, 16, 16], seed + 1);
    let mut params = model.params.clone();
    grad_check(&mut params, 1e-3, 200, 5, |p| {
        let m = Backbone {
            params: p.to_vec(),
            ..model.clone()
        };
        let mut g = m.zeros_like();
        let (loss, sig) = m.loss_grad(&x, 2, &mut g).unwrap();
        Evaluation {
            loss,
            grads: g,
            signature: sig,
        }
    })
}

/// 32 columns × 48 rows around a fixture hyperbola, which keeps the
/// detector check fast.
pub fn detector_crop(seed: u64) -> (GrayImage, Vec<BBox>) {
    let s = super::hyperbola_sample(0, seed);
    let b = s.boxes[0];
    let x0 = ((b.xmin + b.xmax) / 2.0 - 16.0).clamp(0.0, (s.image.width - 32) as f64) as usize;
    let y0 = (b.ymin - 4.0).clamp(0.0, (s.image.height - 48) as f64) as usize;
    let mut px = Vec::with_capacity(32 * 48);
    for y in y0..y0 + 48 {
        px.extend_from_slice(&s.image.pixels[y * s.image.width + x0..y * s.image.width + x0 + 32]);
    }
    let gt = BBox::new(b.xmin - x0 as f64, b.ymin - y0 as f64, b.xmax - x0 as f64, b.ymax - y0 as f64).clipped(32.0, 48.0);
    (GrayImage::new(32, 48, px).unwrap(), vec![gt])
}

/// Result of checking the joint two-stage loss.
pub struct DetectorCheck {
    pub report: GradCheckReport,
    /// Worst relative error over up to 20 entries of each head tensor.
    pub heads: Vec<(&'static str, f64)>,
    /// Max relative error when the analytic gradients are scaled by 1.01;
    /// about 0.0099 unless the checked gradients are too small to matter.
    pub corrupted: f64,
}

/// Two-stage loss in f64 on `img` with heads drawn from U(−0.2, 0.2) so
/// every path carries gradient. Proposals are frozen after the first pass
/// so the loss is a fixed function of the weights.
pub fn detector_check(pretrained: &Weights, img: &GrayImage, gts: &[BBox]) -> DetectorCheck {
    let model = DetectorModel::init(pretrained, DetectorConfig::default(), TrainConfig::default(), 2).unwrap();
    let mut params: Vec<Tensor<f64>> = model.params.iter().map(|p| p.cast()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for p in &mut params[RPN_W..] {
        p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    let cfg = DetectorConfig::default();
    let x = image_tensor::<f64>(img);
    let mut grads: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
    let base = detector_loss(&params, &cfg, &x, gts, None, 17, &mut grads).unwrap();
    let props = base.proposals.clone();
    assert!(props.len() > gts.len(), "RPN produced no proposals");
    let eval = |p: &[Tensor<f64>]| {
        let mut g: Vec<Tensor<f64>> = p.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        let out = detector_loss(p, &cfg, &x, gts, Some(&props), 17, &mut g).unwrap();
        Evaluation {
            loss: out.parts.total(),
            grads: g,
            signature: out.signature,
        }
    };
    let report = grad_check(&mut params, 1e-5, 300, 21, eval);
    let corrupted = grad_check(&mut params, 1e-5, 60, 22, |p| {
        let mut e = eval(p);
        e.grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= 1.01));
        e
    })
    .max_rel_error;

    let mut heads = Vec::new();
    for k in RPN_W..=REG_B {
        let mut sub = params.clone();
        let n = sub[k].len();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut worst = 0.0f64;
        let base = eval(&sub);
        for _ in 0..n.min(20) {
            let j = rng.random_range(0..n);
            let w0 = sub[k].data[j];
            sub[k].data[j] = w0 + 1e-5;
            let plus = eval(&sub);
            sub[k].data[j] = w0 - 1e-5;
            let minus = eval(&sub);
            sub[k].data[j] = w0;
            // a kink between the two probes makes the difference meaningless
            if plus.signature != base.signature || minus.signature != base.signature {
                continue;
            }
            let numeric = (plus.loss - minus.loss) / 2e-5;
            worst = worst.max(relative_error(base.grads[k].data[j], numeric));
        }
        heads.push((HEAD_NAMES[k - RPN_W], worst));
    }
    DetectorCheck { report, heads, corrupted }
}
