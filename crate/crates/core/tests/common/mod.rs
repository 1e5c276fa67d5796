#![allow(dead_code)]

use calibra_core::calib::{BaselineConfig, BaselinePredictor, CalibConfig, TrainedPredictor};
use calibra_core::counterfactual::{cf_objective, cf_objective_with_grad, CfRequest, EntropySign};
use calibra_core::nn::DenseNet;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Replaces every bias with a random value so bias paths are exercised too.
pub fn randomize_biases(net: &mut DenseNet<f64>, rng: &mut impl Rng) {
    for l in 0..net.num_layers() {
        let (_, mut b) = net.layer_mut(l);
        b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
}

pub fn random_net(rng: &mut impl Rng, max_layers: usize, max_width: usize) -> DenseNet<f64> {
    let layers = rng.random_range(1..=max_layers);
    let sizes: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=max_width)).collect();
    let mut net = DenseNet::init(&sizes, rng.random()).unwrap();
    randomize_biases(&mut net, rng);
    net
}

/// Central differences of `loss` over every parameter, in `Gradients::flatten` order.
pub fn numeric_param_grad(net: &DenseNet<f64>, mut loss: impl FnMut(&DenseNet<f64>) -> f64) -> Vec<f64> {
    let h = FD_STEP;
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(net.param_count());
    for l in 0..net.num_layers() {
        let (rows, cols) = net.weights()[l].dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = net.weights()[l][[i, j]];
                probe.layer_mut(l).0[[i, j]] = orig + h;
                let up = loss(&probe);
                probe.layer_mut(l).0[[i, j]] = orig - h;
                let down = loss(&probe);
                probe.layer_mut(l).0[[i, j]] = orig;
                out.push((up - down) / (2.0 * h));
            }
        }
        for i in 0..net.biases()[l].len() {
            let orig = net.biases()[l][i];
            probe.layer_mut(l).1[i] = orig + h;
            let up = loss(&probe);
            probe.layer_mut(l).1[i] = orig - h;
            let down = loss(&probe);
            probe.layer_mut(l).1[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn numeric_vec_grad(x: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = FD_STEP;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = loss(&probe);
            probe[i] = x[i] - h;
            let down = loss(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn small_calib_config(rng: &mut impl Rng) -> CalibConfig {
    CalibConfig {
        hidden: vec![rng.random_range(3..=8), rng.random_range(3..=8)],
        seed: rng.random(),
        ..CalibConfig::default()
    }
}

pub fn small_predictor(rng: &mut impl Rng, d: usize, k: usize) -> TrainedPredictor<f64> {
    let mut p = TrainedPredictor::init(d, k, small_calib_config(rng)).unwrap();
    randomize_biases(&mut p.f, rng);
    randomize_biases(&mut p.g, rng);
    p
}

/// Random real-valued targets kept at least `margin` away from both hinge kinks.
pub fn targets_clear_of_kinks(
    rng: &mut impl Rng,
    y_hat: &Array2<f64>,
    delta: &Array2<f64>,
    tau: f64,
    margin: f64,
) -> Array2<f64> {
    Array2::from_shape_fn(y_hat.raw_dim(), |(i, c)| loop {
        let t: f64 = rng.random_range(-3.0..2.0);
        let lower = y_hat[[i, c]] - delta[[i, c]] - t + tau;
        let upper = t - y_hat[[i, c]] - delta[[i, c]] + tau;
        if lower.abs() > margin && upper.abs() > margin {
            break t;
        }
    })
}

/// Relative error of the parameter and input gradients of `u · net(x)`.
pub fn network_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let net = random_net(&mut r, 3, 8);
    let x = random_vec(&mut r, net.input_dim(), 1.5);
    let u = random_vec(&mut r, net.output_dim(), 1.0);
    let dot = |n: &DenseNet<f64>, x: &[f64]| -> f64 {
        n.forward(x).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
    };
    let back = net.backward(&x, &u).unwrap();
    let params = rel_err(&back.grads.flatten(), &numeric_param_grad(&net, |n| dot(n, &x)));
    let input = rel_err(&back.input_grad, &numeric_vec_grad(&x, |xp| dot(&net, xp)));
    params.max(input)
}

/// Targets within a few temperatures of an interval edge, where the soft indicator has slope.
pub fn targets_near_edges(rng: &mut impl Rng, p: &TrainedPredictor<f64>, z: &Array2<f64>) -> Array2<f64> {
    let (y_hat, delta) = p.predict_batch(z.view()).unwrap();
    let s = p.config.temperature;
    Array2::from_shape_fn(y_hat.dim(), |ix| {
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        y_hat[ix] + side * delta[ix] + rng.random_range(-3.0..3.0) * s
    })
}

/// Calibration-phase gradient with respect to the width network.
pub fn soft_calibration_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, k, n) = (r.random_range(2..=5), r.random_range(2..=4), r.random_range(3..=8));
    let p = small_predictor(&mut r, d, k);
    let z = random_matrix(&mut r, n, d, 1.5);
    let targets = targets_near_edges(&mut r, &p, &z);
    let (_, grads) = p.calibration_phase_grad(z.view(), targets.view()).unwrap();
    let numeric = numeric_param_grad(&p.g, |g| {
        let mut probe = p.clone();
        probe.g = g.clone();
        probe.soft_calibration_loss(z.view(), targets.view()).unwrap()
    });
    rel_err(&grads.flatten(), &numeric)
}

/// Hinge-phase gradient with respect to the estimator network.
pub fn hinge_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, k, n) = (r.random_range(2..=5), r.random_range(2..=4), r.random_range(3..=8));
    let p = small_predictor(&mut r, d, k);
    let z = random_matrix(&mut r, n, d, 1.5);
    let (y_hat, delta) = p.predict_batch(z.view()).unwrap();
    let tau = p.config.tau;
    let targets = targets_clear_of_kinks(&mut r, &y_hat, &delta, tau, 1e-3);
    let (_, grads) = p.hinge_phase_grad(z.view(), targets.view()).unwrap();
    let numeric = numeric_param_grad(&p.f, |f| {
        let y = f.forward_batch(z.view()).unwrap();
        calibra_core::calib::hinge_loss(y.view(), delta.view(), targets.view(), tau).unwrap()
    });
    rel_err(&grads.flatten(), &numeric)
}

pub fn cross_entropy_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, k, n) = (r.random_range(2..=5), r.random_range(2..=5), r.random_range(1..=8));
    let config = BaselineConfig {
        hidden: vec![r.random_range(3..=8), r.random_range(3..=8)],
        seed: r.random(),
        ..BaselineConfig::default()
    };
    let mut model = BaselinePredictor::init(d, k, config).unwrap();
    randomize_biases(&mut model.f, &mut r);
    let z = random_matrix(&mut r, n, d, 1.5);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let (_, grads) = model.loss_grad(z.view(), &labels).unwrap();
    let numeric = numeric_param_grad(&model.f, |f| {
        let mut probe = model.clone();
        probe.f = f.clone();
        probe.loss_grad(z.view(), &labels).unwrap().0
    });
    rel_err(&grads.flatten(), &numeric)
}

/// Counterfactual objective gradient with respect to the latent point.
pub fn cf_objective_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, k) = (r.random_range(2..=6), r.random_range(2..=5));
    let p = small_predictor(&mut r, d, k);
    let mut req = CfRequest::new(random_vec(&mut r, d, 1.5), r.random_range(0.01..2.0));
    req.eta2 = r.random_range(0.0..1.0);
    req.eta3 = r.random_range(0.0..1.0);
    req.entropy_sign = if r.random() {
        EntropySign::Minimize
    } else {
        EntropySign::Maximize
    };
    let z = random_vec(&mut r, d, 1.5);
    let (_, analytic) = cf_objective_with_grad(&z, &req, &p).unwrap();
    let numeric = numeric_vec_grad(&z, |zp| cf_objective(zp, &req, &p).unwrap());
    rel_err(&analytic, &numeric)
}

/// Pairwise AUC: P(score_pos > score_neg) + 0.5 P(tie), over every positive/negative pair.
pub fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

pub fn pairwise_weighted_auc(scores: &Array2<f64>, truth: &[usize], k: usize) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..k {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        if let Some(a) = pairwise_auc(&scores.column(c).to_vec(), &positive) {
            let support = positive.iter().filter(|&&p| p).count() as f64;
            num += a * support;
            den += support;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Largest gap between `weighted_auc` and the pairwise oracle. Every binary labelling of
/// every N ≤ 12 against tie-heavy scores, then random multi-class instances with N ≤ 12.
pub fn auc_oracle_max_error() -> f64 {
    use calibra_core::reliability::weighted_auc;
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    let mut check = |scores: &Array2<f64>, truth: &[usize], k: usize| {
        match (weighted_auc(scores.view(), truth, k), pairwise_weighted_auc(scores, truth, k)) {
            (Ok(got), Some(want)) => worst = worst.max((got.value - want).abs()),
            (Err(_), None) => {}
            (got, want) => panic!("disagreement on definedness: {got:?} vs {want:?}"),
        }
    };
    for n in 2..=12usize {
        let p: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..4u8)) / 4.0).collect();
        let scores = Array2::from_shape_fn((n, 2), |(i, c)| if c == 1 { p[i] } else { 1.0 - p[i] });
        for mask in 0..(1u32 << n) {
            let truth: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            check(&scores, &truth, 2);
        }
    }
    for _ in 0..3000 {
        let n = r.random_range(2..=12);
        let k = r.random_range(2..=5);
        let levels = r.random_range(2..=6u8);
        let scores = Array2::from_shape_fn((n, k), |_| f64::from(r.random_range(0..levels)) / f64::from(levels));
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        check(&scores, &truth, k);
    }
    worst
}

/// Largest gap between `hard_calibration_error_matrix` and explicit per-element counting.
pub fn hard_error_oracle_max_error() -> f64 {
    use calibra_core::calib::hard_calibration_error_matrix;
    let mut r = rng(78);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (n, k) = (r.random_range(1..=30), r.random_range(1..=8));
        let alpha = r.random_range(0.05..0.95);
        // quarter-step grid so that targets often land exactly on interval edges
        let grid = |r: &mut ChaCha8Rng, lo: i32, hi: i32| f64::from(r.random_range(lo..hi)) / 4.0;
        let y = Array2::from_shape_fn((n, k), |_| grid(&mut r, -8, 8));
        let d = Array2::from_shape_fn((n, k), |_| grid(&mut r, 0, 8));
        let t = Array2::from_shape_fn((n, k), |_| grid(&mut r, -12, 12));
        let got = hard_calibration_error_matrix(y.view(), d.view(), t.view(), alpha).unwrap();
        let mut total = 0.0;
        for c in 0..k {
            let mut inside = 0;
            for i in 0..n {
                let (lo, hi) = (y[[i, c]] - d[[i, c]], y[[i, c]] + d[[i, c]]);
                if lo <= t[[i, c]] && t[[i, c]] <= hi {
                    inside += 1;
                }
            }
            let err = (alpha - inside as f64 / n as f64).abs();
            worst = worst.max((got.per_class[c] - err).abs());
            total += err;
        }
        worst = worst.max((got.total - total).abs());
    }
    worst
}

/// Largest gap between SSIM of two constant images and the closed-form luminance term.
pub fn ssim_constant_image_max_error() -> f64 {
    use calibra_core::ssim::ssim;
    let c1 = 1e-4;
    let mut r = rng(79);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (a, b): (f64, f64) = (r.random(), r.random());
        let size = r.random_range(8..=20);
        let len = size * size * 3;
        let got = ssim(&vec![a; len], &vec![b; len], size, size, 3).unwrap();
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        worst = worst.max((got - want).abs());
    }
    worst
}
