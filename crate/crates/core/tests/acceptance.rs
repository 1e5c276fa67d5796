//! End-to-end acceptance run on the default synthetic dataset. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use calibra_core::calib::{
    softmax_with_entropy, train_alternating, train_ce_baseline, BaselineConfig, BaselinePredictor, CalibConfig,
    TrainedPredictor,
};
use calibra_core::checkpoint::Checkpoint;
use calibra_core::counterfactual::{generate_evidence, CfRequest, EntropySign, EvidenceResult, DEFAULT_ETA1_GRID};
use calibra_core::data::{encode_label, generate_dataset, stratified_split, GenerateConfig};
use calibra_core::reliability::{evaluate, predict_all, random_deferral_mean_accuracy, EvalConfig, EvalReport};
use calibra_core::vae::{encode_means, latent_covariance, mean_abs_off_diagonal, train_vae, VaeConfig, VaeModel};
use common::*;
use ndarray::{Array2, Axis};

const GRADIENT_INSTANCES: u64 = 60;
const CF_ANCHORS: usize = 100;
const PREDICTOR_SEED: u64 = 2;

struct Outcome {
    failures: Vec<&'static str>,
}

impl Outcome {
    fn record(&mut self, name: &'static str, pass: bool, detail: String, started: Instant) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        if !pass {
            self.failures.push(name);
        }
    }
}

struct Pipeline {
    vae: VaeModel<f64>,
    vae_plain: VaeModel<f64>,
    z_train: Array2<f64>,
    z_val: Array2<f64>,
    val_images: Array2<f64>,
    y_train: Vec<usize>,
    y_val: Vec<usize>,
    calib_config: CalibConfig,
    baseline_config: BaselineConfig,
    predictor: TrainedPredictor<f64>,
    baseline: BaselinePredictor<f64>,
    vae_secs: f64,
    predictor_secs: f64,
    baseline_secs: f64,
}

fn build_pipeline() -> Pipeline {
    let t = Instant::now();
    let data = generate_dataset(&GenerateConfig::default()).expect("dataset");
    let labels = data.labels();
    let split = stratified_split(&labels, 0.2, 7).expect("split");
    let images = data.image_matrix::<f64>();
    let train_images = images.select(Axis(0), &split.train);
    let val_images = images.select(Axis(0), &split.val);
    let shape = [data.manifest.height, data.manifest.width, data.manifest.channels];
    println!("     dataset n={} train={} val={} [{:.1}s]", data.len(), split.train.len(), split.val.len(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let vae = train_vae(train_images.view(), shape, &VaeConfig::default()).expect("vae");
    println!("     vae trained, final loss {:.3} [{:.1}s]", vae.log.last().unwrap().loss, t.elapsed().as_secs_f64());
    let plain_config = VaeConfig {
        lambda_od: 0.0,
        lambda_d: 0.0,
        ..VaeConfig::default()
    };
    let vae_plain = train_vae(train_images.view(), shape, &plain_config).expect("plain vae");
    let vae_secs = t.elapsed().as_secs_f64();
    println!("     unpenalised vae trained [{vae_secs:.1}s for both]");

    let z_train = encode_means(&vae, train_images.view()).expect("encode");
    let z_val = encode_means(&vae, val_images.view()).expect("encode");
    let y_train: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let y_val: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();

    let t = Instant::now();
    let calib_config = CalibConfig {
        seed: PREDICTOR_SEED,
        ..CalibConfig::default()
    };
    let predictor = train_alternating(z_train.view(), &y_train, 7, &calib_config).expect("predictor");
    let predictor_secs = t.elapsed().as_secs_f64();
    println!("     calibrated predictor trained, {} alternations [{predictor_secs:.1}s]", predictor.log.len());
    let t = Instant::now();
    let baseline_config = BaselineConfig {
        seed: PREDICTOR_SEED,
        ..BaselineConfig::default()
    };
    let baseline = train_ce_baseline(z_train.view(), &y_train, 7, &baseline_config).expect("baseline");
    let baseline_secs = t.elapsed().as_secs_f64();
    println!("     cross-entropy baseline trained [{baseline_secs:.1}s]");

    Pipeline {
        vae,
        vae_plain,
        z_train,
        z_val,
        val_images,
        y_train,
        y_val,
        calib_config,
        baseline_config,
        predictor,
        baseline,
        vae_secs,
        predictor_secs,
        baseline_secs,
    }
}

fn gradient_fidelity(out: &mut Outcome) {
    let t = Instant::now();
    let families: [(&str, fn(u64) -> f64); 5] = [
        ("network", network_instance),
        ("soft-calibration", soft_calibration_instance),
        ("hinge", hinge_instance),
        ("cross-entropy", cross_entropy_instance),
        ("counterfactual", cf_objective_instance),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, instance) in families {
        let worst = (0..GRADIENT_INSTANCES).map(instance).fold(0.0, f64::max);
        pass &= worst < 1e-4;
        parts.push(format!("{name} {worst:.1e}"));
    }
    out.record(
        "gradient fidelity",
        pass && t.elapsed().as_secs() < 60,
        format!("max rel. error over {GRADIENT_INSTANCES} instances each: {}", parts.join(", ")),
        t,
    );
}

fn label_encoding(out: &mut Outcome) {
    let t = Instant::now();
    let sm = softmax_with_entropy(&encode_label::<f64>(0, 7).unwrap().logits);
    let worst = sm.rho[1..].iter().map(|p| (p - 0.0383).abs()).fold(0.0, f64::max);
    out.record(
        "label encoding",
        worst <= 0.0005,
        format!("positive {:.4}, negatives {:.4}", sm.rho[0], sm.rho[1]),
        t,
    );
}

fn coverage(out: &mut Outcome, p: &Pipeline, report: &EvalReport) {
    let t = Instant::now();
    let cov = report.coverage.clone().expect("interval model");
    let pass = cov.iter().all(|c| (0.6..=0.8).contains(c));
    let shown: Vec<String> = cov.iter().map(|c| format!("{c:.3}")).collect();
    out.record(
        "calibration coverage",
        pass && p.predictor_secs < 600.0,
        format!("held-out per-class coverage [{}]", shown.join(", ")),
        t,
    );
}

fn reliability(out: &mut Outcome, p: &Pipeline, cal: &EvalReport, ce: &EvalReport) {
    let t = Instant::now();
    // accuracies are multiples of 1/n, compared with a representation allowance
    let allowance = 1e-9;
    let worst_gap = cal
        .curve
        .accuracies
        .iter()
        .zip(&ce.curve.accuracies)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    let pointwise = worst_gap >= -0.01 - allowance;
    let mean_higher = cal.curve.mean_accuracy() > ce.curve.mean_accuracy();
    let endpoints = [cal, ce].iter().all(|r| {
        r.curve.accuracies.last() == Some(&1.0) && r.curve.accuracies.first() == Some(&r.plain_accuracy)
    });
    out.record(
        "reliability vs baseline",
        pointwise && mean_higher && endpoints && p.predictor_secs + p.baseline_secs < 900.0,
        format!(
            "mean {:.4} vs {:.4}, worst pointwise gap {:+.4}, endpoints ok: {endpoints}",
            cal.curve.mean_accuracy(),
            ce.curve.mean_accuracy(),
            worst_gap
        ),
        t,
    );
}

fn entropy_ranking(out: &mut Outcome, p: &Pipeline, cal: &EvalReport, ce: &EvalReport) {
    let t = Instant::now();
    let grid = EvalConfig::default().fractions;
    let runs = [
        ("calibrated", cal, predict_all(&p.predictor, p.z_val.view()).unwrap().predicted),
        ("baseline", ce, predict_all(&p.baseline, p.z_val.view()).unwrap().predicted),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (model, report, predicted) in runs {
        let random = random_deferral_mean_accuracy(&predicted, &p.y_val, &grid, 100, 11).unwrap();
        let ranked = report.curve.mean_accuracy();
        pass &= ranked > random;
        parts.push(format!("{model} {ranked:.4} vs random {random:.4}"));
    }
    out.record(
        "entropy-ranking dominance",
        pass && t.elapsed().as_secs() < 60,
        parts.join(", "),
        t,
    );
}

fn counterfactuals(out: &mut Outcome, p: &Pipeline) -> Vec<(CfRequest<f64>, EvidenceResult<f64>)> {
    let t = Instant::now();
    let anchors = CF_ANCHORS.min(p.z_val.nrows());
    let mut worst_rate = [1.0f64; 2];
    let mut mean_ae = vec![0.0; DEFAULT_ETA1_GRID.len()];
    let mut kept = Vec::new();
    for (s, sign) in [EntropySign::Minimize, EntropySign::Maximize].into_iter().enumerate() {
        for (e, &eta1) in DEFAULT_ETA1_GRID.iter().enumerate() {
            let mut moved = 0;
            for i in 0..anchors {
                let req = CfRequest {
                    entropy_sign: sign,
                    ..CfRequest::new(p.z_val.row(i).to_vec(), eta1)
                };
                let ev = generate_evidence(&req, &p.predictor, &p.vae, Some(p.y_val[i])).unwrap();
                let ok = match sign {
                    EntropySign::Minimize => ev.rho.entropy < ev.anchor_entropy,
                    EntropySign::Maximize => ev.rho.entropy > ev.anchor_entropy,
                };
                moved += usize::from(ok);
                if sign == EntropySign::Minimize {
                    mean_ae[e] += ev.ae_z / anchors as f64;
                }
                if i < 3 {
                    kept.push((req, ev));
                }
            }
            worst_rate[s] = worst_rate[s].min(moved as f64 / anchors as f64);
        }
    }
    let monotone = mean_ae.windows(2).all(|w| w[1] <= w[0]);
    let pass = worst_rate.iter().all(|&r| r >= 0.9) && monotone && t.elapsed().as_secs() < 600;
    let ae: Vec<String> = mean_ae.iter().map(|v| format!("{v:.4}")).collect();
    out.record(
        "counterfactual behaviour",
        pass,
        format!(
            "{anchors} anchors, lowest rate over the eta1 grid: entropy down {:.2}, up {:.2}; mean AE(z) by eta1 [{}]",
            worst_rate[0],
            worst_rate[1],
            ae.join(", ")
        ),
        t,
    );
    kept
}

fn dip_decorrelation(out: &mut Outcome, p: &Pipeline) {
    let t = Instant::now();
    let penalised = mean_abs_off_diagonal(&latent_covariance(p.z_val.view()));
    let plain_mus = encode_means(&p.vae_plain, p.val_images.view()).unwrap();
    let plain = mean_abs_off_diagonal(&latent_covariance(plain_mus.view()));
    out.record(
        "DIP decorrelation",
        penalised < plain && p.vae_secs < 900.0,
        format!("held-out mean |off-diagonal| {penalised:.4} with penalty vs {plain:.4} without"),
        t,
    );
}

fn metric_oracles(out: &mut Outcome) {
    let t = Instant::now();
    let auc = auc_oracle_max_error();
    let hard = hard_error_oracle_max_error();
    let ssim = ssim_constant_image_max_error();
    out.record(
        "metric oracles",
        auc < 1e-12 && hard < 1e-12 && ssim < 1e-9,
        format!("weighted AUC {auc:.1e}, hard error {hard:.1e}, constant-image SSIM {ssim:.1e}"),
        t,
    );
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn reproducibility(out: &mut Outcome, p: &Pipeline, evidences: &[(CfRequest<f64>, EvidenceResult<f64>)]) {
    let t = Instant::now();
    let mut checks = Vec::new();

    let data = generate_dataset(&GenerateConfig::default()).unwrap();
    let labels = data.labels();
    let split = stratified_split(&labels, 0.2, 7).unwrap();
    let train_images = data.image_matrix::<f64>().select(Axis(0), &split.train);
    let short = VaeConfig {
        epochs: 2,
        ..VaeConfig::default()
    };
    let again = train_vae(train_images.view(), p.vae.image_shape, &short).unwrap();
    checks.push(("vae log", again.log[..] == p.vae.log[..2]));

    let predictor = train_alternating(p.z_train.view(), &p.y_train, 7, &p.calib_config).unwrap();
    checks.push(("predictor", predictor == p.predictor));
    let baseline = train_ce_baseline(p.z_train.view(), &p.y_train, 7, &p.baseline_config).unwrap();
    checks.push(("baseline", baseline == p.baseline));

    let same_cf = evidences.iter().all(|(req, ev)| {
        let again = generate_evidence(req, &p.predictor, &p.vae, None).unwrap();
        bits(&again.z_hat) == bits(&ev.z_hat)
            && bits(&again.image) == bits(&ev.image)
            && bits(&again.objective_trace) == bits(&ev.objective_trace)
            && again.ssim.to_bits() == ev.ssim.to_bits()
    });
    checks.push(("counterfactuals", same_cf));

    let mut r = rng(99);
    let vae_back = Checkpoint::from_json(&Checkpoint::from_vae(&p.vae).to_json().unwrap())
        .unwrap()
        .to_vae::<f64>()
        .unwrap();
    let pred_back = Checkpoint::from_json(&Checkpoint::from_predictor(&p.predictor).to_json().unwrap())
        .unwrap()
        .to_predictor::<f64>()
        .unwrap();
    let base_back = Checkpoint::from_json(&Checkpoint::from_baseline(&p.baseline).to_json().unwrap())
        .unwrap()
        .to_baseline::<f64>()
        .unwrap();
    let mut round_trip = true;
    for _ in 0..100 {
        let z = random_vec(&mut r, 10, 3.0);
        let (a, b) = (p.predictor.predict_interval(&z).unwrap(), pred_back.predict_interval(&z).unwrap());
        round_trip &= bits(&a.y_hat) == bits(&b.y_hat) && bits(&a.delta) == bits(&b.delta);
        round_trip &= bits(&p.baseline.f.forward(&z).unwrap()) == bits(&base_back.f.forward(&z).unwrap());
        round_trip &= bits(&p.vae.decode(&z).unwrap()) == bits(&vae_back.decode(&z).unwrap());
    }
    let image = p.val_images.row(0).to_vec();
    round_trip &= bits(&p.vae.encode(&image).unwrap().mu) == bits(&vae_back.encode(&image).unwrap().mu);
    checks.push(("checkpoints", round_trip));

    let shown: Vec<String> = checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERENT" })).collect();
    out.record("reproducibility", checks.iter().all(|c| c.1), shown.join(", "), t);
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mut out = Outcome { failures: Vec::new() };

    gradient_fidelity(&mut out);
    label_encoding(&mut out);
    metric_oracles(&mut out);

    let p = build_pipeline();
    let eval = EvalConfig::default();
    let cal = evaluate("calibrated", &p.predictor, p.z_val.view(), &p.y_val, &eval).unwrap();
    let ce = evaluate("cross-entropy", &p.baseline, p.z_val.view(), &p.y_val, &eval).unwrap();
    println!(
        "     held-out accuracy {:.3} (calibrated) {:.3} (baseline), weighted AUC {:.3} {:.3}",
        cal.plain_accuracy, ce.plain_accuracy, cal.weighted_auc, ce.weighted_auc
    );

    coverage(&mut out, &p, &cal);
    reliability(&mut out, &p, &cal, &ce);
    entropy_ranking(&mut out, &p, &cal, &ce);
    dip_decorrelation(&mut out, &p);
    let evidences = counterfactuals(&mut out, &p);
    reproducibility(&mut out, &p, &evidences);

    println!("acceptance finished in {:.1}s", total.elapsed().as_secs_f64());
    if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", out.failures.join(", "));
        ExitCode::FAILURE
    }
}
