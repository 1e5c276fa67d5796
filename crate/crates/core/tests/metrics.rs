mod common;

use calibra_core::calib::{hard_calibration_error, PredictionInterval};
use calibra_core::data::encode_label;
use calibra_core::reliability::{
    default_fraction_grid, macro_accuracy, random_deferral_mean_accuracy, reliability_curve, weighted_auc,
    ReliabilityCurve,
};
use calibra_core::ssim::ssim;
use common::*;
use ndarray::{array, Array2};
use rand::Rng;

#[test]
fn weighted_auc_matches_pairwise_oracle() {
    let err = auc_oracle_max_error();
    assert!(err < 1e-12, "max error {err:e}");
}

#[test]
fn hard_error_matches_direct_counting() {
    let err = hard_error_oracle_max_error();
    assert!(err < 1e-12, "max error {err:e}");
}

#[test]
fn constant_image_ssim_is_the_luminance_term() {
    let err = ssim_constant_image_max_error();
    assert!(err < 1e-9, "max error {err:e}");
}

#[test]
fn hard_error_worked_examples() {
    let k = 7;
    let labels: Vec<_> = (0..10).map(|i| encode_label::<f64>(i % k, k).unwrap()).collect();
    let covering: Vec<_> = labels
        .iter()
        .map(|l| PredictionInterval {
            y_hat: l.logits.clone(),
            delta: vec![0.5; k],
        })
        .collect();
    let e = hard_calibration_error(&covering, &labels, 0.7).unwrap();
    assert!(e.per_class.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    assert!((e.total - 2.1).abs() < 1e-12);

    // first five intervals contain their targets, the last five are shifted away
    let half: Vec<_> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| PredictionInterval {
            y_hat: l.logits.iter().map(|v| if i < 5 { *v } else { v + 3.0 }).collect(),
            delta: vec![0.5; k],
        })
        .collect();
    let e = hard_calibration_error(&half, &labels, 0.7).unwrap();
    assert!((e.total - 1.4).abs() < 1e-12);
    assert!(hard_calibration_error::<f64>(&[], &[], 0.7).is_err());
}

#[test]
fn auc_edge_cases() {
    let truth = [0, 1, 1, 0];
    let separating = array![[0.9, 0.1], [0.2, 0.8], [0.3, 0.7], [0.6, 0.4]];
    assert_eq!(weighted_auc(separating.view(), &truth, 2).unwrap().value, 1.0);
    let constant = Array2::from_elem((4, 2), 0.5);
    let r = weighted_auc(constant.view(), &truth, 2).unwrap();
    assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);

    // class 2 never occurs: excluded, the others renormalised
    let three = array![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.2, 0.7, 0.1], [0.7, 0.2, 0.1]];
    let r = weighted_auc(three.view(), &truth, 3).unwrap();
    assert_eq!(r.excluded_classes, vec![2]);
    assert_eq!(r.value, 1.0);
}

#[test]
fn macro_accuracy_examples() {
    let all = macro_accuracy(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
    assert_eq!(all.value, 1.0);
    // class 0 is 9 of 10 samples and always right; class 1 always wrong
    let truth = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
    let pred = [0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
    assert_eq!(macro_accuracy(&pred, &truth, 2).unwrap().value, 0.5);
    let skipped = macro_accuracy(&[0, 1], &[0, 0], 3).unwrap();
    assert_eq!(skipped.missing_classes, vec![1, 2]);
    assert_eq!(skipped.value, 0.5);
    assert!(macro_accuracy(&[], &[], 3).is_err());
}

#[test]
fn random_predictions_have_chance_macro_accuracy() {
    let mut r = rng(11);
    let k = 7;
    let truth: Vec<usize> = (0..7000).map(|_| r.random_range(0..k)).collect();
    let pred: Vec<usize> = (0..7000).map(|_| r.random_range(0..k)).collect();
    let m = macro_accuracy(&pred, &truth, k).unwrap().value;
    assert!((m - 1.0 / 7.0).abs() < 0.02, "macro accuracy {m}");
}

#[test]
fn curve_endpoints_and_shape() {
    let mut r = rng(12);
    let n = 97;
    let entropies: Vec<f64> = (0..n).map(|_| r.random()).collect();
    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
    let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
    let curve = reliability_curve("m", &entropies, &pred, &truth, &default_fraction_grid()).unwrap();
    let plain = pred.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / n as f64;
    assert_eq!(curve.accuracies[0], plain);
    assert_eq!(*curve.accuracies.last().unwrap(), 1.0);
    assert!(curve.accuracies.windows(2).all(|w| w[0] <= w[1]));
    assert!(reliability_curve("m", &entropies[1..], &pred, &truth, &[0.0]).is_err());
}

#[test]
fn random_deferral_is_deterministic_in_seed() {
    let pred = [0, 1, 1, 0, 2, 2, 1];
    let truth = [0, 1, 0, 0, 1, 2, 2];
    let grid = default_fraction_grid();
    let a = random_deferral_mean_accuracy(&pred, &truth, &grid, 100, 5).unwrap();
    let b = random_deferral_mean_accuracy(&pred, &truth, &grid, 100, 5).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn curve_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    let curve = ReliabilityCurve {
        predictor_id: "m".into(),
        fractions: default_fraction_grid(),
        accuracies: (0..21).map(|i| (f64::from(i) / 21.0).sqrt() * 0.1 + 0.9 - 0.1 / 3.0).collect(),
    };
    curve.write_csv(&path).unwrap();
    let back = ReliabilityCurve::read_csv(&path, "m").unwrap();
    assert_eq!(back, curve);
}

#[test]
fn ssim_identity_and_range() {
    let mut r = rng(13);
    for _ in 0..20 {
        let (h, w) = (r.random_range(4..=20), r.random_range(4..=20));
        let a: Vec<f64> = (0..h * w * 3).map(|_| r.random()).collect();
        let b: Vec<f64> = (0..h * w * 3).map(|_| r.random()).collect();
        assert!((ssim(&a, &a, h, w, 3).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(&a, &b, h, w, 3).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert_eq!(s, ssim(&b, &a, h, w, 3).unwrap());
    }
    assert!(ssim(&[0.0; 12], &[0.0; 11], 2, 2, 3).is_err());
}
