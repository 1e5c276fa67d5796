//! Reliability curves (model/expert deferral trade-off) and conventional metrics.
//!
//! A reliability curve ranks validation samples by the entropy of the model's softmax and
//! hands the least confident ones to an oracle expert. For a deferral fraction `p` the
//! `ceil(p * N)` highest-entropy samples are deferred (ties go to the lower sample index
//! first); the reported accuracy is `(correct among retained + deferred) / N`, i.e. the
//! overall fraction of correct labels.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{argmax, hard_calibration_error_matrix, softmax_with_entropy, LogitModel};
use crate::data::{encode_labels, format_f64};
use crate::error::{check_len, Error, Result};
use crate::scalar::Scalar;

/// Deferral fractions `0, 0.05, ..., 1`.
pub fn default_fraction_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityCurve {
    pub predictor_id: String,
    pub fractions: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl ReliabilityCurve {
    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }

    /// `fraction,accuracy` rows, values with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,accuracy\n");
        for (p, a) in self.fractions.iter().zip(&self.accuracies) {
            out.push_str(&format!("{},{}\n", format_f64(*p), format_f64(*a)));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path, predictor_id: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        let mut fractions = Vec::new();
        let mut accuracies = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    msg: format!("`{s}` is not a number"),
                })
            };
            fractions.push(parse(&rec[0])?);
            accuracies.push(parse(&rec[1])?);
        }
        Ok(Self {
            predictor_id: predictor_id.to_string(),
            fractions,
            accuracies,
        })
    }
}

/// Samples in deferral order: highest entropy first, lower index first on ties.
pub fn deferral_order(entropies: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[b].total_cmp(&entropies[a]).then(a.cmp(&b)));
    order
}

fn deferral_count(p: f64, n: usize) -> usize {
    // tolerance keeps grid points such as 3/20 from rounding up an extra sample
    (((p * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn curve_from_order(correct: &[bool], order: &[usize], fractions: &[f64]) -> Vec<f64> {
    let n = correct.len();
    // correct_prefix[m] = number of correct predictions among the first m deferred samples
    let mut correct_prefix = vec![0usize; n + 1];
    for (m, &i) in order.iter().enumerate() {
        correct_prefix[m + 1] = correct_prefix[m] + usize::from(correct[i]);
    }
    let total_correct = correct_prefix[n];
    fractions
        .iter()
        .map(|&p| {
            let m = deferral_count(p, n);
            let retained_correct = total_correct - correct_prefix[m];
            (retained_correct + m) as f64 / n as f64
        })
        .collect()
}

pub fn reliability_curve(
    predictor_id: &str,
    entropies: &[f64],
    predicted: &[usize],
    truth: &[usize],
    fractions: &[f64],
) -> Result<ReliabilityCurve> {
    check_len("predicted classes", entropies.len(), predicted.len())?;
    check_len("true classes", entropies.len(), truth.len())?;
    if entropies.is_empty() {
        return Err(Error::InvalidInput("reliability curve needs at least one sample".into()));
    }
    if let Some(p) = fractions.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("deferral fraction {p} outside [0, 1]")));
    }
    let correct: Vec<bool> = predicted.iter().zip(truth).map(|(a, b)| a == b).collect();
    let order = deferral_order(entropies);
    Ok(ReliabilityCurve {
        predictor_id: predictor_id.to_string(),
        fractions: fractions.to_vec(),
        accuracies: curve_from_order(&correct, &order, fractions),
    })
}

/// Mean over `trials` uniformly random deferral orders of the mean-over-grid accuracy.
pub fn random_deferral_mean_accuracy(
    predicted: &[usize],
    truth: &[usize],
    fractions: &[f64],
    trials: usize,
    seed: u64,
) -> Result<f64> {
    check_len("true classes", predicted.len(), truth.len())?;
    if predicted.is_empty() || trials == 0 || fractions.is_empty() {
        return Err(Error::InvalidInput("random deferral baseline needs samples, trials and fractions".into()));
    }
    let correct: Vec<bool> = predicted.iter().zip(truth).map(|(a, b)| a == b).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..correct.len()).collect();
    let mut total = 0.0;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        let accs = curve_from_order(&correct, &order, fractions);
        total += accs.iter().sum::<f64>() / accs.len() as f64;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAccuracy {
    pub value: f64,
    /// Classes absent from the truth labels, skipped in the average.
    pub missing_classes: Vec<usize>,
}

/// Unweighted mean of per-class recall over the classes present in `truth`.
pub fn macro_accuracy(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<MacroAccuracy> {
    check_len("true classes", predicted.len(), truth.len())?;
    if truth.is_empty() {
        return Err(Error::InvalidInput("macro accuracy of an empty set".into()));
    }
    let mut hits = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if t >= num_classes {
            return Err(Error::Index {
                index: t,
                len: num_classes,
            });
        }
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| support[c] > 0).collect();
    let value = present
        .iter()
        .map(|&c| hits[c] as f64 / support[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok(MacroAccuracy {
        value,
        missing_classes: (0..num_classes).filter(|&c| support[c] == 0).collect(),
    })
}

/// Binary ROC AUC via the Mann-Whitney rank sum with mid-ranks for ties.
/// Returns `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        // ranks start..end (1-based: start+1 ..= end) share their mean
        let mid_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_group = idx[start..end].iter().filter(|&&i| positive[i]).count();
        rank_sum_pos += mid_rank * pos_in_group as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedAuc {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without positives or without negatives; excluded and weights renormalised.
    pub excluded_classes: Vec<usize>,
}

/// One-vs-rest AUC per class, averaged with weights proportional to class support.
pub fn weighted_auc(scores: ArrayView2<'_, f64>, truth: &[usize], num_classes: usize) -> Result<WeightedAuc> {
    check_len("score rows", truth.len(), scores.nrows())?;
    check_len("score columns", num_classes, scores.ncols())?;
    let mut per_class = Vec::with_capacity(num_classes);
    let mut weighted = 0.0;
    let mut weight_total = 0.0;
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let col: Vec<f64> = scores.column(c).to_vec();
        let auc = binary_auc(&col, &positive);
        match auc {
            Some(a) => {
                let support = positive.iter().filter(|&&p| p).count() as f64;
                weighted += a * support;
                weight_total += support;
            }
            None => excluded.push(c),
        }
        per_class.push(auc);
    }
    if weight_total == 0.0 {
        return Err(Error::InvalidInput(
            "no class has both positive and negative samples".into(),
        ));
    }
    Ok(WeightedAuc {
        value: weighted / weight_total,
        per_class,
        excluded_classes: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor_id: String,
    pub n: usize,
    pub plain_accuracy: f64,
    pub macro_accuracy: f64,
    pub weighted_auc: f64,
    /// Per-class interval coverage; only for models that produce intervals.
    pub coverage: Option<Vec<f64>>,
    pub calibration_error: Option<f64>,
    pub curve: ReliabilityCurve,
    /// Reliability accuracies are overall (micro) fractions correct.
    pub curve_accuracy: String,
    pub macro_missing_classes: Vec<usize>,
    pub auc_excluded_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    /// Confidence level used for the coverage/calibration entries.
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fractions: default_fraction_grid(),
            alpha: 0.7,
        }
    }
}

/// Per-sample outputs of a model on a set of latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub probabilities: Array2<f64>,
    pub entropies: Vec<f64>,
    pub predicted: Vec<usize>,
}

pub fn predict_all<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    latents: ArrayView2<'_, T>,
) -> Result<Predictions> {
    let logits = model.logits_batch(latents)?;
    let k = logits.ncols();
    let mut probabilities = Array2::zeros((logits.nrows(), k));
    let mut entropies = Vec::with_capacity(logits.nrows());
    let mut predicted = Vec::with_capacity(logits.nrows());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let row = row.to_vec();
        let sm = softmax_with_entropy(&row);
        for (j, p) in sm.rho.iter().enumerate() {
            probabilities[[i, j]] = p.as_f64();
        }
        entropies.push(sm.entropy.as_f64());
        predicted.push(argmax(&row));
    }
    Ok(Predictions {
        probabilities,
        entropies,
        predicted,
    })
}

pub fn evaluate<T: Scalar, M: LogitModel<T> + ?Sized>(
    predictor_id: &str,
    model: &M,
    latents: ArrayView2<'_, T>,
    truth: &[usize],
    config: &EvalConfig,
) -> Result<EvalReport> {
    check_len("evaluation labels", latents.nrows(), truth.len())?;
    let k = model.num_classes();
    let preds = predict_all(model, latents)?;
    let plain = preds
        .predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count() as f64
        / truth.len().max(1) as f64;
    let macro_acc = macro_accuracy(&preds.predicted, truth, k)?;
    let auc = weighted_auc(preds.probabilities.view(), truth, k)?;
    let curve = reliability_curve(
        predictor_id,
        &preds.entropies,
        &preds.predicted,
        truth,
        &config.fractions,
    )?;
    let (coverage, calibration_error) = match model.widths_batch(latents) {
        Some(widths) => {
            let widths = widths?;
            let logits = model.logits_batch(latents)?;
            let targets = encode_labels::<T>(truth, k)?;
            let err = hard_calibration_error_matrix(logits.view(), widths.view(), targets.view(), config.alpha)?;
            (Some(err.coverage), Some(err.total))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        predictor_id: predictor_id.to_string(),
        n: truth.len(),
        plain_accuracy: plain,
        macro_accuracy: macro_acc.value,
        weighted_auc: auc.value,
        coverage,
        calibration_error,
        curve,
        curve_accuracy: "micro".into(),
        macro_missing_classes: macro_acc.missing_classes,
        auc_excluded_classes: auc.excluded_classes,
    })
}
