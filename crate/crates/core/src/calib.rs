//! Interval-calibrated classification over latent vectors.
//!
//! Two networks share the input: `f` predicts per-class logits `ŷ`, `g` predicts raw widths
//! mapped through softplus to non-negative half-widths `δ`. Targets are logit labels
//! (`+1` true class, `-2` elsewhere). Training alternates two phases per epoch:
//!
//! 1. **Width phase** (`g` only, `f` frozen): minimise a smooth version of the empirical
//!    interval calibration error `Σ_k |α − coverage_k|`, with the coverage indicator
//!    `1[ŷ−δ ≤ y ≤ ŷ+δ]` replaced by `σ((y−ŷ+δ)/s) · σ((ŷ+δ−y)/s)`.
//! 2. **Estimate phase** (`f` only, `g` frozen): minimise the hinge objective
//!    `Σ_k mean_i [max(0, ŷ−δ−y+τ) + max(0, y−ŷ−δ+τ)]`.
//!
//! A softmax cross-entropy network with the same architecture as `f` serves as the
//! comparison baseline.

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_labels, LogitLabel};
use crate::error::{check_len, Error, Result};
use crate::nn::{gather_rows, AdamConfig, AdamState, DenseNet, Gradients};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::vae::batch_ranges;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionInterval<T> {
    pub y_hat: Vec<T>,
    pub delta: Vec<T>,
}

impl<T: Scalar> PredictionInterval<T> {
    pub fn lower(&self) -> Vec<T> {
        self.y_hat.iter().zip(&self.delta).map(|(&y, &d)| y - d).collect()
    }

    pub fn upper(&self) -> Vec<T> {
        self.y_hat.iter().zip(&self.delta).map(|(&y, &d)| y + d).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxDist<T> {
    pub rho: Vec<T>,
    pub entropy: T,
}

impl<T: Scalar> SoftmaxDist<T> {
    pub fn argmax(&self) -> usize {
        argmax(&self.rho)
    }
}

/// Max-subtracted softmax and its natural-log entropy.
pub fn softmax_with_entropy<T: Scalar>(logits: &[T]) -> SoftmaxDist<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let shifted: Vec<T> = logits.iter().map(|&v| v - max).collect();
    let exps: Vec<T> = shifted.iter().map(|v| v.exp()).collect();
    let total: T = exps.iter().copied().sum();
    let log_total = total.ln();
    let rho: Vec<T> = exps.iter().map(|&e| e / total).collect();
    let entropy = rho
        .iter()
        .zip(&shifted)
        .filter(|(&p, _)| p > T::zero())
        .map(|(&p, &s)| -p * (s - log_total))
        .sum::<T>()
        .max(T::zero());
    SoftmaxDist { rho, entropy }
}

/// Index of the largest entry, first one on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationError {
    /// `|α − coverage_k|` per class.
    pub per_class: Vec<f64>,
    /// Fraction of samples whose target lies inside the interval, per class.
    pub coverage: Vec<f64>,
    pub total: f64,
}

/// Exact-count calibration error over matrices of logits, half-widths and target logits.
pub fn hard_calibration_error_matrix<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    alpha: f64,
) -> Result<CalibrationError> {
    let n = y_hat.nrows();
    if n == 0 {
        return Err(Error::InvalidInput(
            "calibration error needs at least one sample".into(),
        ));
    }
    check_shapes(y_hat, delta, targets)?;
    let k = y_hat.ncols();
    let mut covered = vec![0usize; k];
    Zip::indexed(y_hat)
        .and(delta)
        .and(targets)
        .for_each(|(_, c), &y, &d, &t| {
            if y - d <= t && t <= y + d {
                covered[c] += 1;
            }
        });
    let coverage: Vec<f64> = covered.iter().map(|&c| c as f64 / n as f64).collect();
    let per_class: Vec<f64> = coverage.iter().map(|c| (alpha - c).abs()).collect();
    let total = per_class.iter().sum();
    Ok(CalibrationError {
        per_class,
        coverage,
        total,
    })
}

pub fn hard_calibration_error<T: Scalar>(
    preds: &[PredictionInterval<T>],
    labels: &[LogitLabel<T>],
    alpha: f64,
) -> Result<CalibrationError> {
    check_len("calibration labels", preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::InvalidInput(
            "calibration error needs at least one sample".into(),
        ));
    }
    let k = preds[0].y_hat.len();
    let stack = |rows: Vec<&Vec<T>>| -> Result<Array2<T>> {
        let mut flat = Vec::with_capacity(rows.len() * k);
        for r in rows {
            check_len("interval width", k, r.len())?;
            flat.extend_from_slice(r);
        }
        Array2::from_shape_vec((preds.len(), k), flat).map_err(|e| Error::InvalidInput(e.to_string()))
    };
    let y_hat = stack(preds.iter().map(|p| &p.y_hat).collect())?;
    let delta = stack(preds.iter().map(|p| &p.delta).collect())?;
    let targets = stack(labels.iter().map(|l| &l.logits).collect())?;
    hard_calibration_error_matrix(y_hat.view(), delta.view(), targets.view(), alpha)
}

fn check_shapes<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
) -> Result<()> {
    check_len("interval rows", y_hat.nrows(), delta.nrows())?;
    check_len("interval classes", y_hat.ncols(), delta.ncols())?;
    check_len("target rows", y_hat.nrows(), targets.nrows())?;
    check_len("target classes", y_hat.ncols(), targets.ncols())
}

/// Smooth calibration loss and its gradient with respect to the half-widths `δ`.
pub fn soft_calibration_with_grad<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    alpha: T,
    temperature: T,
) -> Result<(T, Array2<T>)> {
    coverage_loss_with_grad(y_hat, delta, targets, alpha, temperature, Surrogate::Smooth)
}

/// How the width phase turns the calibration error into a gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    /// Gradient of `Σ_k |α − mean soft coverage|`.
    #[default]
    Smooth,
    /// Same per-sample sigmoid derivatives, but the sign of each class term comes from the
    /// exact coverage count, so widths stop moving where the counted coverage equals `α`.
    StraightThrough,
}

/// Smooth calibration loss with the gradient shaped by `surrogate`.
pub fn coverage_loss_with_grad<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    alpha: T,
    temperature: T,
    surrogate: Surrogate,
) -> Result<(T, Array2<T>)> {
    check_shapes(y_hat, delta, targets)?;
    let n = y_hat.nrows();
    let k = y_hat.ncols();
    let nt = T::of(n as f64);
    let one = T::one();
    let mut soft = Array2::<T>::zeros((n, k));
    let mut dsoft = Array2::<T>::zeros((n, k));
    let mut hard = Array2::<T>::zeros((n, k));
    Zip::from(&mut soft)
        .and(&mut dsoft)
        .and(&mut hard)
        .and(y_hat)
        .and(delta)
        .and(targets)
        .for_each(|s, ds, h, &y, &d, &t| {
            let lo = sigmoid((t - y + d) / temperature);
            let hi = sigmoid((y + d - t) / temperature);
            *s = lo * hi;
            *ds = (lo * (one - lo) * hi + lo * hi * (one - hi)) / temperature;
            if y - d <= t && t <= y + d {
                *h = one;
            }
        });
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros((n, k));
    for c in 0..k {
        let cov = soft.column(c).sum() / nt;
        loss = loss + (alpha - cov).abs();
        let gap = match surrogate {
            Surrogate::Smooth => alpha - cov,
            Surrogate::StraightThrough => alpha - hard.column(c).sum() / nt,
        };
        let outer = if gap > T::zero() {
            -one
        } else if gap < T::zero() {
            one
        } else {
            T::zero()
        };
        for i in 0..n {
            grad[[i, c]] = outer * dsoft[[i, c]] / nt;
        }
    }
    Ok((loss, grad))
}

/// Hinge objective and its gradient with respect to `ŷ` (widths held fixed).
pub fn hinge_with_grad<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    tau: T,
) -> Result<(T, Array2<T>)> {
    check_shapes(y_hat, delta, targets)?;
    let n = T::of(y_hat.nrows().max(1) as f64);
    let mut loss = T::zero();
    let mut grad = Array2::<T>::zeros(y_hat.raw_dim());
    Zip::from(&mut grad)
        .and(y_hat)
        .and(delta)
        .and(targets)
        .for_each(|g, &y, &d, &t| {
            let lower = y - d - t + tau;
            let upper = t - y - d + tau;
            if lower > T::zero() {
                loss = loss + lower;
                *g = *g + T::one() / n;
            }
            if upper > T::zero() {
                loss = loss + upper;
                *g = *g - T::one() / n;
            }
        });
    Ok((loss / n, grad))
}

pub fn hinge_loss<T: Scalar>(
    y_hat: ArrayView2<'_, T>,
    delta: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    tau: T,
) -> Result<T> {
    Ok(hinge_with_grad(y_hat, delta, targets, tau)?.0)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
) -> Result<(T, Array2<T>)> {
    check_len("cross-entropy labels", logits.nrows(), labels.len())?;
    let n = T::of(logits.nrows().max(1) as f64);
    let k = logits.ncols();
    let mut grad = Array2::<T>::zeros(logits.raw_dim());
    let mut loss = T::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        let c = labels[i];
        if c >= k {
            return Err(Error::Index { index: c, len: k });
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let log_z = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        loss = loss + log_z - row[c];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            grad[[i, j]] = (p - if j == c { T::one() } else { T::zero() }) / n;
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub alpha: f64,
    pub tau: f64,
    pub lr_f: f64,
    pub lr_g: f64,
    /// Maximum number of alternations (one width epoch plus one estimate epoch each).
    pub epochs: usize,
    pub batch_size: usize,
    /// Temperature `s` of the smooth coverage indicator.
    pub temperature: f64,
    #[serde(default)]
    pub surrogate: Surrogate,
    pub hidden: Vec<usize>,
    /// Alternations without meaningful improvement before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            tau: 0.05,
            lr_f: 3e-4,
            lr_g: 1e-4,
            epochs: 200,
            batch_size: 64,
            temperature: 0.04,
            surrogate: Surrogate::default(),
            hidden: vec![64, 128, 256, 64],
            patience: 10,
            min_improvement: 1e-4,
            seed: 1,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidField {
                field: "alpha",
                msg: format!("must lie in (0, 1), got {}", self.alpha),
            });
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidField {
                field: "tau",
                msg: format!("must be non-negative, got {}", self.tau),
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidField {
                field: "temperature",
                msg: format!("must be positive, got {}", self.temperature),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidField {
                field: "batch_size",
                msg: "must be positive".into(),
            });
        }
        Ok(())
    }

    fn layer_sizes(&self, d: usize, k: usize) -> Vec<usize> {
        let mut sizes = vec![d];
        sizes.extend(&self.hidden);
        sizes.push(k);
        sizes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibEpochLog {
    pub epoch: usize,
    pub hinge: f64,
    pub hard_calib_error: f64,
    pub soft_calib_loss: f64,
    pub accuracy: f64,
}

/// Anything that maps latent rows to class logits.
pub trait LogitModel<T: Scalar> {
    fn num_classes(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn logits_batch(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>>;

    /// Half-widths, for models that produce intervals.
    fn widths_batch(&self, _z: ArrayView2<'_, T>) -> Option<Result<Array2<T>>> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPredictor<T> {
    pub f: DenseNet<T>,
    pub g: DenseNet<T>,
    pub config: CalibConfig,
    pub log: Vec<CalibEpochLog>,
}

impl<T: Scalar> TrainedPredictor<T> {
    /// Untrained pair with the configured architecture.
    pub fn init(latent_dim: usize, num_classes: usize, config: CalibConfig) -> Result<Self> {
        config.validate()?;
        let sizes = config.layer_sizes(latent_dim, num_classes);
        let f = DenseNet::init(&sizes, config.seed)?;
        let g = DenseNet::init(&sizes, config.seed.wrapping_add(1))?;
        Self::from_parts(f, g, config)
    }

    pub fn from_parts(f: DenseNet<T>, g: DenseNet<T>, config: CalibConfig) -> Result<Self> {
        check_len("predictor input", f.input_dim(), g.input_dim())?;
        check_len("predictor classes", f.output_dim(), g.output_dim())?;
        Ok(Self {
            f,
            g,
            config,
            log: Vec::new(),
        })
    }

    pub fn predict_interval(&self, z: &[T]) -> Result<PredictionInterval<T>> {
        let y_hat = self.f.forward(z)?;
        let delta = self.g.forward(z)?.into_iter().map(softplus).collect();
        Ok(PredictionInterval { y_hat, delta })
    }

    /// `(ŷ, δ)` for a batch of latent rows.
    pub fn predict_batch(&self, z: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
        let y_hat = self.f.forward_batch(z)?;
        let delta = self.g.forward_batch(z)?.mapv(softplus);
        Ok((y_hat, delta))
    }

    /// Width-phase loss and gradient for `g`; `f` only contributes fixed estimates.
    pub fn calibration_phase_grad(
        &self,
        z: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
    ) -> Result<(T, Gradients<T>)> {
        let y_hat = self.f.forward_batch(z)?;
        let trace = self.g.trace(z)?;
        let raw = trace.output();
        let delta = raw.mapv(softplus);
        let (loss, mut d_delta) = coverage_loss_with_grad(
            y_hat.view(),
            delta.view(),
            targets,
            T::of(self.config.alpha),
            T::of(self.config.temperature),
            self.config.surrogate,
        )?;
        Zip::from(&mut d_delta).and(raw).for_each(|g, &r| *g = *g * sigmoid(r));
        let back = self.g.backward_trace(&trace, d_delta.view(), false)?;
        Ok((loss, back.grads))
    }

    /// Estimate-phase hinge loss and gradient for `f`; widths from `g` are constants.
    pub fn hinge_phase_grad(
        &self,
        z: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
    ) -> Result<(T, Gradients<T>)> {
        let delta = self.g.forward_batch(z)?.mapv(softplus);
        let trace = self.f.trace(z)?;
        let (loss, d_yhat) =
            hinge_with_grad(trace.output().view(), delta.view(), targets, T::of(self.config.tau))?;
        let back = self.f.backward_trace(&trace, d_yhat.view(), false)?;
        Ok((loss, back.grads))
    }

    /// Smooth calibration loss of the current networks on a batch.
    pub fn soft_calibration_loss(&self, z: ArrayView2<'_, T>, targets: ArrayView2<'_, T>) -> Result<T> {
        let (y_hat, delta) = self.predict_batch(z)?;
        Ok(soft_calibration_with_grad(
            y_hat.view(),
            delta.view(),
            targets,
            T::of(self.config.alpha),
            T::of(self.config.temperature),
        )?
        .0)
    }

    fn epoch_summary(
        &self,
        epoch: usize,
        z: ArrayView2<'_, T>,
        targets: ArrayView2<'_, T>,
        labels: &[usize],
    ) -> Result<CalibEpochLog> {
        let (y_hat, delta) = self.predict_batch(z)?;
        let hinge = hinge_loss(y_hat.view(), delta.view(), targets, T::of(self.config.tau))?;
        let hard = hard_calibration_error_matrix(y_hat.view(), delta.view(), targets, self.config.alpha)?;
        let soft = soft_calibration_with_grad(
            y_hat.view(),
            delta.view(),
            targets,
            T::of(self.config.alpha),
            T::of(self.config.temperature),
        )?
        .0;
        Ok(CalibEpochLog {
            epoch,
            hinge: hinge.as_f64(),
            hard_calib_error: hard.total,
            soft_calib_loss: soft.as_f64(),
            accuracy: accuracy_of(y_hat.view(), labels),
        })
    }
}

impl<T: Scalar> LogitModel<T> for TrainedPredictor<T> {
    fn num_classes(&self) -> usize {
        self.f.output_dim()
    }

    fn latent_dim(&self) -> usize {
        self.f.input_dim()
    }

    fn logits_batch(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.f.forward_batch(z)
    }

    fn widths_batch(&self, z: ArrayView2<'_, T>) -> Option<Result<Array2<T>>> {
        Some(self.g.forward_batch(z).map(|raw| raw.mapv(softplus)))
    }
}

pub(crate) fn accuracy_of<T: Scalar>(logits: ArrayView2<'_, T>, labels: &[usize]) -> f64 {
    let correct = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &c)| argmax(&row.to_vec()) == c)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn validate_training_inputs<T: Scalar>(
    latents: ArrayView2<'_, T>,
    labels: &[usize],
    num_classes: usize,
    min_n: usize,
) -> Result<()> {
    check_len("training labels", latents.nrows(), labels.len())?;
    if latents.nrows() < min_n {
        return Err(Error::InvalidInput(format!(
            "need at least {min_n} samples, got {}",
            latents.nrows()
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("latent matrix contains non-finite values".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Index {
            index: bad,
            len: num_classes,
        });
    }
    Ok(())
}

/// Stepwise driver for the alternating optimisation; each phase updates one network only.
pub struct AlternatingTrainer<'a, T> {
    latents: ArrayView2<'a, T>,
    labels: &'a [usize],
    targets: Array2<T>,
    model: TrainedPredictor<T>,
    opt_f: AdamState<T>,
    opt_g: AdamState<T>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
    stale: usize,
}

impl<'a, T: Scalar> AlternatingTrainer<'a, T> {
    pub fn new(
        latents: ArrayView2<'a, T>,
        labels: &'a [usize],
        num_classes: usize,
        config: &CalibConfig,
    ) -> Result<Self> {
        config.validate()?;
        validate_training_inputs(latents, labels, num_classes, 2 * num_classes)?;
        let targets = encode_labels::<T>(labels, num_classes)?;
        let model = TrainedPredictor::init(latents.ncols(), num_classes, config.clone())?;
        let opt_f = AdamState::new(&model.f, AdamConfig::with_lr(config.lr_f))?;
        let opt_g = AdamState::new(&model.g, AdamConfig::with_lr(config.lr_g))?;
        Ok(Self {
            latents,
            labels,
            targets,
            model,
            opt_f,
            opt_g,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xca11b)),
            order: (0..latents.nrows()).collect(),
            epoch: 0,
            stale: 0,
        })
    }

    pub fn model(&self) -> &TrainedPredictor<T> {
        &self.model
    }

    pub fn into_model(self) -> TrainedPredictor<T> {
        self.model
    }

    /// One pass of width updates over shuffled mini-batches; `f` is read only.
    pub fn width_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        self.order.shuffle(&mut self.rng);
        for range in batch_ranges(self.order.len(), self.model.config.batch_size) {
            let idx = &self.order[range];
            let zb = gather_rows(self.latents, idx);
            let tb = gather_rows(self.targets.view(), idx);
            let (loss, grads) = self.model.calibration_phase_grad(zb.view(), tb.view())?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "calibration (width) phase produced a non-finite loss in epoch {epoch}"
                )));
            }
            self.opt_g
                .step(&mut self.model.g, &grads)
                .map_err(|e| phase_error("width", epoch, e))?;
        }
        Ok(())
    }

    /// One pass of hinge updates over shuffled mini-batches; `g` is read only.
    pub fn estimate_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        self.order.shuffle(&mut self.rng);
        for range in batch_ranges(self.order.len(), self.model.config.batch_size) {
            let idx = &self.order[range];
            let zb = gather_rows(self.latents, idx);
            let tb = gather_rows(self.targets.view(), idx);
            let (loss, grads) = self.model.hinge_phase_grad(zb.view(), tb.view())?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "hinge (estimate) phase produced a non-finite loss in epoch {epoch}"
                )));
            }
            self.opt_f
                .step(&mut self.model.f, &grads)
                .map_err(|e| phase_error("estimate", epoch, e))?;
        }
        Ok(())
    }

    /// Logs the finished alternation; returns `false` once patience is exhausted.
    pub fn finish_epoch(&mut self) -> Result<bool> {
        self.epoch += 1;
        let summary = self
            .model
            .epoch_summary(self.epoch, self.latents, self.targets.view(), self.labels)?;
        if let Some(prev) = self.model.log.last() {
            let calib_gain = prev.hard_calib_error - summary.hard_calib_error;
            let hinge_gain = prev.hinge - summary.hinge;
            if calib_gain < self.model.config.min_improvement && hinge_gain < self.model.config.min_improvement {
                self.stale += 1;
            } else {
                self.stale = 0;
            }
        }
        self.model.log.push(summary);
        Ok(self.stale < self.model.config.patience)
    }
}

/// Alternating width/estimate training. Deterministic in `config.seed`.
pub fn train_alternating<T: Scalar>(
    latents: ArrayView2<'_, T>,
    labels: &[usize],
    num_classes: usize,
    config: &CalibConfig,
) -> Result<TrainedPredictor<T>> {
    let mut trainer = AlternatingTrainer::new(latents, labels, num_classes, config)?;
    for _ in 0..config.epochs {
        trainer.width_epoch()?;
        trainer.estimate_epoch()?;
        if !trainer.finish_epoch()? {
            break;
        }
    }
    Ok(trainer.into_model())
}

fn phase_error(phase: &str, epoch: usize, e: Error) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("{phase} phase, epoch {epoch}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            epochs: 200,
            batch_size: 64,
            hidden: vec![64, 128, 256, 64],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpochLog {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub accuracy: f64,
}

/// Softmax cross-entropy classifier with the same architecture as `f`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePredictor<T> {
    pub f: DenseNet<T>,
    pub config: BaselineConfig,
    pub log: Vec<BaselineEpochLog>,
}

impl<T: Scalar> BaselinePredictor<T> {
    pub fn init(latent_dim: usize, num_classes: usize, config: BaselineConfig) -> Result<Self> {
        let mut sizes = vec![latent_dim];
        sizes.extend(&config.hidden);
        sizes.push(num_classes);
        let f = DenseNet::init(&sizes, config.seed)?;
        Ok(Self {
            f,
            config,
            log: Vec::new(),
        })
    }

    pub fn loss_grad(&self, z: ArrayView2<'_, T>, labels: &[usize]) -> Result<(T, Gradients<T>)> {
        let trace = self.f.trace(z)?;
        let (loss, d_logits) = cross_entropy_with_grad(trace.output().view(), labels)?;
        let back = self.f.backward_trace(&trace, d_logits.view(), false)?;
        Ok((loss, back.grads))
    }
}

impl<T: Scalar> LogitModel<T> for BaselinePredictor<T> {
    fn num_classes(&self) -> usize {
        self.f.output_dim()
    }

    fn latent_dim(&self) -> usize {
        self.f.input_dim()
    }

    fn logits_batch(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.f.forward_batch(z)
    }
}

pub fn train_ce_baseline<T: Scalar>(
    latents: ArrayView2<'_, T>,
    labels: &[usize],
    num_classes: usize,
    config: &BaselineConfig,
) -> Result<BaselinePredictor<T>> {
    if config.batch_size == 0 {
        return Err(Error::InvalidField {
            field: "batch_size",
            msg: "must be positive".into(),
        });
    }
    validate_training_inputs(latents, labels, num_classes, 2 * num_classes)?;
    let mut model = BaselinePredictor::init(latents.ncols(), num_classes, config.clone())?;
    let mut opt = AdamState::new(&model.f, AdamConfig::with_lr(config.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xba5e));
    let mut order: Vec<usize> = (0..latents.nrows()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for range in batch_ranges(order.len(), config.batch_size) {
            let idx = &order[range];
            let zb = gather_rows(latents, idx);
            let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_grad(zb.view(), &lb)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "cross-entropy became non-finite in epoch {epoch}"
                )));
            }
            opt.step(&mut model.f, &grads)?;
        }
        let logits = model.f.forward_batch(latents)?;
        let (ce, _) = cross_entropy_with_grad(logits.view(), labels)?;
        model.log.push(BaselineEpochLog {
            epoch,
            cross_entropy: ce.as_f64(),
            accuracy: accuracy_of(logits.view(), labels),
        });
    }
    Ok(model)
}
