//! Fully connected variational autoencoder with a DIP-VAE-I covariance penalty.
//!
//! The encoder maps an image to `(mu, logvar)`, the decoder maps a latent vector back to
//! pixels through a terminal sigmoid. Training minimises, per mini-batch,
//!
//! ```text
//! mean_i [ ||x_i - x̂_i||² + beta * KL(q(z|x_i) || N(0, I)) ] + dip_penalty(mu_batch)
//! ```
//!
//! where the penalty pushes the covariance of the posterior means towards the identity.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{gather_rows, split_columns, AdamConfig, AdamState, DenseNet};
use crate::scalar::{sigmoid, Scalar};

/// Log-variances produced by the encoder are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub mu: Vec<T>,
    pub logvar: Vec<T>,
}

/// `z = mu + exp(logvar / 2) * noise`.
pub fn reparameterize<T: Scalar>(enc: &EncoderOutput<T>, noise: &[T]) -> Result<Vec<T>> {
    check_len("reparameterize logvar", enc.mu.len(), enc.logvar.len())?;
    check_len("reparameterize noise", enc.mu.len(), noise.len())?;
    let half = T::of(0.5);
    Ok(enc
        .mu
        .iter()
        .zip(&enc.logvar)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (lv * half).exp() * e)
        .collect())
}

/// Closed-form `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn gaussian_kl<T: Scalar>(mu: &[T], logvar: &[T]) -> T {
    let half = T::of(0.5);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| half * (lv.exp() + m * m - T::one() - lv))
        .sum()
}

/// Squared-error reconstruction plus `beta` times the Gaussian KL term.
pub fn elbo_loss<T: Scalar>(x: &[T], x_hat: &[T], enc: &EncoderOutput<T>, beta: T) -> Result<T> {
    check_len("reconstruction", x.len(), x_hat.len())?;
    check_len("encoder logvar", enc.mu.len(), enc.logvar.len())?;
    let sse: T = x.iter().zip(x_hat).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sse + beta * gaussian_kl(&enc.mu, &enc.logvar))
}

/// Covariance of the rows of `mus`, normalised by the batch size.
pub fn latent_covariance<T: Scalar>(mus: ArrayView2<'_, T>) -> Array2<T> {
    let b = T::of(mus.nrows() as f64);
    let mean = mus.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &mus - &mean;
    centered.t().dot(&centered) / b
}

/// Mean absolute off-diagonal entry of a square matrix.
pub fn mean_abs_off_diagonal<T: Scalar>(cov: &Array2<T>) -> T {
    let d = cov.nrows();
    if d < 2 {
        return T::zero();
    }
    let mut total = T::zero();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                total = total + cov[[i, j]].abs();
            }
        }
    }
    total / T::of((d * (d - 1)) as f64)
}

/// `lambda_od * sum_{i != j} C_ij² + lambda_d * sum_i (C_ii - 1)²` for the covariance `C` of
/// the batch of posterior means.
pub fn dip_penalty<T: Scalar>(mus: ArrayView2<'_, T>, lambda_od: T, lambda_d: T) -> Result<T> {
    Ok(dip_penalty_with_grad(mus, lambda_od, lambda_d)?.0)
}

/// Penalty and its gradient with respect to every row of `mus`.
pub fn dip_penalty_with_grad<T: Scalar>(
    mus: ArrayView2<'_, T>,
    lambda_od: T,
    lambda_d: T,
) -> Result<(T, Array2<T>)> {
    let b = mus.nrows();
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "covariance penalty needs a batch of at least 2, got {b}"
        )));
    }
    let d = mus.ncols();
    let mean = mus.mean_axis(Axis(0)).expect("non-empty batch");
    let centered = &mus - &mean;
    let cov = centered.t().dot(&centered) / T::of(b as f64);
    let two = T::of(2.0);
    let mut penalty = T::zero();
    // dP/dC, symmetric
    let mut dcov = Array2::<T>::zeros((d, d));
    for i in 0..d {
        for j in 0..d {
            let c = cov[[i, j]];
            if i == j {
                penalty = penalty + lambda_d * (c - T::one()) * (c - T::one());
                dcov[[i, j]] = two * lambda_d * (c - T::one());
            } else {
                penalty = penalty + lambda_od * c * c;
                dcov[[i, j]] = two * lambda_od * c;
            }
        }
    }
    // C = (1/B) sum_i c_i c_iᵀ with centred rows c_i; the centring term cancels because the
    // centred rows sum to zero, leaving dP/dmu_i = (2/B) G c_i.
    let grad = centered.dot(&dcov) * (two / T::of(b as f64));
    Ok((penalty, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub lambda_od: f64,
    pub lambda_d: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: vec![512, 256, 128],
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            beta: 0.1,
            lambda_od: 10.0,
            lambda_d: 5.0,
            seed: 1,
        }
    }
}

impl VaeConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent dimension must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch size must be at least 2 for the covariance penalty".into(),
            ));
        }
        for (name, v) in [
            ("beta", self.beta),
            ("lambda_od", self.lambda_od),
            ("lambda_d", self.lambda_d),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub dip: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel<T> {
    pub encoder: DenseNet<T>,
    pub decoder: DenseNet<T>,
    pub config: VaeConfig,
    /// `[height, width, channels]`
    pub image_shape: [usize; 3],
    pub log: Vec<VaeEpochLog>,
}

impl<T: Scalar> VaeModel<T> {
    /// Freshly initialised encoder and decoder.
    pub fn new(config: VaeConfig, image_shape: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let pixels = image_shape.iter().product::<usize>();
        let mut enc_sizes = vec![pixels];
        enc_sizes.extend(&config.hidden);
        enc_sizes.push(2 * config.latent_dim);
        let mut dec_sizes = vec![config.latent_dim];
        dec_sizes.extend(config.hidden.iter().rev());
        dec_sizes.push(pixels);
        let encoder = DenseNet::init(&enc_sizes, config.seed)?;
        let decoder = DenseNet::init(&dec_sizes, config.seed.wrapping_add(1))?;
        Self::from_parts(encoder, decoder, config, image_shape)
    }

    pub fn from_parts(
        encoder: DenseNet<T>,
        decoder: DenseNet<T>,
        config: VaeConfig,
        image_shape: [usize; 3],
    ) -> Result<Self> {
        let pixels = image_shape.iter().product::<usize>();
        check_len("encoder input", pixels, encoder.input_dim())?;
        check_len("encoder output", 2 * config.latent_dim, encoder.output_dim())?;
        check_len("decoder input", config.latent_dim, decoder.input_dim())?;
        check_len("decoder output", pixels, decoder.output_dim())?;
        Ok(Self {
            encoder,
            decoder,
            config,
            image_shape,
            log: Vec::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Posterior parameters; no sampling involved.
    pub fn encode(&self, image: &[T]) -> Result<EncoderOutput<T>> {
        let out = self.encoder.forward(image)?;
        let d = self.latent_dim();
        let clamp = T::of(LOGVAR_CLAMP);
        Ok(EncoderOutput {
            mu: out[..d].to_vec(),
            logvar: out[d..].iter().map(|&v| v.max(-clamp).min(clamp)).collect(),
        })
    }

    /// Posterior means and clamped log-variances for a `(batch, pixels)` matrix.
    pub fn encode_batch(&self, images: ArrayView2<'_, T>) -> Result<(Array2<T>, Array2<T>)> {
        let out = self.encoder.forward_batch(images)?;
        let (mu, mut logvar) = split_columns(out.view(), self.latent_dim());
        let clamp = T::of(LOGVAR_CLAMP);
        logvar.mapv_inplace(|v| v.max(-clamp).min(clamp));
        Ok((mu, logvar))
    }

    pub fn decode(&self, z: &[T]) -> Result<Vec<T>> {
        Ok(self.decoder.forward(z)?.into_iter().map(sigmoid).collect())
    }

    pub fn decode_batch(&self, z: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.decoder.forward_batch(z)?.mapv(sigmoid))
    }
}

/// Trains a VAE on the rows of `images`. Deterministic in `config.seed`.
pub fn train_vae<T: Scalar>(
    images: ArrayView2<'_, T>,
    image_shape: [usize; 3],
    config: &VaeConfig,
) -> Result<VaeModel<T>> {
    if images.nrows() == 0 {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let mut model = VaeModel::new(config.clone(), image_shape)?;
    check_len("image width", model.image_len(), images.ncols())?;
    let d = config.latent_dim;
    let adam = AdamConfig::with_lr(config.lr);
    let mut enc_opt = AdamState::new(&model.encoder, adam)?;
    let mut dec_opt = AdamState::new(&model.decoder, adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let beta = T::of(config.beta);
    let lambda_od = T::of(config.lambda_od);
    let lambda_d = T::of(config.lambda_d);
    let clamp = T::of(LOGVAR_CLAMP);
    let half = T::of(0.5);
    let two = T::of(2.0);

    let mut order: Vec<usize> = (0..images.nrows()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let batches = batch_ranges(order.len(), config.batch_size);
        let (mut loss_sum, mut rec_sum, mut kl_sum, mut dip_sum) = (0.0, 0.0, 0.0, 0.0);
        for range in &batches {
            let idx = &order[range.clone()];
            let b = idx.len();
            let bt = T::of(b as f64);
            let x = gather_rows(images, idx);

            let enc_trace = model.encoder.trace(x.view())?;
            let (mu, raw_logvar) = split_columns(enc_trace.output().view(), d);
            let logvar = raw_logvar.mapv(|v| v.max(-clamp).min(clamp));
            let noise = Array2::from_shape_simple_fn((b, d), || {
                let e: f64 = StandardNormal.sample(&mut rng);
                T::of(e)
            });
            let std = logvar.mapv(|v| (v * half).exp());
            let z = &mu + &(&std * &noise);

            let dec_trace = model.decoder.trace(z.view())?;
            let x_hat = dec_trace.output().mapv(sigmoid);
            let diff = &x_hat - &x;
            let recon = diff.iter().map(|&v| v * v).sum::<T>() / bt;
            let kl = (0..b)
                .map(|i| {
                    gaussian_kl(
                        mu.row(i).as_slice().expect("contiguous"),
                        logvar.row(i).as_slice().expect("contiguous"),
                    )
                })
                .sum::<T>()
                / bt;
            let (dip, dip_grad) = dip_penalty_with_grad(mu.view(), lambda_od, lambda_d)?;
            let loss = recon + beta * kl + dip;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "VAE loss became non-finite in epoch {epoch}"
                )));
            }

            // reconstruction through the terminal sigmoid
            let mut d_logits = &diff * &x_hat.mapv(|p| p * (T::one() - p));
            d_logits *= two / bt;
            let dec_back = model.decoder.backward_trace(&dec_trace, d_logits.view(), true)?;
            let dz = dec_back.input_grad.expect("requested input gradient");

            let mut d_mu = dz.clone();
            d_mu.scaled_add(beta / bt, &mu);
            d_mu += &dip_grad;
            let mut d_logvar = &dz * &noise * &std * half;
            let kl_lv = logvar.mapv(|lv| half * (lv.exp() - T::one()) * beta / bt);
            d_logvar += &kl_lv;
            ndarray::Zip::from(&mut d_logvar)
                .and(&raw_logvar)
                .for_each(|g, &raw| {
                    if raw < -clamp || raw > clamp {
                        *g = T::zero();
                    }
                });
            let upstream = concatenate(Axis(1), &[d_mu.view(), d_logvar.view()])
                .expect("matching row counts");
            let enc_back = model.encoder.backward_trace(&enc_trace, upstream.view(), false)?;

            enc_opt.step(&mut model.encoder, &enc_back.grads)?;
            dec_opt.step(&mut model.decoder, &dec_back.grads)?;

            loss_sum += loss.as_f64();
            rec_sum += recon.as_f64();
            kl_sum += kl.as_f64();
            dip_sum += dip.as_f64();
        }
        let nb = batches.len() as f64;
        model.log.push(VaeEpochLog {
            epoch,
            loss: loss_sum / nb,
            reconstruction: rec_sum / nb,
            kl: kl_sum / nb,
            dip: dip_sum / nb,
        });
    }
    Ok(model)
}

/// Contiguous batch ranges; a trailing batch of one sample is folded into its predecessor.
pub(crate) fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch.max(1))
        .map(|s| s..(s + batch).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Per-class mean and variance of the posterior means, one entry per latent dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLatentStats {
    pub class_id: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

pub fn class_latent_stats<T: Scalar>(
    mus: ArrayView2<'_, T>,
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<ClassLatentStats>> {
    check_len("class labels", mus.nrows(), labels.len())?;
    let d = mus.ncols();
    (0..num_classes)
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let count = rows.len();
            if count == 0 {
                return Ok(ClassLatentStats {
                    class_id: c,
                    count,
                    mean: vec![0.0; d],
                    variance: vec![0.0; d],
                });
            }
            let m = mus.select(Axis(0), &rows).mapv(|v| v.as_f64());
            let mean: Array1<f64> = m.mean_axis(Axis(0)).expect("non-empty");
            let variance = m.var_axis(Axis(0), 0.0);
            Ok(ClassLatentStats {
                class_id: c,
                count,
                mean: mean.to_vec(),
                variance: variance.to_vec(),
            })
        })
        .collect()
}

/// Latent rows encoded from every image, as posterior means.
pub fn encode_means<T: Scalar>(model: &VaeModel<T>, images: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let mut out = Array2::zeros((images.nrows(), model.latent_dim()));
    for range in batch_ranges(images.nrows(), 256) {
        let (mu, _) = model.encode_batch(images.slice(s![range.clone(), ..]))?;
        out.slice_mut(s![range, ..]).assign(&mu);
    }
    Ok(out)
}
