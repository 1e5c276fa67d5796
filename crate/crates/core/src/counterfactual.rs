//! Counterfactual evidence search in latent space.
//!
//! Starting from an anchor `z_t`, Adam minimises
//!
//! ```text
//! J(z) = eta1 * ||z_t - z||²  -  eta2 * mean_k δ_k(z)  ±  eta3 * H(softmax(ŷ(z)))
//! ```
//!
//! with `+` when seeking confident evidences and `-` when seeking uncertain ones. The best
//! iterate is decoded and compared with the decoded anchor in latent space (mean absolute
//! difference) and in image space (SSIM).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{softmax_with_entropy, SoftmaxDist, TrainedPredictor};
use crate::error::{check_len, Error, Result};
use crate::nn::{AdamConfig, VecAdam};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::ssim::ssim;
use crate::vae::VaeModel;

/// `η1` values swept by default, ascending.
pub const DEFAULT_ETA1_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropySign {
    Minimize,
    Maximize,
}

impl EntropySign {
    fn factor(self) -> f64 {
        match self {
            EntropySign::Minimize => 1.0,
            EntropySign::Maximize => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfRequest<T> {
    pub z_t: Vec<T>,
    pub eta1: f64,
    pub eta2: f64,
    pub eta3: f64,
    pub entropy_sign: EntropySign,
    pub max_iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl<T: Scalar> CfRequest<T> {
    /// Request with `η2 = 0.5`, `η3 = 0.2`, entropy minimised, 300 Adam steps at lr 0.05.
    pub fn new(z_t: Vec<T>, eta1: f64) -> Self {
        Self {
            z_t,
            eta1,
            eta2: 0.5,
            eta3: 0.2,
            entropy_sign: EntropySign::Minimize,
            max_iters: 300,
            lr: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("eta1", self.eta1), ("eta2", self.eta2), ("eta3", self.eta3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidField {
                    field,
                    msg: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidField {
                field: "max_iters",
                msg: "must be at least 1".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidField {
                field: "lr",
                msg: format!("must be positive, got {}", self.lr),
            });
        }
        if self.z_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidField {
                field: "z_t",
                msg: "anchor must be finite".into(),
            });
        }
        Ok(())
    }
}

/// The three terms of the objective at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfTerms {
    pub distance: f64,
    pub mean_width: f64,
    pub entropy: f64,
    pub objective: f64,
}

pub fn cf_objective<T: Scalar>(z: &[T], req: &CfRequest<T>, predictor: &TrainedPredictor<T>) -> Result<T> {
    Ok(cf_objective_with_grad(z, req, predictor)?.0)
}

pub fn cf_terms<T: Scalar>(z: &[T], req: &CfRequest<T>, predictor: &TrainedPredictor<T>) -> Result<CfTerms> {
    check_len("counterfactual latent", req.z_t.len(), z.len())?;
    let iv = predictor.predict_interval(z)?;
    let distance: f64 = z.iter().zip(&req.z_t).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum();
    let mean_width = iv.delta.iter().map(|d| d.as_f64()).sum::<f64>() / iv.delta.len() as f64;
    let entropy = softmax_with_entropy(&iv.y_hat).entropy.as_f64();
    Ok(CfTerms {
        distance,
        mean_width,
        entropy,
        objective: req.eta1 * distance - req.eta2 * mean_width + req.entropy_sign.factor() * req.eta3 * entropy,
    })
}

/// Objective value and its gradient with respect to `z`.
pub fn cf_objective_with_grad<T: Scalar>(
    z: &[T],
    req: &CfRequest<T>,
    predictor: &TrainedPredictor<T>,
) -> Result<(T, Vec<T>)> {
    check_len("counterfactual latent", req.z_t.len(), z.len())?;
    let eta1 = T::of(req.eta1);
    let eta2 = T::of(req.eta2);
    let eta3 = T::of(req.eta3 * req.entropy_sign.factor());
    let two = T::of(2.0);

    let mut grad: Vec<T> = z.iter().zip(&req.z_t).map(|(&a, &b)| two * eta1 * (a - b)).collect();
    let distance: T = z.iter().zip(&req.z_t).map(|(&a, &b)| (a - b) * (a - b)).sum();

    let raw = predictor.g.forward(z)?;
    let k = T::of(raw.len() as f64);
    let mean_width = raw.iter().map(|&r| softplus(r)).sum::<T>() / k;
    if eta2 != T::zero() {
        let up: Vec<T> = raw.iter().map(|&r| -eta2 * sigmoid(r) / k).collect();
        let back = predictor.g.backward(z, &up)?;
        grad.iter_mut().zip(&back.input_grad).for_each(|(g, &b)| *g = *g + b);
    }

    let logits = predictor.f.forward(z)?;
    let sm = softmax_with_entropy(&logits);
    if eta3 != T::zero() {
        // dH/dŷ_j = -ρ_j (ln ρ_j + H)
        let up: Vec<T> = sm
            .rho
            .iter()
            .map(|&p| {
                if p > T::zero() {
                    -eta3 * p * (p.ln() + sm.entropy)
                } else {
                    T::zero()
                }
            })
            .collect();
        let back = predictor.f.backward(z, &up)?;
        grad.iter_mut().zip(&back.input_grad).for_each(|(g, &b)| *g = *g + b);
    }

    let objective = eta1 * distance - eta2 * mean_width + eta3 * sm.entropy;
    Ok((objective, grad))
}

/// Outcome of the latent optimisation alone, before decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSearch<T> {
    pub z_hat: Vec<T>,
    pub objective_trace: Vec<f64>,
    pub best_iteration: usize,
}

const PLATEAU_WINDOW: usize = 20;
const PLATEAU_TOLERANCE: f64 = 1e-6;

/// Adam from the anchor; returns the best iterate seen. Stops early once the objective has
/// moved by less than `1e-6` over the last 20 iterations.
pub fn search_latent<T: Scalar>(req: &CfRequest<T>, predictor: &TrainedPredictor<T>) -> Result<LatentSearch<T>> {
    req.validate()?;
    check_len("anchor latent", predictor.f.input_dim(), req.z_t.len())?;
    let mut z = req.z_t.clone();
    let mut adam = VecAdam::new(z.len(), AdamConfig::with_lr(req.lr))?;
    let mut trace = Vec::with_capacity(req.max_iters);
    let mut best = (f64::INFINITY, 0usize, z.clone());
    for it in 0..req.max_iters {
        let (obj, grad) = cf_objective_with_grad(&z, req, predictor)?;
        let obj = obj.as_f64();
        trace.push(obj);
        if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "counterfactual objective became non-finite at iteration {it}; trace so far: {trace:?}"
            )));
        }
        if obj < best.0 {
            best = (obj, it, z.clone());
        }
        if it >= PLATEAU_WINDOW && (trace[it - PLATEAU_WINDOW] - obj).abs() < PLATEAU_TOLERANCE {
            break;
        }
        adam.step(&mut z, &grad)?;
    }
    Ok(LatentSearch {
        z_hat: best.2,
        objective_trace: trace,
        best_iteration: best.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceResult<T> {
    pub z_hat: Vec<T>,
    /// Decoded evidence, `height x width x channels` row-major.
    pub image: Vec<T>,
    pub image_shape: [usize; 3],
    pub rho: SoftmaxDist<T>,
    pub predicted: usize,
    /// Whether `predicted` matches the known true class.
    pub correct: Option<bool>,
    pub ae_z: f64,
    pub ssim: f64,
    pub anchor_entropy: f64,
    pub objective_trace: Vec<f64>,
    pub best_iteration: usize,
}

/// Average absolute difference `(1/d) Σ |a_i − b_i|`.
pub fn latent_ae<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    check_len("latent_ae", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::InvalidInput("latent_ae of empty vectors".into()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y).abs().as_f64()).sum::<f64>() / a.len() as f64)
}

pub fn generate_evidence<T: Scalar>(
    req: &CfRequest<T>,
    predictor: &TrainedPredictor<T>,
    vae: &VaeModel<T>,
    truth: Option<usize>,
) -> Result<EvidenceResult<T>> {
    check_len("predictor/VAE latent dimension", vae.latent_dim(), predictor.f.input_dim())?;
    let search = search_latent(req, predictor)?;
    let anchor_image = vae.decode(&req.z_t)?;
    let image = vae.decode(&search.z_hat)?;
    let [h, w, c] = vae.image_shape;
    let rho = softmax_with_entropy(&predictor.f.forward(&search.z_hat)?);
    let anchor_entropy = softmax_with_entropy(&predictor.f.forward(&req.z_t)?).entropy.as_f64();
    let predicted = rho.argmax();
    Ok(EvidenceResult {
        ae_z: latent_ae(&req.z_t, &search.z_hat)?,
        ssim: ssim(&anchor_image, &image, h, w, c)?,
        z_hat: search.z_hat,
        image,
        image_shape: vae.image_shape,
        correct: truth.map(|t| t == predicted),
        predicted,
        rho,
        anchor_entropy,
        objective_trace: search.objective_trace,
        best_iteration: search.best_iteration,
    })
}

/// One evidence per `η1` in the (non-empty, ascending) grid; other fields from `base`.
pub fn sweep_eta1<T: Scalar>(
    base: &CfRequest<T>,
    grid: &[f64],
    predictor: &TrainedPredictor<T>,
    vae: &VaeModel<T>,
    truth: Option<usize>,
) -> Result<Vec<EvidenceResult<T>>> {
    if grid.is_empty() {
        return Err(Error::InvalidField {
            field: "eta1",
            msg: "grid must not be empty".into(),
        });
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidField {
            field: "eta1",
            msg: "grid must be strictly ascending".into(),
        });
    }
    grid.iter()
        .map(|&eta1| {
            let req = CfRequest { eta1, ..base.clone() };
            generate_evidence(&req, predictor, vae, truth)
        })
        .collect()
}

/// One column of an exported panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub eta1: f64,
    pub image_ref: String,
    pub rho: Vec<f64>,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub ae_z: f64,
    pub ssim: f64,
}

/// Raw little-endian `f32` pixels.
pub fn write_raw_image<T: Scalar>(path: &Path, image: &[T]) -> Result<()> {
    let bytes: Vec<u8> = image
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect();
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes `panel.json` plus one raw-float sidecar per evidence into `dir`.
pub fn write_panel<T: Scalar>(dir: &Path, etas: &[f64], results: &[EvidenceResult<T>]) -> Result<Vec<PanelEntry>> {
    check_len("panel columns", etas.len(), results.len())?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(results.len());
    for (i, (eta1, r)) in etas.iter().zip(results).enumerate() {
        let image_ref = format!("evidence_{i:02}.f32");
        write_raw_image(&dir.join(&image_ref), &r.image)?;
        entries.push(PanelEntry {
            eta1: *eta1,
            image_ref,
            rho: r.rho.rho.iter().map(|p| p.as_f64()).collect(),
            predicted: r.predicted,
            correct: r.correct,
            ae_z: r.ae_z,
            ssim: r.ssim,
        });
    }
    std::fs::write(dir.join("panel.json"), serde_json::to_vec_pretty(&entries)?)?;
    Ok(entries)
}
