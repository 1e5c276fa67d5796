//! Interval-calibrated prediction on disentangled latent representations.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`data`] renders a factor-controlled synthetic image dataset.
//! 2. [`vae`] learns a decorrelated latent space for those images.
//! 3. [`calib`] trains a logit estimator and an interval-width network by alternating a
//!    calibration objective with a hinge objective; [`reliability`] scores it with
//!    expert-deferral curves and conventional metrics.
//! 4. [`counterfactual`] searches the latent space for nearby evidences that change the
//!    model's confidence, measured with [`ssim`] and latent distance.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the `*64` aliases below
//! are what the command-line tools use.

pub mod calib;
pub mod checkpoint;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod nn;
pub mod reliability;
pub mod scalar;
pub mod ssim;
pub mod vae;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type LatentVector<T = f64> = Vec<T>;

pub type DenseNet64 = nn::DenseNet<f64>;
pub type DenseNet32 = nn::DenseNet<f32>;
pub type Gradients64 = nn::Gradients<f64>;
pub type AdamState64 = nn::AdamState<f64>;
pub type VaeModel64 = vae::VaeModel<f64>;
pub type VaeModel32 = vae::VaeModel<f32>;
pub type TrainedPredictor64 = calib::TrainedPredictor<f64>;
pub type TrainedPredictor32 = calib::TrainedPredictor<f32>;
pub type BaselinePredictor64 = calib::BaselinePredictor<f64>;
pub type PredictionInterval64 = calib::PredictionInterval<f64>;
pub type SoftmaxDist64 = calib::SoftmaxDist<f64>;
pub type CfRequest64 = counterfactual::CfRequest<f64>;
pub type EvidenceResult64 = counterfactual::EvidenceResult<f64>;
pub type LatentTable64 = data::LatentTable<f64>;
