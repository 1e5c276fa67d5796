//! JSON checkpoints for trained networks.
//!
//! Parameters are stored as decimal numbers that parse back to the identical `f64`, so a
//! loaded model reproduces the saved model's outputs bit for bit.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "kind": "predictor",
//!   "nets": [{"name": "f", "layer_sizes": [10, 64, 7], "weights": [[...], [...]], "biases": [[...], [...]]}],
//!   "config": { ... },
//!   "image_shape": null,
//!   "log_digest": "sha256 hex of the training log",
//!   "log_epochs": 120
//! }
//! ```
//!
//! Weight matrices are flattened row-major.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{BaselineConfig, BaselinePredictor, CalibConfig, TrainedPredictor};
use crate::error::{Error, Result};
use crate::nn::DenseNet;
use crate::scalar::Scalar;
use crate::vae::{VaeConfig, VaeModel};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Vae,
    Predictor,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub name: String,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u64,
    pub kind: CheckpointKind,
    pub nets: Vec<NetRecord>,
    pub config: serde_json::Value,
    pub image_shape: Option<[usize; 3]>,
    pub log_digest: String,
    pub log_epochs: usize,
}

/// Hex SHA-256 of the JSON form of a training log.
pub fn log_digest<L: Serialize>(log: &[L]) -> String {
    let bytes = serde_json::to_vec(log).expect("training logs serialize");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn record<T: Scalar>(name: &str, net: &DenseNet<T>) -> NetRecord {
    NetRecord {
        name: name.to_string(),
        layer_sizes: net.layer_sizes().to_vec(),
        weights: net
            .weights()
            .iter()
            .map(|w| w.iter().map(|v| v.as_f64()).collect())
            .collect(),
        biases: net
            .biases()
            .iter()
            .map(|b| b.iter().map(|v| v.as_f64()).collect())
            .collect(),
    }
}

fn rebuild<T: Scalar>(rec: &NetRecord, path: &str) -> Result<DenseNet<T>> {
    let sizes = &rec.layer_sizes;
    let bad = |field: String, msg: String| Error::Checkpoint { field, msg };
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(bad(
            format!("{path}.layer_sizes"),
            "need at least two positive sizes".into(),
        ));
    }
    let layers = sizes.len() - 1;
    if rec.weights.len() != layers {
        return Err(bad(
            format!("{path}.weights"),
            format!("expected {layers} matrices, found {}", rec.weights.len()),
        ));
    }
    if rec.biases.len() != layers {
        return Err(bad(
            format!("{path}.biases"),
            format!("expected {layers} vectors, found {}", rec.biases.len()),
        ));
    }
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let (rows, cols) = (sizes[l + 1], sizes[l]);
        let w = &rec.weights[l];
        if w.len() != rows * cols {
            return Err(bad(
                format!("{path}.weights[{l}]"),
                format!("expected {} entries, found {}", rows * cols, w.len()),
            ));
        }
        let b = &rec.biases[l];
        if b.len() != rows {
            return Err(bad(
                format!("{path}.biases[{l}]"),
                format!("expected {rows} entries, found {}", b.len()),
            ));
        }
        if w.iter().chain(b).any(|v| !v.is_finite()) {
            return Err(bad(format!("{path}.weights[{l}]"), "non-finite parameter".into()));
        }
        weights.push(
            Array2::from_shape_vec((rows, cols), w.iter().map(|&v| T::of(v)).collect())
                .expect("length checked"),
        );
        biases.push(Array1::from(b.iter().map(|&v| T::of(v)).collect::<Vec<_>>()));
    }
    DenseNet::from_parts(sizes.clone(), weights, biases)
}

impl Checkpoint {
    pub fn from_vae<T: Scalar>(model: &VaeModel<T>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: CheckpointKind::Vae,
            nets: vec![record("encoder", &model.encoder), record("decoder", &model.decoder)],
            config: serde_json::to_value(&model.config).expect("config serializes"),
            image_shape: Some(model.image_shape),
            log_digest: log_digest(&model.log),
            log_epochs: model.log.len(),
        }
    }

    pub fn from_predictor<T: Scalar>(model: &TrainedPredictor<T>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: CheckpointKind::Predictor,
            nets: vec![record("f", &model.f), record("g", &model.g)],
            config: serde_json::to_value(&model.config).expect("config serializes"),
            image_shape: None,
            log_digest: log_digest(&model.log),
            log_epochs: model.log.len(),
        }
    }

    pub fn from_baseline<T: Scalar>(model: &BaselinePredictor<T>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: CheckpointKind::Baseline,
            nets: vec![record("f", &model.f)],
            config: serde_json::to_value(&model.config).expect("config serializes"),
            image_shape: None,
            log_digest: log_digest(&model.log),
            log_epochs: model.log.len(),
        }
    }

    fn expect_kind(&self, kind: CheckpointKind, nets: usize) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                field: "kind".into(),
                msg: format!("expected {kind:?}, found {:?}", self.kind),
            });
        }
        if self.nets.len() != nets {
            return Err(Error::Checkpoint {
                field: "nets".into(),
                msg: format!("expected {nets} networks, found {}", self.nets.len()),
            });
        }
        Ok(())
    }

    fn config<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Checkpoint {
            field: "config".into(),
            msg: e.to_string(),
        })
    }

    pub fn to_vae<T: Scalar>(&self) -> Result<VaeModel<T>> {
        self.expect_kind(CheckpointKind::Vae, 2)?;
        let config: VaeConfig = self.config()?;
        let image_shape = self.image_shape.ok_or_else(|| Error::Checkpoint {
            field: "image_shape".into(),
            msg: "required for a VAE checkpoint".into(),
        })?;
        let encoder = rebuild(&self.nets[0], "nets[0]")?;
        let decoder = rebuild(&self.nets[1], "nets[1]")?;
        VaeModel::from_parts(encoder, decoder, config, image_shape).map_err(|e| Error::Checkpoint {
            field: "nets".into(),
            msg: e.to_string(),
        })
    }

    pub fn to_predictor<T: Scalar>(&self) -> Result<TrainedPredictor<T>> {
        self.expect_kind(CheckpointKind::Predictor, 2)?;
        let config: CalibConfig = self.config()?;
        let f = rebuild(&self.nets[0], "nets[0]")?;
        let g = rebuild(&self.nets[1], "nets[1]")?;
        TrainedPredictor::from_parts(f, g, config).map_err(|e| Error::Checkpoint {
            field: "nets".into(),
            msg: e.to_string(),
        })
    }

    pub fn to_baseline<T: Scalar>(&self) -> Result<BaselinePredictor<T>> {
        self.expect_kind(CheckpointKind::Baseline, 1)?;
        let config: BaselineConfig = self.config()?;
        Ok(BaselinePredictor {
            f: rebuild(&self.nets[0], "nets[0]")?,
            config,
            log: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates the schema version before the rest of the document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint {
            field: "<document>".into(),
            msg: e.to_string(),
        })?;
        let version = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint {
                field: "schema_version".into(),
                msg: "missing or not an unsigned integer".into(),
            })?;
        if version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: SCHEMA_VERSION,
            });
        }
        serde_path_to_error::deserialize(value).map_err(|e| Error::Checkpoint {
            field: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
