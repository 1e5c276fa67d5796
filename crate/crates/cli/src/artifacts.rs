//! Reading and writing the files the subcommands exchange.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use calibra_core::calib::{BaselinePredictor, TrainedPredictor};
use calibra_core::checkpoint::Checkpoint;
use calibra_core::data::{load_latent_csv, stratified_split, Dataset, LatentTable, Split};
use calibra_core::vae::VaeModel;
use calibra_core::Scalar;
use serde::Serialize;

use crate::error::{require_file, CliError, CliResult};

/// Model id used in reports and API responses: the checkpoint file stem.
pub fn artifact_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

/// `out/pred.json` -> `out/pred.log.csv`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_file_name(format!("{}.log.csv", artifact_id(checkpoint)))
}

fn load_checkpoint(path: &PathBuf) -> CliResult<Checkpoint> {
    require_file(path)?;
    Checkpoint::load(path).map_err(|e| CliError::reading(path, e))
}

pub fn load_vae(path: &PathBuf) -> CliResult<VaeModel<f64>> {
    load_checkpoint(path)?.to_vae().map_err(|e| CliError::reading(path, e))
}

pub fn load_predictor(path: &PathBuf) -> CliResult<TrainedPredictor<f64>> {
    load_checkpoint(path)?.to_predictor().map_err(|e| CliError::reading(path, e))
}

pub fn load_baseline(path: &PathBuf) -> CliResult<BaselinePredictor<f64>> {
    load_checkpoint(path)?.to_baseline().map_err(|e| CliError::reading(path, e))
}

pub fn load_latents(path: &PathBuf) -> CliResult<LatentTable<f64>> {
    require_file(path)?;
    load_latent_csv(path, None).map_err(|e| CliError::reading(path, e))
}

pub fn load_dataset(dir: &PathBuf) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Config(format!("{} is not a dataset directory", dir.display())));
    }
    Dataset::load(dir).map_err(|e| CliError::reading(dir, e))
}

pub fn split_for(labels: &[usize], val_fraction: f64, seed: u64) -> CliResult<Split> {
    Ok(stratified_split(labels, val_fraction, seed)?)
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> CliResult<()> {
    ensure_parent(path)?;
    checkpoint.save(path).map_err(|e| CliError::writing(path, e))
}

pub fn write_log_csv<L: Serialize>(path: &Path, log: &[L]) -> CliResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::writing(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| CliError::writing(path, e))?;
    }
    w.flush().map_err(|e| CliError::writing(path, e))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> CliResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::writing(path, e))?;
    std::fs::write(path, text).map_err(|e| CliError::writing(path, e))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::writing(dir, e))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Pixels as base64 of little-endian `f32`, the same layout as the raw image sidecars.
pub fn encode_image<T: Scalar>(pixels: &[T]) -> String {
    let bytes: Vec<u8> = pixels
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect();
    STANDARD.encode(bytes)
}

pub fn decode_image(data: &str) -> Option<Vec<f32>> {
    let bytes = STANDARD.decode(data).ok()?;
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}
