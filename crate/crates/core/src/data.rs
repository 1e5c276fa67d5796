//! Factor-controlled synthetic lesion images, logit label encoding, and latent table I/O.
//!
//! Every sample is a soft-edged elliptical blob on a textured skin-tone background. Four
//! factors in `[0, 1]` drive the rendering:
//!
//! | factor                | rendered as                                   |
//! |-----------------------|-----------------------------------------------|
//! | `asymmetry`           | ellipse eccentricity (axis ratio up to 2.2)   |
//! | `border_irregularity` | amplitude of a radial sinusoidal edge ripple  |
//! | `color_intensity`     | lesion hue/value, light tan to dark brown     |
//! | `diameter`            | base radius                                   |
//!
//! The class of a sample comes from [`rule_class`]: lexicographic binning of
//! `(diameter, color_intensity, asymmetry)`. The diameter and colour halves pick one of four
//! quarter cells and asymmetry places the sample inside that cell, giving the key
//!
//! ```text
//! q = (bin(diameter) + (bin(color_intensity) + asymmetry) / 2) / 2,   bin(x) = min(floor(2x), 1)
//! class = min(floor(q * K), K - 1)
//! ```
//!
//! Because the factors are uniform, `q` is uniform on `[0, 1)` and the `K` cells are its
//! `K`-quantiles. A configurable fraction of labels (5% by default) is then replaced by a
//! uniformly chosen *different* class.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_CLASSES: usize = 7;
pub const DEFAULT_IMAGE_SIZE: usize = 32;
pub const DEFAULT_LABEL_NOISE: f64 = 0.05;
pub const CHANNELS: usize = 3;

pub const PAYLOAD_FILE: &str = "images.f32";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub asymmetry: f64,
    pub border_irregularity: f64,
    pub color_intensity: f64,
    pub diameter: f64,
}

/// Per-sample nuisance parameters that do not carry class information.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderJitter {
    pub angle: f64,
    pub ripple_phase: [f64; 2],
    pub center_offset: [f64; 2],
    pub texture_seed: u64,
}

impl RenderJitter {
    pub fn centered() -> Self {
        Self {
            angle: 0.0,
            ripple_phase: [0.0, 0.0],
            center_offset: [0.0, 0.0],
            texture_seed: 0,
        }
    }

    fn sample(rng: &mut impl Rng, size: usize) -> Self {
        let shift = size as f64 / 20.0;
        Self {
            angle: rng.random_range(-0.25..0.25),
            ripple_phase: [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ],
            center_offset: [rng.random_range(-shift..shift), rng.random_range(-shift..shift)],
            texture_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub class_id: usize,
    pub factors: Factors,
    /// Row-major `height x width x 3`, values in `[0, 1]`.
    pub image: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub class_id: usize,
    pub factors: Factors,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub label_noise: f64,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn validate(&self) -> Result<()> {
        if self.records.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "manifest declares n = {} but lists {} records",
                self.n,
                self.records.len()
            )));
        }
        if self.channels != CHANNELS {
            return Err(Error::InvalidInput(format!(
                "expected {CHANNELS} channels, manifest has {}",
                self.channels
            )));
        }
        let stride = (self.image_len() * 4) as u64;
        for (i, r) in self.records.iter().enumerate() {
            if r.offset != i as u64 * stride {
                return Err(Error::InvalidInput(format!(
                    "record {i} ({}) has offset {} but sample-major layout requires {}",
                    r.id,
                    r.offset,
                    i as u64 * stride
                )));
            }
            if r.class_id >= self.num_classes {
                return Err(Error::Index {
                    index: r.class_id,
                    len: self.num_classes,
                });
            }
        }
        let mut ids: Vec<&str> = self.records.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput("duplicate sample id in manifest".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub n: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub label_noise: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            num_classes: DEFAULT_CLASSES,
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 1,
            label_noise: DEFAULT_LABEL_NOISE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.samples.iter().position(|s| s.id == id)
    }

    /// Images as a `(n, pixels)` matrix in the requested scalar type.
    pub fn image_matrix<T: Scalar>(&self) -> Array2<T> {
        let cols = self.manifest.image_len();
        Array2::from_shape_fn((self.len(), cols), |(i, j)| {
            T::of(f64::from(self.samples[i].image[j]))
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut payload = BufWriter::new(fs::File::create(dir.join(PAYLOAD_FILE))?);
        for s in &self.samples {
            for px in &s.image {
                payload.write_all(&px.to_le_bytes())?;
            }
        }
        payload.flush()?;
        let manifest = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        manifest.validate()?;
        let bytes = fs::read(dir.join(PAYLOAD_FILE))?;
        let len = manifest.image_len();
        if bytes.len() != manifest.n * len * 4 {
            return Err(Error::InvalidInput(format!(
                "payload has {} bytes, manifest implies {}",
                bytes.len(),
                manifest.n * len * 4
            )));
        }
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                let start = r.offset as usize;
                let image = bytes[start..start + len * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                SyntheticSample {
                    id: r.id.clone(),
                    class_id: r.class_id,
                    factors: r.factors,
                    image,
                }
            })
            .collect();
        Ok(Self { manifest, samples })
    }
}

fn half_bin(x: f64) -> f64 {
    (2.0 * x).floor().clamp(0.0, 1.0)
}

/// The published factor-to-class rule; see the module docs.
pub fn rule_class(f: &Factors, num_classes: usize) -> usize {
    let q = (half_bin(f.diameter) + (half_bin(f.color_intensity) + f.asymmetry.clamp(0.0, 1.0)) / 2.0)
        / 2.0;
    ((q * num_classes as f64).floor() as usize).min(num_classes - 1)
}

/// Renders one image; returns the pixels and the foreground mask area in pixels.
pub fn render_lesion(factors: &Factors, jitter: &RenderJitter, size: usize) -> (Vec<f32>, usize) {
    let s = size as f64;
    let base_radius = s * (0.08 + 0.2 * factors.diameter);
    let stretch = (1.0 + 1.2 * factors.asymmetry).sqrt();
    let (rx, ry) = (base_radius * stretch, base_radius / stretch);
    let (cos_a, sin_a) = (jitter.angle.cos(), jitter.angle.sin());
    let cx = s / 2.0 + jitter.center_offset[0];
    let cy = s / 2.0 + jitter.center_offset[1];
    let ripple = 0.2 * factors.border_irregularity;

    let light = [0.72, 0.50, 0.38];
    let dark = [0.28, 0.14, 0.10];
    let skin = [0.87, 0.70, 0.60];
    let lesion: Vec<f64> = (0..3)
        .map(|ch| light[ch] + factors.color_intensity * (dark[ch] - light[ch]))
        .collect();

    let mut tex = ChaCha8Rng::seed_from_u64(jitter.texture_seed);
    let mut image = Vec::with_capacity(size * size * CHANNELS);
    let mut area = 0;
    for row in 0..size {
        for col in 0..size {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            let u = (cos_a * dx + sin_a * dy) / rx;
            let v = (-sin_a * dx + cos_a * dy) / ry;
            let q = (u * u + v * v).sqrt();
            let theta = v.atan2(u);
            let edge = 1.0
                + ripple
                    * (0.6 * (5.0 * theta + jitter.ripple_phase[0]).sin()
                        + 0.4 * (11.0 * theta + jitter.ripple_phase[1]).sin());
            // one-pixel soft edge
            let alpha = ((edge - q) * base_radius + 0.5).clamp(0.0, 1.0);
            if q <= edge {
                area += 1;
            }
            let bg_noise: f64 = tex.random_range(-0.04..0.04);
            let fg_noise: f64 = tex.random_range(-0.03..0.03);
            for ch in 0..CHANNELS {
                let bg = skin[ch] + bg_noise;
                let fg = lesion[ch] + fg_noise;
                let px = (bg * (1.0 - alpha) + fg * alpha).clamp(0.0, 1.0);
                image.push(px as f32);
            }
        }
    }
    (image, area)
}

/// Deterministic in `config.seed`. Sample `i` is drawn from the rule cell of class `i mod K`
/// (rejection sampling on uniform factors), so every class is present whenever `n >= K`.
pub fn generate_dataset(config: &GenerateConfig) -> Result<Dataset> {
    let GenerateConfig {
        n,
        num_classes: k,
        image_size,
        seed,
        label_noise,
    } = *config;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidConfig(format!(
            "n = {n} is smaller than the class count {k}; some class would be empty"
        )));
    }
    if image_size < 16 {
        return Err(Error::InvalidConfig(format!(
            "image size must be at least 16, got {image_size}"
        )));
    }
    if !(0.0..1.0).contains(&label_noise) {
        return Err(Error::InvalidConfig(format!(
            "label noise must lie in [0, 1), got {label_noise}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = (image_size * image_size * CHANNELS * 4) as u64;
    let mut samples = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let target = i % k;
        let factors = loop {
            let f = Factors {
                asymmetry: rng.random(),
                border_irregularity: rng.random(),
                color_intensity: rng.random(),
                diameter: rng.random(),
            };
            if rule_class(&f, k) == target {
                break f;
            }
        };
        let jitter = RenderJitter::sample(&mut rng, image_size);
        let class_id = if rng.random::<f64>() < label_noise {
            let other = rng.random_range(0..k - 1);
            if other >= target {
                other + 1
            } else {
                other
            }
        } else {
            target
        };
        let (image, _) = render_lesion(&factors, &jitter, image_size);
        let id = format!("s{i:05}");
        records.push(SampleRecord {
            id: id.clone(),
            class_id,
            factors,
            offset: i as u64 * stride,
        });
        samples.push(SyntheticSample {
            id,
            class_id,
            factors,
            image,
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            n,
            height: image_size,
            width: image_size,
            channels: CHANNELS,
            num_classes: k,
            seed,
            label_noise,
            records,
        },
        samples,
    })
}

/// Target logits for one class: `+1` for the class, `-2` for every other class.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLabel<T> {
    pub logits: Vec<T>,
}

pub fn encode_label<T: Scalar>(class_id: usize, num_classes: usize) -> Result<LogitLabel<T>> {
    if class_id >= num_classes {
        return Err(Error::Index {
            index: class_id,
            len: num_classes,
        });
    }
    let mut logits = vec![T::of(-2.0); num_classes];
    logits[class_id] = T::one();
    Ok(LogitLabel { logits })
}

pub fn encode_labels<T: Scalar>(class_ids: &[usize], num_classes: usize) -> Result<Array2<T>> {
    let mut out = Array2::from_elem((class_ids.len(), num_classes), T::of(-2.0));
    for (i, &c) in class_ids.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::Index {
                index: c,
                len: num_classes,
            });
        }
        out[[i, c]] = T::one();
    }
    Ok(out)
}

/// Latent features with their ids and class labels, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable<T> {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub latents: Array2<T>,
}

impl<T: Scalar> LatentTable<T> {
    pub fn dim(&self) -> usize {
        self.latents.ncols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            latents: self.latents.select(ndarray::Axis(0), idx),
        }
    }
}

/// Formats with 17 significant digits, enough to recover every `f64` exactly.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_latent_csv<T: Scalar>(path: &Path, table: &LatentTable<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..table.dim()).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(csv_io)?;
    for (i, id) in table.ids.iter().enumerate() {
        let mut row = vec![id.clone(), table.labels[i].to_string()];
        row.extend(table.latents.row(i).iter().map(|v| format_f64(v.as_f64())));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Reads a latent CSV (`id,label,z0,...,z{d-1}`). When `num_classes` is given, labels at or
/// above it are rejected.
pub fn load_latent_csv<T: Scalar>(path: &Path, num_classes: Option<usize>) -> Result<LatentTable<T>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let header = reader.headers().map_err(csv_io)?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `id,label,z0`".into(),
        });
    }
    let d = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("z{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column `z{j}`, found `{name}`"),
            });
        }
    }

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_io)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 2, record.len()),
            });
        }
        let label: usize = record[1].trim().parse().map_err(|_| Error::Parse {
            line,
            msg: format!("label `{}` is not a non-negative integer", &record[1]),
        })?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(Error::Parse {
                    line,
                    msg: format!("label {label} is not below the class count {k}"),
                });
            }
        }
        for (j, cell) in record.iter().skip(2).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("column z{j}: `{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("column z{j}: non-finite value `{cell}`"),
                });
            }
            values.push(T::of(v));
        }
        ids.push(record[0].to_string());
        labels.push(label);
    }
    let latents = Array2::from_shape_vec((ids.len(), d), values)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(LatentTable {
        ids,
        labels,
        latents,
    })
}

/// Train/validation partition as sorted index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Per-class shuffled split; each class contributes `round(count * val_fraction)` samples to
/// validation.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(format!(
            "validation fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(Split { train, val })
}
