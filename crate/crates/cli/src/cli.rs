//! Subcommand definitions and their implementations.

use std::net::SocketAddr;
use std::path::PathBuf;

use calibra_core::calib::{train_alternating, train_ce_baseline, BaselineConfig, CalibConfig, Surrogate};
use calibra_core::checkpoint::Checkpoint;
use calibra_core::counterfactual::{
    sweep_eta1, write_panel, write_raw_image, CfRequest, EntropySign, DEFAULT_ETA1_GRID,
};
use calibra_core::data::{generate_dataset, write_latent_csv, GenerateConfig, LatentTable};
use calibra_core::reliability::{evaluate, EvalConfig};
use calibra_core::vae::{encode_means, train_vae, VaeConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;

use crate::artifacts::*;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "calibra", version, about = "Interval-calibrated predictors on synthetic lesion latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic lesion dataset (image payload plus manifest).
    GenData(GenDataArgs),
    /// Train the disentangling VAE and export posterior-mean latents.
    TrainVae(TrainVaeArgs),
    /// Train the interval-calibrated predictor on a latent table.
    TrainPredictor(TrainPredictorArgs),
    /// Train the cross-entropy baseline on a latent table.
    TrainBaseline(TrainBaselineArgs),
    /// Evaluate predictors on the validation split and export reports and curves.
    Eval(EvalArgs),
    /// Search for counterfactual evidences around one sample.
    Counterfact(CounterfactArgs),
    /// Serve the JSON API (and optionally a static UI) over trained artifacts.
    Serve(ServeArgs),
}

/// Train/validation split shared by every subcommand that reads latents.
#[derive(Debug, Clone, Copy, Args)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Fraction of labels flipped away from the factor rule.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; the training log goes next to it as `<stem>.log.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Latent table for every sample (defaults to `latents.csv` beside the checkpoint).
    #[arg(long)]
    pub latents_out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub latent_dim: usize,
    #[arg(long, value_delimiter = ',', default_value = "512,256,128")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_od: f64,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_d: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct TrainPredictorArgs {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Temperature of the smooth coverage indicator.
    #[arg(long, default_value_t = 0.04)]
    pub temperature: f64,
    /// Whether width updates follow the smooth or the counted coverage.
    #[arg(long, value_enum, default_value_t = SurrogateArg::Smooth)]
    pub surrogate: SurrogateArg,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr_f: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_g: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SurrogateArg {
    Smooth,
    StraightThrough,
}

impl From<SurrogateArg> for Surrogate {
    fn from(s: SurrogateArg) -> Self {
        match s {
            SurrogateArg::Smooth => Surrogate::Smooth,
            SurrogateArg::StraightThrough => Surrogate::StraightThrough,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainBaselineArgs {
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Calibrated predictor checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Cross-entropy baseline checkpoint.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub latents: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SignArg {
    Minimize,
    Maximize,
}

impl From<SignArg> for EntropySign {
    fn from(s: SignArg) -> Self {
        match s {
            SignArg::Minimize => EntropySign::Minimize,
            SignArg::Maximize => EntropySign::Maximize,
        }
    }
}

#[derive(Debug, Args)]
pub struct CounterfactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub latents: PathBuf,
    /// Anchor sample id from the latent table.
    #[arg(long)]
    pub sample: String,
    /// Comma-separated, strictly ascending.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10")]
    pub eta1: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub eta2: f64,
    #[arg(long, default_value_t = 0.2)]
    pub eta3: f64,
    #[arg(long, value_enum, default_value_t = SignArg::Minimize)]
    pub sign: SignArg,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub latents: PathBuf,
    /// Calibrated predictor checkpoint; repeat to register several.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Baseline checkpoint; repeat to register several.
    #[arg(long = "baseline")]
    pub baselines: Vec<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of built UI assets served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[command(flatten)]
    pub split: SplitArgs,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainVae(a) => train_vae_cmd(&a),
        Command::TrainPredictor(a) => train_predictor(&a),
        Command::TrainBaseline(a) => train_baseline(&a),
        Command::Eval(a) => eval(&a),
        Command::Counterfact(a) => counterfact(&a),
        Command::Serve(a) => serve(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let config = GenerateConfig {
        n: a.n,
        num_classes: a.classes,
        image_size: a.size,
        seed: a.seed,
        label_noise: a.noise,
    };
    let data = generate_dataset(&config)?;
    ensure_dir(&a.out)?;
    data.save(&a.out).map_err(|e| CliError::writing(&a.out, e))?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

pub fn train_vae_cmd(a: &TrainVaeArgs) -> CliResult<()> {
    let data = load_dataset(&a.data)?;
    let labels = data.labels();
    let split = split_for(&labels, a.split.val_fraction, a.split.split_seed)?;
    let images = data.image_matrix::<f64>();
    let train_images = images.select(Axis(0), &split.train);
    let config = VaeConfig {
        latent_dim: a.latent_dim,
        hidden: a.hidden.clone(),
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        beta: a.beta,
        lambda_od: a.lambda_od,
        lambda_d: a.lambda_d,
        seed: a.seed,
    };
    let shape = [data.manifest.height, data.manifest.width, data.manifest.channels];
    let model = train_vae(train_images.view(), shape, &config)?;
    save_checkpoint(&a.out, &Checkpoint::from_vae(&model))?;
    write_log_csv(&log_path(&a.out), &model.log)?;

    let table = LatentTable {
        ids: data.samples.iter().map(|s| s.id.clone()).collect(),
        labels,
        latents: encode_means(&model, images.view())?,
    };
    let latents_out = a
        .latents_out
        .clone()
        .unwrap_or_else(|| a.out.with_file_name("latents.csv"));
    write_latent_csv(&latents_out, &table).map_err(|e| CliError::writing(&latents_out, e))?;
    let last = model.log.last().map_or(f64::NAN, |l| l.loss);
    println!(
        "trained VAE for {} epochs (final loss {last:.4}); latents in {}",
        model.log.len(),
        latents_out.display()
    );
    Ok(())
}

fn train_rows(table: &LatentTable<f64>, split: &SplitArgs) -> CliResult<LatentTable<f64>> {
    let s = split_for(&table.labels, split.val_fraction, split.split_seed)?;
    Ok(table.subset(&s.train))
}

pub fn train_predictor(a: &TrainPredictorArgs) -> CliResult<()> {
    let table = load_latents(&a.latents)?;
    let train = train_rows(&table, &a.split)?;
    let config = CalibConfig {
        alpha: a.alpha,
        tau: a.tau,
        lr_f: a.lr_f,
        lr_g: a.lr_g,
        epochs: a.epochs,
        batch_size: a.batch_size,
        temperature: a.temperature,
        surrogate: a.surrogate.into(),
        hidden: a.hidden.clone(),
        patience: a.patience,
        seed: a.seed,
        ..CalibConfig::default()
    };
    let model = train_alternating(train.latents.view(), &train.labels, table.num_classes(), &config)?;
    save_checkpoint(&a.out, &Checkpoint::from_predictor(&model))?;
    write_log_csv(&log_path(&a.out), &model.log)?;
    if let Some(last) = model.log.last() {
        println!(
            "trained predictor for {} alternations: hinge {:.4}, calibration error {:.4}, accuracy {:.4}",
            model.log.len(),
            last.hinge,
            last.hard_calib_error,
            last.accuracy
        );
    }
    Ok(())
}

pub fn train_baseline(a: &TrainBaselineArgs) -> CliResult<()> {
    let table = load_latents(&a.latents)?;
    let train = train_rows(&table, &a.split)?;
    let config = BaselineConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        hidden: a.hidden.clone(),
        seed: a.seed,
    };
    let model = train_ce_baseline(train.latents.view(), &train.labels, table.num_classes(), &config)?;
    save_checkpoint(&a.out, &Checkpoint::from_baseline(&model))?;
    write_log_csv(&log_path(&a.out), &model.log)?;
    if let Some(last) = model.log.last() {
        println!(
            "trained baseline for {} epochs: cross-entropy {:.4}, accuracy {:.4}",
            model.log.len(),
            last.cross_entropy,
            last.accuracy
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SplitRecord<'a> {
    val_fraction: f64,
    split_seed: u64,
    val_ids: Vec<&'a str>,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let table = load_latents(&a.latents)?;
    let split = split_for(&table.labels, a.split.val_fraction, a.split.split_seed)?;
    let val = table.subset(&split.val);
    let config = EvalConfig {
        alpha: a.alpha,
        ..EvalConfig::default()
    };
    ensure_dir(&a.out)?;

    let mut reports = Vec::new();
    let predictor = load_predictor(&a.model)?;
    let id = artifact_id(&a.model);
    reports.push(evaluate(&id, &predictor, val.latents.view(), &val.labels, &config)?);
    if let Some(path) = &a.baseline {
        let baseline = load_baseline(path)?;
        let id = artifact_id(path);
        reports.push(evaluate(&id, &baseline, val.latents.view(), &val.labels, &config)?);
    }
    for r in &reports {
        write_json(&a.out.join(format!("{}.report.json", r.predictor_id)), r)?;
        let curve_path = a.out.join(format!("{}.curve.csv", r.predictor_id));
        r.curve.write_csv(&curve_path).map_err(|e| CliError::writing(&curve_path, e))?;
        println!(
            "{}: accuracy {:.4}, macro {:.4}, weighted AUC {:.4}, mean deferral accuracy {:.4}",
            r.predictor_id,
            r.plain_accuracy,
            r.macro_accuracy,
            r.weighted_auc,
            r.curve.mean_accuracy()
        );
    }
    let record = SplitRecord {
        val_fraction: a.split.val_fraction,
        split_seed: a.split.split_seed,
        val_ids: split.val.iter().map(|&i| table.ids[i].as_str()).collect(),
    };
    write_json(&a.out.join("split.json"), &record)
}

pub fn counterfact(a: &CounterfactArgs) -> CliResult<()> {
    let predictor = load_predictor(&a.model)?;
    let vae = load_vae(&a.vae)?;
    let table = load_latents(&a.latents)?;
    let row = table
        .index_of(&a.sample)
        .ok_or_else(|| CliError::Config(format!("sample `{}` is not in {}", a.sample, a.latents.display())))?;
    let base = CfRequest {
        eta2: a.eta2,
        eta3: a.eta3,
        entropy_sign: a.sign.into(),
        max_iters: a.max_iters,
        lr: a.lr,
        seed: a.seed,
        ..CfRequest::new(table.latents.row(row).to_vec(), a.eta1.first().copied().unwrap_or(DEFAULT_ETA1_GRID[0]))
    };
    let results = sweep_eta1(&base, &a.eta1, &predictor, &vae, Some(table.labels[row]))?;
    let entries = write_panel(&a.out, &a.eta1, &results).map_err(|e| CliError::writing(&a.out, e))?;
    let anchor = vae.decode(&base.z_t)?;
    let anchor_path = a.out.join("anchor.f32");
    write_raw_image(&anchor_path, &anchor).map_err(|e| CliError::writing(&anchor_path, e))?;
    write_json(&a.out.join("evidences.json"), &results)?;
    for e in &entries {
        println!(
            "eta1 {:>6}: class {} (correct: {}), AE(z) {:.4}, SSIM {:.4}",
            e.eta1,
            e.predicted,
            e.correct.map_or("?".into(), |c| c.to_string()),
            e.ae_z,
            e.ssim
        );
    }
    Ok(())
}

pub fn serve(a: &ServeArgs) -> CliResult<()> {
    let state = crate::api::AppState::load(a)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|_| CliError::Config(format!("invalid listen address {}:{}", a.host, a.port)))?;
    let app = crate::api::router(state, a.ui_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
        println!("listening on http://{addr}");
        axum::serve(listener, app)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))
    })
}
