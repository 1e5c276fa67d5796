//! Read-only JSON API over trained artifacts.
//!
//! | Method | Path                          | Response                                   |
//! |--------|-------------------------------|--------------------------------------------|
//! | GET    | `/api/models`                 | registered models and their summary scores |
//! | GET    | `/api/samples?split=&model=`  | ids, classes, predictions and entropies    |
//! | GET    | `/api/sample/{id}?model=`     | image, latent, softmax and interval        |
//! | POST   | `/api/counterfactual`         | one evidence for a request body            |
//! | GET    | `/api/reliability?model=`     | the model's deferral curve                 |
//!
//! Errors are `{"error": string, "field": string | null}` with status 400 for invalid input
//! and 404 for unknown ids. Images are base64 little-endian `f32`, row-major `h x w x c`.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use calibra_core::calib::{softmax_with_entropy, BaselinePredictor, LogitModel, TrainedPredictor};
use calibra_core::counterfactual::{generate_evidence, CfRequest, EntropySign};
use calibra_core::data::{Dataset, LatentTable};
use calibra_core::reliability::{evaluate, predict_all, EvalConfig, EvalReport, ReliabilityCurve};
use calibra_core::vae::VaeModel;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::artifacts::{artifact_id, encode_image, load_baseline, load_dataset, load_latents, load_predictor, load_vae, split_for};
use crate::cli::{ServeArgs, SplitArgs};
use crate::error::{CliError, CliResult};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    field: Option<String>,
}

impl ApiError {
    fn bad_request(field: Option<&str>, error: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: error.into(),
            field: field.map(str::to_string),
        }
    }

    fn not_found(field: &str, error: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            error: error.into(),
            field: Some(field.to_string()),
        }
    }
}

impl From<calibra_core::Error> for ApiError {
    fn from(e: calibra_core::Error) -> Self {
        use calibra_core::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidField { field, .. } => Self::bad_request(Some(field), msg),
            E::Numerical(_) | E::Io(_) => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                error: msg,
                field: None,
            },
            _ => Self::bad_request(None, msg),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    field: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: &self.error,
            field: self.field.as_deref(),
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Predictor,
    Baseline,
}

enum Model {
    Predictor(TrainedPredictor<f64>),
    Baseline(BaselinePredictor<f64>),
}

impl Model {
    fn logit_model(&self) -> &dyn LogitModel<f64> {
        match self {
            Model::Predictor(p) => p,
            Model::Baseline(b) => b,
        }
    }
}

struct ModelEntry {
    id: String,
    model: Model,
    report: EvalReport,
    /// Per latent row.
    entropies: Vec<f64>,
    predicted: Vec<usize>,
}

/// Everything the service reads; frozen once built.
pub struct AppState {
    dataset_id: String,
    vae_id: String,
    dataset: Dataset,
    vae: VaeModel<f64>,
    latents: LatentTable<f64>,
    /// Dataset sample index for each latent row.
    dataset_row: Vec<usize>,
    in_val: Vec<bool>,
    models: Vec<ModelEntry>,
}

/// Named in-memory artifacts for [`AppState::new`].
pub struct Artifacts {
    pub dataset_id: String,
    pub dataset: Dataset,
    pub vae_id: String,
    pub vae: VaeModel<f64>,
    pub latents: LatentTable<f64>,
    pub predictors: Vec<(String, TrainedPredictor<f64>)>,
    pub baselines: Vec<(String, BaselinePredictor<f64>)>,
}

impl AppState {
    pub fn load(args: &ServeArgs) -> CliResult<Arc<Self>> {
        let dataset = load_dataset(&args.data)?;
        let vae = load_vae(&args.vae)?;
        let latents = load_latents(&args.latents)?;
        let predictors = args
            .models
            .iter()
            .map(|p| Ok((artifact_id(p), load_predictor(p)?)))
            .collect::<CliResult<Vec<_>>>()?;
        let baselines = args
            .baselines
            .iter()
            .map(|p| Ok((artifact_id(p), load_baseline(p)?)))
            .collect::<CliResult<Vec<_>>>()?;
        let artifacts = Artifacts {
            dataset_id: artifact_id(&args.data),
            dataset,
            vae_id: artifact_id(&args.vae),
            vae,
            latents,
            predictors,
            baselines,
        };
        Self::new(artifacts, args.split, args.alpha)
    }

    /// Validates that the artifacts fit together and precomputes per-model outputs.
    pub fn new(a: Artifacts, split: SplitArgs, alpha: f64) -> CliResult<Arc<Self>> {
        let d = a.latents.dim();
        if a.vae.latent_dim() != d {
            return Err(CliError::Config(format!(
                "VAE `{}` has latent dimension {}, the latent table has {d}",
                a.vae_id,
                a.vae.latent_dim()
            )));
        }
        let dataset_row = a
            .latents
            .ids
            .iter()
            .map(|id| {
                a.dataset
                    .index_of(id)
                    .ok_or_else(|| CliError::Config(format!("latent row `{id}` is not in dataset `{}`", a.dataset_id)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let s = split_for(&a.latents.labels, split.val_fraction, split.split_seed)?;
        let mut in_val = vec![false; a.latents.len()];
        for &i in &s.val {
            in_val[i] = true;
        }
        let val = a.latents.subset(&s.val);
        let config = EvalConfig {
            alpha,
            ..EvalConfig::default()
        };

        let mut models = Vec::new();
        let named = a
            .predictors
            .into_iter()
            .map(|(id, p)| (id, Model::Predictor(p)))
            .chain(a.baselines.into_iter().map(|(id, b)| (id, Model::Baseline(b))));
        for (id, model) in named {
            if models.iter().any(|m: &ModelEntry| m.id == id) {
                return Err(CliError::Config(format!("model id `{id}` is registered twice")));
            }
            let m = model.logit_model();
            if m.latent_dim() != d {
                return Err(CliError::Config(format!(
                    "model `{id}` expects latent dimension {}, the latent table has {d}",
                    m.latent_dim()
                )));
            }
            let report = evaluate(&id, m, val.latents.view(), &val.labels, &config)?;
            let all = predict_all(m, a.latents.latents.view())?;
            models.push(ModelEntry {
                id,
                model,
                report,
                entropies: all.entropies,
                predicted: all.predicted,
            });
        }
        Ok(Arc::new(Self {
            dataset_id: a.dataset_id,
            vae_id: a.vae_id,
            dataset: a.dataset,
            vae: a.vae,
            latents: a.latents,
            dataset_row,
            in_val,
            models,
        }))
    }

    /// The named model, or the first registered calibrated predictor.
    fn model(&self, id: Option<&str>) -> Result<&ModelEntry, ApiError> {
        match id {
            Some(id) => self
                .models
                .iter()
                .find(|m| m.id == id)
                .ok_or_else(|| ApiError::not_found("model", format!("unknown model `{id}`"))),
            None => self
                .models
                .iter()
                .find(|m| matches!(m.model, Model::Predictor(_)))
                .ok_or_else(|| ApiError::bad_request(Some("model"), "no calibrated predictor is registered")),
        }
    }

    fn row(&self, sample_id: &str) -> Result<usize, ApiError> {
        self.latents
            .index_of(sample_id)
            .ok_or_else(|| ApiError::not_found("id", format!("unknown sample `{sample_id}`")))
    }

    fn split_name(&self, row: usize) -> &'static str {
        if self.in_val[row] {
            "val"
        } else {
            "train"
        }
    }
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/models", get(models))
        .route("/samples", get(samples))
        .route("/sample/{id}", get(sample))
        .route("/counterfactual", post(counterfactual))
        .route("/reliability", get(reliability))
        .fallback(|| async { ApiError::not_found("path", "no such endpoint") })
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => app,
    }
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    id: &'a str,
    kind: ModelKind,
    latent_dim: usize,
    num_classes: usize,
    counterfactual: bool,
    plain_accuracy: f64,
    macro_accuracy: f64,
    weighted_auc: f64,
    mean_deferral_accuracy: f64,
    coverage: Option<&'a [f64]>,
}

#[derive(Serialize)]
struct ModelsResponse<'a> {
    dataset_id: &'a str,
    vae_id: &'a str,
    num_samples: usize,
    models: Vec<ModelSummary<'a>>,
}

async fn models(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let models = s
        .models
        .iter()
        .map(|m| {
            let lm = m.model.logit_model();
            ModelSummary {
                id: &m.id,
                kind: match m.model {
                    Model::Predictor(_) => ModelKind::Predictor,
                    Model::Baseline(_) => ModelKind::Baseline,
                },
                latent_dim: lm.latent_dim(),
                num_classes: lm.num_classes(),
                counterfactual: matches!(m.model, Model::Predictor(_)),
                plain_accuracy: m.report.plain_accuracy,
                macro_accuracy: m.report.macro_accuracy,
                weighted_auc: m.report.weighted_auc,
                mean_deferral_accuracy: m.report.curve.mean_accuracy(),
                coverage: m.report.coverage.as_deref(),
            }
        })
        .collect();
    let body = ModelsResponse {
        dataset_id: &s.dataset_id,
        vae_id: &s.vae_id,
        num_samples: s.latents.len(),
        models,
    };
    Json(serde_json::to_value(body).expect("plain data serializes"))
}

#[derive(Deserialize)]
struct SamplesQuery {
    split: Option<String>,
    model: Option<String>,
}

#[derive(Serialize)]
struct SampleSummary<'a> {
    id: &'a str,
    class_id: usize,
    split: &'static str,
    predicted: usize,
    correct: bool,
    entropy: f64,
}

#[derive(Serialize)]
struct SamplesResponse<'a> {
    dataset_id: &'a str,
    model_id: &'a str,
    split: &'a str,
    samples: Vec<SampleSummary<'a>>,
}

async fn samples(State(s): State<Arc<AppState>>, Query(q): Query<SamplesQuery>) -> Result<Response, ApiError> {
    let split = q.split.as_deref().unwrap_or("val");
    let keep = |row: usize| match split {
        "all" => Ok(true),
        "val" => Ok(s.in_val[row]),
        "train" => Ok(!s.in_val[row]),
        other => Err(ApiError::bad_request(
            Some("split"),
            format!("split must be `val`, `train` or `all`, got `{other}`"),
        )),
    };
    let m = s.model(q.model.as_deref())?;
    let mut out = Vec::new();
    for row in 0..s.latents.len() {
        if keep(row)? {
            let class_id = s.latents.labels[row];
            out.push(SampleSummary {
                id: &s.latents.ids[row],
                class_id,
                split: s.split_name(row),
                predicted: m.predicted[row],
                correct: m.predicted[row] == class_id,
                entropy: m.entropies[row],
            });
        }
    }
    let body = SamplesResponse {
        dataset_id: &s.dataset_id,
        model_id: &m.id,
        split,
        samples: out,
    };
    Ok(Json(body).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub shape: [usize; 3],
    pub encoding: String,
    pub data: String,
}

impl ImagePayload {
    fn new<T: calibra_core::Scalar>(pixels: &[T], shape: [usize; 3]) -> Self {
        Self {
            shape,
            encoding: "f32le-base64".into(),
            data: encode_image(pixels),
        }
    }
}

#[derive(Serialize)]
struct Softmax {
    rho: Vec<f64>,
    entropy: f64,
}

#[derive(Serialize)]
struct Interval {
    y_hat: Vec<f64>,
    delta: Vec<f64>,
}

#[derive(Serialize)]
struct SampleResponse<'a> {
    dataset_id: &'a str,
    model_id: &'a str,
    vae_id: &'a str,
    id: &'a str,
    class_id: usize,
    split: &'static str,
    image: ImagePayload,
    latent: Vec<f64>,
    logits: Vec<f64>,
    softmax: Softmax,
    predicted: usize,
    correct: bool,
    interval: Option<Interval>,
}

#[derive(Deserialize)]
struct ModelQuery {
    model: Option<String>,
}

async fn sample(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<ModelQuery>,
) -> Result<Response, ApiError> {
    let row = s.row(&id)?;
    let m = s.model(q.model.as_deref())?;
    let latent = s.latents.latents.row(row).to_vec();
    let record = &s.dataset.samples[s.dataset_row[row]];
    let man = &s.dataset.manifest;
    let (logits, interval) = match &m.model {
        Model::Predictor(p) => {
            let iv = p.predict_interval(&latent)?;
            (iv.y_hat.clone(), Some(Interval { y_hat: iv.y_hat, delta: iv.delta }))
        }
        Model::Baseline(b) => (b.f.forward(&latent)?, None),
    };
    let sm = softmax_with_entropy(&logits);
    let predicted = sm.argmax();
    let class_id = s.latents.labels[row];
    let body = SampleResponse {
        dataset_id: &s.dataset_id,
        model_id: &m.id,
        vae_id: &s.vae_id,
        id: &s.latents.ids[row],
        class_id,
        split: s.split_name(row),
        image: ImagePayload::new(&record.image, [man.height, man.width, man.channels]),
        latent,
        logits,
        softmax: Softmax {
            rho: sm.rho,
            entropy: sm.entropy,
        },
        predicted,
        correct: predicted == class_id,
        interval,
    };
    Ok(Json(body).into_response())
}

/// Body of `POST /api/counterfactual`; anchor by `sample_id` or an explicit `z_t`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfBody {
    pub model: Option<String>,
    pub sample_id: Option<String>,
    pub z_t: Option<Vec<f64>>,
    pub eta1: Option<f64>,
    pub eta2: Option<f64>,
    pub eta3: Option<f64>,
    pub entropy_sign: Option<EntropySign>,
    pub max_iters: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceView {
    pub z_hat: Vec<f64>,
    pub image: ImagePayload,
    pub rho: Vec<f64>,
    pub entropy: f64,
    pub predicted: usize,
    pub correct: Option<bool>,
    pub ae_z: f64,
    pub ssim: f64,
    pub anchor_entropy: f64,
    pub objective_trace: Vec<f64>,
    pub best_iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfResponse {
    pub dataset_id: String,
    pub model_id: String,
    pub vae_id: String,
    pub sample_id: Option<String>,
    pub request: CfRequest<f64>,
    pub evidence: EvidenceView,
}

fn parse_body(bytes: &[u8]) -> Result<CfBody, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError {
            status: StatusCode::BAD_REQUEST,
            error: e.into_inner().to_string(),
            field,
        }
    })
}

fn unknown_field_name(err: &str) -> Option<String> {
    let start = err.find("unknown field `")? + "unknown field `".len();
    let len = err[start..].find('`')?;
    Some(err[start..start + len].to_string())
}

async fn counterfactual(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let body = parse_body(&body).map_err(|mut e| {
        if e.field.is_none() {
            e.field = unknown_field_name(&e.error);
        }
        e
    })?;
    let m = s.model(body.model.as_deref())?;
    if !matches!(m.model, Model::Predictor(_)) {
        return Err(ApiError::bad_request(
            Some("model"),
            format!("model `{}` has no interval widths; pick a calibrated predictor", m.id),
        ));
    }
    let (z_t, truth) = match (&body.sample_id, &body.z_t) {
        (Some(id), None) => {
            let row = s.row(id).map_err(|e| ApiError { field: Some("sample_id".into()), ..e })?;
            (s.latents.latents.row(row).to_vec(), Some(s.latents.labels[row]))
        }
        (None, Some(z)) => {
            if z.len() != s.latents.dim() {
                return Err(ApiError::bad_request(
                    Some("z_t"),
                    format!("expected {} latent entries, got {}", s.latents.dim(), z.len()),
                ));
            }
            (z.clone(), None)
        }
        (Some(_), Some(_)) => {
            return Err(ApiError::bad_request(Some("z_t"), "give either `sample_id` or `z_t`, not both"))
        }
        (None, None) => return Err(ApiError::bad_request(Some("sample_id"), "an anchor `sample_id` or `z_t` is required")),
    };
    let eta1 = body
        .eta1
        .ok_or_else(|| ApiError::bad_request(Some("eta1"), "`eta1` is required"))?;
    let defaults = CfRequest::new(z_t, eta1);
    let req = CfRequest {
        eta2: body.eta2.unwrap_or(defaults.eta2),
        eta3: body.eta3.unwrap_or(defaults.eta3),
        entropy_sign: body.entropy_sign.unwrap_or(defaults.entropy_sign),
        max_iters: body.max_iters.unwrap_or(defaults.max_iters),
        lr: body.lr.unwrap_or(defaults.lr),
        seed: body.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    req.validate()?;

    let model_id = m.id.clone();
    let state = Arc::clone(&s);
    let (req, ev) = tokio::task::spawn_blocking(move || {
        let Some(Model::Predictor(p)) = state.models.iter().find(|m| m.id == model_id).map(|m| &m.model) else {
            unreachable!("checked above")
        };
        generate_evidence(&req, p, &state.vae, truth).map(|ev| (req, ev))
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        error: e.to_string(),
        field: None,
    })??;

    let response = CfResponse {
        dataset_id: s.dataset_id.clone(),
        model_id: m.id.clone(),
        vae_id: s.vae_id.clone(),
        sample_id: body.sample_id,
        request: req,
        evidence: EvidenceView {
            image: ImagePayload::new(&ev.image, ev.image_shape),
            z_hat: ev.z_hat,
            entropy: ev.rho.entropy,
            rho: ev.rho.rho,
            predicted: ev.predicted,
            correct: ev.correct,
            ae_z: ev.ae_z,
            ssim: ev.ssim,
            anchor_entropy: ev.anchor_entropy,
            objective_trace: ev.objective_trace,
            best_iteration: ev.best_iteration,
        },
    };
    Ok(Json(response).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResponse {
    pub dataset_id: String,
    pub model_id: String,
    pub split: String,
    pub curve: ReliabilityCurve,
    pub mean_accuracy: f64,
}

async fn reliability(
    State(s): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<ReliabilityResponse> {
    let id = q
        .get("model")
        .ok_or_else(|| ApiError::bad_request(Some("model"), "query parameter `model` is required"))?;
    let m = s.model(Some(id))?;
    Ok(Json(ReliabilityResponse {
        dataset_id: s.dataset_id.clone(),
        model_id: m.id.clone(),
        split: "val".into(),
        mean_accuracy: m.report.curve.mean_accuracy(),
        curve: m.report.curve.clone(),
    }))
}
