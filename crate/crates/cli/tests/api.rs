use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use calibra_cli::api::{router, AppState, Artifacts};
use calibra_cli::artifacts::decode_image;
use calibra_cli::cli::SplitArgs;
use calibra_core::calib::{train_alternating, train_ce_baseline, BaselineConfig, CalibConfig};
use calibra_core::data::{generate_dataset, stratified_split, GenerateConfig, LatentTable};
use calibra_core::reliability::{evaluate, EvalConfig, ReliabilityCurve};
use calibra_core::vae::{encode_means, train_vae, VaeConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const SPLIT: SplitArgs = SplitArgs {
    val_fraction: 0.2,
    split_seed: 7,
};

struct Fixture {
    state: Arc<AppState>,
    /// Deferral curve of `pred` computed directly, as the `eval` subcommand does.
    curve: ReliabilityCurve,
    val_id: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = generate_dataset(&GenerateConfig {
            n: 140,
            image_size: 16,
            seed: 4,
            ..GenerateConfig::default()
        })
        .unwrap();
        let images = data.image_matrix::<f64>();
        let shape = [data.manifest.height, data.manifest.width, data.manifest.channels];
        let vae_cfg = VaeConfig {
            latent_dim: 4,
            hidden: vec![32, 16],
            epochs: 2,
            ..VaeConfig::default()
        };
        let vae = train_vae(images.view(), shape, &vae_cfg).unwrap();
        let latents = LatentTable {
            ids: data.samples.iter().map(|s| s.id.clone()).collect(),
            labels: data.labels(),
            latents: encode_means(&vae, images.view()).unwrap(),
        };
        let split = stratified_split(&latents.labels, SPLIT.val_fraction, SPLIT.split_seed).unwrap();
        let train = latents.subset(&split.train);
        let val = latents.subset(&split.val);
        let k = latents.num_classes();
        let pred = train_alternating(
            train.latents.view(),
            &train.labels,
            k,
            &CalibConfig {
                epochs: 4,
                hidden: vec![16, 16],
                ..CalibConfig::default()
            },
        )
        .unwrap();
        let base = train_ce_baseline(
            train.latents.view(),
            &train.labels,
            k,
            &BaselineConfig {
                epochs: 4,
                hidden: vec![16, 16],
                ..BaselineConfig::default()
            },
        )
        .unwrap();
        let curve = evaluate("pred", &pred, val.latents.view(), &val.labels, &EvalConfig::default())
            .unwrap()
            .curve;
        let val_id = val.ids[0].clone();
        let state = AppState::new(
            Artifacts {
                dataset_id: "data".into(),
                dataset: data,
                vae_id: "vae".into(),
                vae,
                latents,
                predictors: vec![("pred".into(), pred)],
                baselines: vec![("base".into(), base)],
            },
            SPLIT,
            0.7,
        )
        .unwrap();
        Fixture { state, curve, val_id }
    })
}

fn app() -> Router {
    router(Arc::clone(&fixture().state), None)
}

async fn send(req: Request<Body>) -> (StatusCode, Value) {
    let res = app().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(uri: &str) -> (StatusCode, Value) {
    send(Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(body: Value) -> (StatusCode, Value) {
    send(
        Request::post("/api/counterfactual")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap(),
    )
    .await
}

#[tokio::test]
async fn models_lists_both_kinds() {
    let (status, body) = get("/api/models").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["dataset_id"], "data");
    assert_eq!(body["vae_id"], "vae");
    let kinds: Vec<_> = body["models"].as_array().unwrap().iter().map(|m| m["kind"].clone()).collect();
    assert_eq!(kinds, vec![json!("predictor"), json!("baseline")]);
    assert_eq!(body["models"][0]["counterfactual"], true);
    assert_eq!(body["models"][1]["counterfactual"], false);
}

#[tokio::test]
async fn samples_partition_by_split() {
    let (_, val) = get("/api/samples?split=val").await;
    let (_, train) = get("/api/samples?split=train&model=base").await;
    let (_, all) = get("/api/samples?split=all").await;
    let n = |v: &Value| v["samples"].as_array().unwrap().len();
    assert_eq!(n(&val) + n(&train), n(&all));
    assert_eq!(n(&all), 140);
    assert_eq!(train["model_id"], "base");
    for s in val["samples"].as_array().unwrap() {
        assert_eq!(s["split"], "val");
        let h = s["entropy"].as_f64().unwrap();
        assert!((0.0..=(7f64).ln() + 1e-12).contains(&h));
    }
    let (status, err) = get("/api/samples?split=test").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["field"], "split");
}

#[tokio::test]
async fn sample_returns_image_latent_and_interval() {
    let id = &fixture().val_id;
    let (status, body) = get(&format!("/api/sample/{id}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["id"], id.as_str());
    assert_eq!(body["image"]["encoding"], "f32le-base64");
    let shape: Vec<usize> = serde_json::from_value(body["image"]["shape"].clone()).unwrap();
    let pixels = decode_image(body["image"]["data"].as_str().unwrap()).unwrap();
    assert_eq!(pixels.len(), shape.iter().product::<usize>());
    assert_eq!(body["latent"].as_array().unwrap().len(), 4);
    let rho: Vec<f64> = serde_json::from_value(body["softmax"]["rho"].clone()).unwrap();
    assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(body["interval"]["delta"].as_array().unwrap().iter().all(|d| d.as_f64().unwrap() >= 0.0));

    let (_, base) = get(&format!("/api/sample/{id}?model=base")).await;
    assert!(base["interval"].is_null());
}

#[tokio::test]
async fn unknown_ids_are_json_404s() {
    let (status, body) = get("/api/sample/not-a-sample").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (status, _) = get("/api/reliability?model=ghost").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = get("/api/nothing/here").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn reliability_matches_direct_evaluation_exactly() {
    let (status, body) = get("/api/reliability?model=pred").await;
    assert_eq!(status, StatusCode::OK);
    let curve: ReliabilityCurve = serde_json::from_value(body["curve"].clone()).unwrap();
    let expected = &fixture().curve;
    assert_eq!(curve.fractions, expected.fractions);
    assert_eq!(curve.accuracies, expected.accuracies);
    assert_eq!(curve.to_csv(), expected.to_csv());
    assert_eq!(body["mean_accuracy"].as_f64().unwrap(), expected.mean_accuracy());
    let (status, body) = get("/api/reliability").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "model");
}

#[tokio::test]
async fn counterfactual_with_default_etas_is_well_formed() {
    let (status, body) = post(json!({
        "sample_id": fixture().val_id,
        "eta1": 0.1,
        "eta2": 0.5,
        "eta3": 0.2,
        "max_iters": 40
    }))
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let ev = &body["evidence"];
    let rho: Vec<f64> = serde_json::from_value(ev["rho"].clone()).unwrap();
    assert!((rho.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let ssim = ev["ssim"].as_f64().unwrap();
    assert!((-1.0..=1.0).contains(&ssim));
    assert!(ev["ae_z"].as_f64().unwrap() >= 0.0);
    assert_eq!(body["model_id"], "pred");
    assert_eq!(body["request"]["eta2"], 0.5);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let body = json!({ "sample_id": fixture().val_id, "eta1": 0.01, "entropy_sign": "maximize", "max_iters": 60 });
    let runs = (0..4).map(|_| post(body.clone()));
    let results = futures_join(runs).await;
    for (status, r) in &results {
        assert_eq!(*status, StatusCode::OK);
        assert_eq!(r, &results[0].1);
    }
}

async fn futures_join<F: std::future::Future<Output = (StatusCode, Value)> + Send + 'static>(
    futs: impl Iterator<Item = F>,
) -> Vec<(StatusCode, Value)> {
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn invalid_counterfactual_bodies_name_the_field() {
    let id = fixture().val_id.clone();
    let cases = [
        (json!({ "sample_id": id, "eta1": -1.0 }), "eta1"),
        (json!({ "sample_id": id, "eta1": 0.1, "eta3": -0.2 }), "eta3"),
        (json!({ "sample_id": id }), "eta1"),
        (json!({ "eta1": 0.1 }), "sample_id"),
        (json!({ "z_t": [0.0, 1.0], "eta1": 0.1 }), "z_t"),
        (json!({ "sample_id": id, "eta1": 0.1, "max_iters": 0 }), "max_iters"),
        (json!({ "sample_id": id, "eta1": "big" }), "eta1"),
        (json!({ "sample_id": id, "eta1": 0.1, "temperature": 3 }), "temperature"),
        (json!({ "sample_id": id, "eta1": 0.1, "model": "base" }), "model"),
    ];
    for (body, field) in cases {
        let (status, err) = post(body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(err["field"], field, "{body} -> {err}");
    }
    let (status, err) = post(json!({ "sample_id": "ghost", "eta1": 0.1 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["field"], "sample_id");
}

#[tokio::test]
async fn explicit_anchor_matches_sample_anchor() {
    let id = fixture().val_id.clone();
    let (_, sample) = get(&format!("/api/sample/{id}")).await;
    let (_, a) = post(json!({ "sample_id": id, "eta1": 1.0, "max_iters": 30 })).await;
    let (_, b) = post(json!({ "z_t": sample["latent"], "eta1": 1.0, "max_iters": 30 })).await;
    assert_eq!(a["evidence"]["z_hat"], b["evidence"]["z_hat"]);
    assert!(b["evidence"]["correct"].is_null());
}
