use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use scannability::dataset::{encode_png, filter_trials, synth_generate, PageImage, SynthConfig};
use scannability::features::fit_norm;
use scannability::model::{ModelBundle, ModelConfig, ScannabilityNet, Task, TrainConfig};
use scannability::service::{router, AppState, LoadedModel};
use scannability::tensor::AdamConfig;
use scannability::cli::{prepare, train_net};

struct Fixture {
    page_b64: String,
    bbox: [f64; 4],
    target_type: String,
    n_candidates: u32,
}

fn corpus() -> &'static (scannability::dataset::SynthCorpus, PageImage) {
    static C: OnceLock<(scannability::dataset::SynthCorpus, PageImage)> = OnceLock::new();
    C.get_or_init(|| {
        let c = synth_generate(&SynthConfig { users: 120, ..Default::default() }, 8).unwrap();
        let img = c.pages[0].render();
        (c, img)
    })
}

fn fixture() -> Fixture {
    let (c, img) = corpus();
    let page_id = &c.pages[0].id;
    let r = c.records.iter().find(|r| &r.page_id == page_id).unwrap();
    Fixture {
        page_b64: base64::engine::general_purpose::STANDARD.encode(encode_png(img).unwrap()),
        bbox: [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h],
        target_type: r.target_type.as_str().into(),
        n_candidates: r.n_candidates,
    }
}

/// Untrained full-resolution bundle with a classifier.
fn full_bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| {
        let (c, _) = corpus();
        let (kept, _) = filter_trials(&c.records);
        let norm = fit_norm(&kept, "all").unwrap();
        let cfg = ModelConfig::default();
        let cls = ModelConfig { task: Task::Classification, ..cfg.clone() };
        ModelBundle {
            regression: ScannabilityNet::new(cfg, norm.clone(), 0).unwrap(),
            classification: Some(ScannabilityNet::new(cls, norm, 1).unwrap()),
        }
    })
}

/// Regression-only model trained briefly on noise-free synthetic data.
fn trained_bundle() -> &'static ModelBundle {
    static B: OnceLock<ModelBundle> = OnceLock::new();
    B.get_or_init(|| {
        let (c, _) = corpus();
        let prepared = prepare(&c.records, [0.8, 0.1, 0.1], 0).unwrap();
        let train_cfg = TrainConfig {
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            max_epochs: 3,
            ..Default::default()
        };
        let cfg = ModelConfig { page_res: 64, ..Default::default() };
        let (net, _) = train_net(cfg, &train_cfg, &prepared, &c.render_pages()).unwrap();
        ModelBundle {
            regression: net,
            classification: None,
        }
    })
}

fn app(bundle: Option<&ModelBundle>, cap: usize) -> axum::Router {
    let model = bundle.map(|b| LoadedModel {
        bundle: b.clone(),
        version: "test".into(),
    });
    router(AppState::new(model, cap))
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn predict_body(f: &Fixture) -> Value {
    json!({
        "screenshot": f.page_b64,
        "bbox": f.bbox,
        "target_type": f.target_type,
        "n_candidates": f.n_candidates,
    })
}

fn whatif_body(f: &Fixture, rows: usize, cols: usize, region: Option<[f64; 4]>) -> Value {
    let mut grid = json!({ "rows": rows, "cols": cols });
    if let Some(r) = region {
        grid["region"] = json!(r);
    }
    json!({
        "screenshot": f.page_b64,
        "bbox": f.bbox,
        "target_type": f.target_type,
        "n_candidates": f.n_candidates,
        "grid": grid,
    })
}

#[tokio::test]
async fn predict_returns_full_attention_map() {
    let f = fixture();
    let (status, v) = call(app(Some(full_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["attention"].as_array().unwrap().len(), 4096);
    assert_eq!(v["grid"], 64);
    assert!(v["seconds"].as_f64().unwrap().is_finite());
    let probs: Vec<f64> = v["class_probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 5);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
}

#[tokio::test]
async fn predict_is_deterministic() {
    let f = fixture();
    let (_, a) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    let (_, b) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(a, b);
    assert!(a["class_probs"].is_null());
}

#[tokio::test]
async fn bbox_outside_page_is_rejected() {
    let mut f = fixture();
    f.bbox = [1000.0, 10.0, 60.0, 30.0];
    let (status, v) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "bbox");
}

#[tokio::test]
async fn unknown_target_type_is_rejected() {
    let mut f = fixture();
    f.target_type = "slider".into();
    let (status, v) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "target_type");
}

#[tokio::test]
async fn invalid_screenshot_is_rejected() {
    let mut f = fixture();
    f.page_b64 = "not base64!".into();
    let (status, v) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "screenshot");
}

#[tokio::test]
async fn single_cell_whatif_matches_predict() {
    let f = fixture();
    let [x, y, w, h] = f.bbox;
    let region = [x + w / 2.0 - 1.0, y + h / 2.0 - 1.0, 2.0, 2.0];
    let (s1, p) = call(app(Some(trained_bundle()), 1024), "POST", "/predict", Some(predict_body(&f))).await;
    let (s2, wi) = call(app(Some(trained_bundle()), 1024), "POST", "/whatif", Some(whatif_body(&f, 1, 1, Some(region)))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{wi}");
    let placed = wi["placements"][0][0].as_array().unwrap();
    for (a, b) in placed.iter().zip(f.bbox) {
        assert!((a.as_f64().unwrap() - b).abs() < 1e-9);
    }
    let a = p["seconds"].as_f64().unwrap();
    let b = wi["seconds"][0][0].as_f64().unwrap();
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}

#[tokio::test]
async fn oversized_grid_is_rejected() {
    let f = fixture();
    let (status, v) = call(app(Some(trained_bundle()), 9), "POST", "/whatif", Some(whatif_body(&f, 40, 40, None))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "grid");
}

#[tokio::test]
async fn whatif_prefers_the_top_of_the_page() {
    let f = fixture();
    let (status, v) = call(app(Some(trained_bundle()), 1024), "POST", "/whatif", Some(whatif_body(&f, 4, 4, None))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let row_mean = |r: usize| v["seconds"][r].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).sum::<f64>() / 4.0;
    assert!(row_mean(0) < row_mean(3), "top {} bottom {}", row_mean(0), row_mean(3));
}

#[tokio::test]
async fn no_model_returns_503() {
    let f = fixture();
    let (status, v) = call(app(None, 1024), "POST", "/predict", Some(predict_body(&f))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].as_str().unwrap().contains("no model"));
    let (status, _) = call(app(None, 1024), "POST", "/whatif", Some(whatif_body(&f, 1, 1, None))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_reports_model_state() {
    let (status, v) = call(app(None, 1024), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({ "status": "no_model", "model_version": null }));
    let state = AppState::new(None, 1024);
    state.swap(Some(LoadedModel {
        bundle: trained_bundle().clone(),
        version: "v1-abc".into(),
    }));
    let (_, v) = call(router(Arc::clone(&state)), "GET", "/health", None).await;
    assert_eq!(v, json!({ "status": "ok", "model_version": "v1-abc" }));
}
