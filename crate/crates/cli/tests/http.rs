use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use bayes_emu::gp::FitPolicy;
use bayes_emu::pipeline::{default_design, fit_store, run_pending, RunOptions};
use bayes_emu::store::RunStore;
use bayes_emu::targets::{Dataset, Model};
use bayes_emu_cli::http::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn toy_store(root: &Path, fit: bool) {
    let mut st = RunStore::create(root, Some(Model::Toy), Model::Toy.space()).unwrap();
    st.save_design(&default_design(Model::Toy, 0).unwrap()).unwrap();
    let data = Dataset::toy();
    st.save_dataset(&data).unwrap();
    let opts = RunOptions {
        n_steps: Some(4000),
        seed: 1,
        parallel: 2,
        keep_draws: false,
    };
    run_pending(&mut st, &data, &opts).unwrap();
    if fit {
        fit_store(&mut st, &FitPolicy::FixedToy).unwrap();
    }
}

async fn call(app: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn fitted() -> (tempfile::TempDir, AppState) {
    let dir = tempfile::tempdir().unwrap();
    toy_store(dir.path(), true);
    let app = AppState::from_store(dir.path().to_path_buf()).unwrap();
    (dir, app)
}

#[tokio::test]
async fn space_and_outputs() {
    let (_d, app) = fitted();
    let (s, v) = call(&app, "GET", "/api/v1/space", None).await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = v["dims"].as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["nu", "eps"]);
    let (s, v) = call(&app, "GET", "/api/v1/outputs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["model"], "toy");
    let outs: Vec<&str> = v["outputs"].as_array().unwrap().iter().map(|o| o["name"].as_str().unwrap()).collect();
    assert_eq!(outs, ["mean_theta", "sd_theta"]);
    assert_eq!(v["outputs"][0]["n_train"], 35);
}

#[tokio::test]
async fn predict_and_its_errors() {
    let (_d, app) = fitted();
    let (s, v) = call(&app, "POST", "/api/v1/predict", Some(json!({"x": {"nu": 1.0, "eps": 0.0}}))).await;
    assert_eq!(s, StatusCode::OK);
    let p = &v["predictions"][0];
    let (m, sd) = (p["mean"].as_f64().unwrap(), p["sd"].as_f64().unwrap());
    let exact = bayes_emu::targets::toy_conjugate_posterior(1.0, &Dataset::toy()).0;
    assert!((m - exact).abs() < 0.1, "{m} vs {exact}");
    assert!((p["ci95"][0].as_f64().unwrap() - (m - 1.959964 * sd)).abs() < 1e-12);

    let (s, v) = call(&app, "POST", "/api/v1/predict", Some(json!({"x": {"nu": 5.0, "eps": 0.0}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "OutOfRange");
    assert_eq!(v["error"]["field"], "nu");

    let (s, v) = call(
        &app,
        "POST",
        "/api/v1/predict",
        Some(json!({"x": {"nu": 1.0, "eps": 0.0}, "outputs": ["median"]})),
    )
    .await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("UnknownOutput")));

    let (s, v) = call(&app, "POST", "/api/v1/predict", Some(json!({"x": {"nu": 1.0}}))).await;
    assert_eq!((s, v["error"]["field"].as_str()), (StatusCode::BAD_REQUEST, Some("eps")));

    let (s, v) = call(&app, "POST", "/api/v1/predict", Some(json!([1, 2]))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidRequest")));
}

#[tokio::test]
async fn robust_queries() {
    let (_d, app) = fitted();
    let req = json!({
        "region": {"type": "box", "intervals": [{"lo": 0.8, "hi": 1.2}, {"lo": 0.0, "hi": 0.2}]},
        "n_e": 50, "n_s": 200, "seed": 3,
        "criteria": [{"output": "mean_theta", "op": ">", "threshold": 2.0}]
    });
    let (s, a) = call(&app, "POST", "/api/v1/robust", Some(req.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/api/v1/robust", Some(req)).await;
    assert_eq!(a, b);
    let o = &a["outputs"][0];
    assert!(o["max_mean"].as_f64().unwrap() >= o["min_mean"].as_f64().unwrap());
    assert_eq!(o["max_quantiles"].as_array().unwrap().len(), 5);
    let p = a["decision_probability"]["probability"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));

    let bad = json!({"region": {"type": "box", "intervals": [{"lo": 1.2, "hi": 0.8}, {"lo": 0.0, "hi": 0.2}]}});
    let (s, v) = call(&app, "POST", "/api/v1/robust", Some(bad)).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("BadRegion")));

    let outside = json!({"region": {"type": "point", "x": [3.0, 0.2]}});
    let (s, v) = call(&app, "POST", "/api/v1/robust", Some(outside)).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("BadRegion")));

    let crit = json!({
        "region": {"type": "point", "x": [1.0, 0.2]},
        "criteria": [{"output": "median", "op": "<", "threshold": 1.0}]
    });
    let (s, v) = call(&app, "POST", "/api/v1/robust", Some(crit)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["code"], "CriteriaUnknownOutput");
}

#[tokio::test]
async fn sensitivity_and_effects() {
    let (_d, app) = fitted();
    let (s, v) = call(&app, "GET", "/api/v1/sensitivity", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["outputs"].as_array().unwrap().len(), 2);
    let (s, v) = call(&app, "GET", "/api/v1/effects/mean_theta/nu?grid=9&n=100&seed=1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["grid"].as_array().unwrap().len(), 9);
    assert_eq!(v["q05"].as_array().unwrap().len(), 9);
    let (s, v) = call(&app, "GET", "/api/v1/effects/median/nu", None).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("UnknownOutput")));
}

#[tokio::test]
async fn reload_swaps_in_new_emulators() {
    let dir = tempfile::tempdir().unwrap();
    toy_store(dir.path(), false);
    let app = AppState::from_store(dir.path().to_path_buf()).unwrap();
    let x = json!({"x": {"nu": 1.0, "eps": 0.5}});
    let (s, v) = call(&app, "POST", "/api/v1/predict", Some(x.clone())).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("NoEmulatorLoaded")));
    let (s, _) = call(&app, "GET", "/api/v1/sensitivity", None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    {
        let mut st = RunStore::open_writer(dir.path()).unwrap();
        fit_store(&mut st, &FitPolicy::FixedToy).unwrap();
    }
    let (s, v) = call(&app, "POST", "/api/v1/admin/reload", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["outputs"], json!(["mean_theta", "sd_theta"]));
    let (s, _) = call(&app, "POST", "/api/v1/predict", Some(x)).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn reload_without_store_conflicts() {
    let state = bayes_emu::service::ServiceState::new(None, Model::Toy.space(), vec![]).unwrap();
    let app = AppState::new(state, None);
    let (s, v) = call(&app, "POST", "/api/v1/admin/reload", None).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("NoStore")));
}
