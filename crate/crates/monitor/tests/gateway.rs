mod common;

use axum::http::StatusCode;
use common::{call, call_json, engine, validation_model};
use serde_json::json;
use shm_monitor::clock::Clock;
use shm_monitor::engine::EngineConfig;
use shm_monitor::gateway::router;
use shm_monitor::registry::Registry;
use std::sync::Arc;

fn batch(device: &str, times: &[i64]) -> serde_json::Value {
    let samples: Vec<_> = times.iter().map(|t| json!({"t_ms": t, "dx_m": 0.001, "dy_m": 0.0, "dz_m": 0.0})).collect();
    json!({"device_id": device, "samples": samples})
}

#[tokio::test]
async fn ingest_statuses() {
    let e = engine(None, EngineConfig::default(), Clock::starting_at(0));
    let app = router(e.clone());

    let times: Vec<i64> = (0..10).map(|k| k * 50).collect();
    let (status, body) = call_json(&app, "POST", "/api/v1/ingest", Some(batch("dev-001", &times))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body, json!({"accepted": 10, "rejected": []}));

    // same batch again: every sample is a replay
    let (status, body) = call_json(&app, "POST", "/api/v1/ingest", Some(batch("dev-001", &times))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["accepted"], 0);
    assert_eq!(body["rejected"].as_array().unwrap().len(), 10);
    assert!(body["rejected"].as_array().unwrap().iter().all(|r| r["reason"] == "out_of_order"));

    let (status, body) =
        call_json(&app, "POST", "/api/v1/ingest", Some(batch("dev-002", &[0, 50, 100, 150, 140, 200, 250, 300, 350, 400]))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body, json!({"accepted": 9, "rejected": [{"index": 4, "reason": "out_of_order"}]}));

    let (status, _) = call_json(&app, "POST", "/api/v1/ingest", Some(batch("dev-404", &[1]))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "POST", "/api/v1/ingest", Some("{\"device_id\":".into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body.contains("malformed"));
    let (status, _) = call(&app, "POST", "/api/v1/ingest", Some(r#"{"device_id":"dev-003"}"#.into())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, body) = call_json(&app, "POST", "/api/v1/ingest", Some(json!({"device_id": "dev-003", "samples": []}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(body["accepted"], 0);

    assert_eq!(e.stats().samples_accepted, 19);
}

#[tokio::test]
async fn admin_routes() {
    let registry = Arc::new(Registry::in_memory());
    let e = Arc::new(shm_monitor::engine::Engine::with_registry(registry, EngineConfig::default(), Clock::starting_at(0)));
    let app = router(e.clone());
    let model_file = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../models/two-level.json")).unwrap();
    assert_eq!(serde_json::from_str::<shm_core::StructuralModel>(&model_file).unwrap(), validation_model());

    let (status, body) = call_json(&app, "PUT", "/api/v1/structures/s1", Some(serde_json::from_str(&model_file).unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({"config_version": 1}));

    let (status, body) = call_json(&app, "GET", "/api/v1/structures/s1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<shm_core::StructuralModel>(body).unwrap(), validation_model());

    let mut bad = validation_model();
    bad.columns[0].top_node_id = "missing".into();
    bad.scale_factor = 0.0;
    let (status, body) = call_json(&app, "PUT", "/api/v1/structures/s1", Some(serde_json::to_value(&bad).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["details"].as_array().unwrap().len() >= 2, "{body}");

    let (status, _) = call_json(&app, "PUT", "/api/v1/structures/other", Some(serde_json::from_str(&model_file).unwrap())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let bind = |node: &str| Some(json!({"node_id": node}));
    let (status, body) = call_json(&app, "PUT", "/api/v1/structures/s1/bindings/dev-001", bind("L1-N1")).await;
    assert_eq!((status, body), (StatusCode::OK, json!({"config_version": 2})));
    let (status, _) = call_json(&app, "PUT", "/api/v1/structures/s1/bindings/dev-002", bind("L1-N1")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call_json(&app, "PUT", "/api/v1/structures/s1/bindings/dev-001", bind("L1-N2")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call_json(
        &app,
        "PUT",
        "/api/v1/structures/s1/bindings/dev-001",
        Some(json!({"node_id": "L1-N2", "replace": true})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call_json(&app, "PUT", "/api/v1/structures/s1/bindings/dev-003", bind("nowhere")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&app, "PUT", "/api/v1/structures/s9/bindings/dev-003", bind("L1-N1")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let limits = json!({"max_dx_m": 0.25, "max_dy_m": 0.25, "max_dz_m": 0.1});
    let (status, body) = call_json(&app, "PUT", "/api/v1/structures/s1/thresholds", Some(limits)).await;
    assert_eq!((status, body), (StatusCode::OK, json!({"config_version": 4})));
    let (status, _) = call_json(
        &app,
        "PUT",
        "/api/v1/structures/s1/thresholds",
        Some(json!({"max_dx_m": -1.0, "max_dy_m": 0.25, "max_dz_m": 0.1})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, config) = call_json(&app, "GET", "/api/v1/structures/s1/config", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(config["config_version"], 4);
    assert_eq!(config["node_devices"], json!({"L1-N2": "dev-001"}));
    assert_eq!(config["thresholds"]["max_dx_m"], 0.25);
    let (status, _) = call_json(&app, "GET", "/api/v1/structures/s9/config", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call_json(&app, "GET", "/api/v1/structures/s9", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn export_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let e = engine(Some(dir.path()), EngineConfig::default(), Clock::starting_at(0));
    let app = router(e.clone());
    for t in [50, 100, 150, 200] {
        e.tick("s1", t).unwrap();
    }
    let (status, body) = call(&app, "GET", "/api/v1/structures/s1/export?from_ms=100&to_ms=200", None).await;
    assert_eq!(status, StatusCode::OK);
    let stamps: Vec<i64> = body
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["frame_t_ms"].as_i64().unwrap())
        .collect();
    assert_eq!(stamps, [100, 150, 200]);

    let (status, body) = call(&app, "GET", "/api/v1/structures/s1/export", None).await;
    assert_eq!((status, body.lines().count()), (StatusCode::OK, 4));
    let (status, body) = call(&app, "GET", "/api/v1/structures/s1/export?from_ms=300&to_ms=400", None).await;
    assert_eq!((status, body.as_str()), (StatusCode::OK, ""));
    let (status, _) = call(&app, "GET", "/api/v1/structures/s1/export?from_ms=400&to_ms=300", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/api/v1/structures/nope/export", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
