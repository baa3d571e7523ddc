#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::Value;
use shm_core::model::{two_level_frame, StructuralModel};
use shm_monitor::clock::Clock;
use shm_monitor::engine::{Engine, EngineConfig};
use shm_monitor::registry::{BindingRequest, Registry};
use tower::ServiceExt;

/// Device to node assignment of the validation run.
pub const DEVICES: [(&str, &str); 8] = [
    ("dev-001", "L1-N1"),
    ("dev-002", "L1-N2"),
    ("dev-003", "L1-N3"),
    ("dev-004", "L1-N4"),
    ("dev-005", "L2-N1"),
    ("dev-006", "L2-N2"),
    ("dev-007", "L2-N3"),
    ("dev-008", "L2-N4"),
];

pub fn validation_model() -> StructuralModel {
    two_level_frame("s1", 4.0, 3.0, 3.0)
}

pub fn bind_all(registry: &Registry, structure_id: &str) {
    for (device, node) in DEVICES {
        let request = BindingRequest {
            device_id: device.into(),
            structure_id: structure_id.into(),
            node_id: node.into(),
            active: true,
            replace: false,
        };
        registry.upsert_binding(request, 0).unwrap();
    }
}

/// Engine over the validation model with all eight devices bound.
pub fn engine(dir: Option<&Path>, config: EngineConfig, clock: Clock) -> Arc<Engine> {
    let registry = match dir {
        Some(d) => Registry::open(d).unwrap(),
        None => Registry::in_memory(),
    };
    registry.upsert_structure(validation_model()).unwrap();
    bind_all(&registry, "s1");
    Arc::new(Engine::with_registry(Arc::new(registry), config, clock))
}

pub async fn call(router: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, String) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let response = router.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

pub async fn call_json(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, text) = call(router, method, uri, body.map(|b| b.to_string())).await;
    let value = if text.is_empty() { Value::Null } else { serde_json::from_str(&text).unwrap() };
    (status, value)
}
