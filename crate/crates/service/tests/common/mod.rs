#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use segsteer::registry::{ModelEntry, Registry};
use segsteer::server::AppState;
use segsteer_core::adapt::AdaptConfig;
use segsteer_core::raster::{decode_pgm, encode_pgm, encode_ppm, ImageTensor, LabelMap};
use segsteer_core::segnet::{save_model, MiniLink, MiniLinkConfig};
use segsteer_core::synthgen::{gen_scene, DomainSpec, Scene};

pub fn untrained_entry(dir: &Path) -> ModelEntry {
    let config = MiniLinkConfig::default();
    let model = MiniLink::new(config).unwrap();
    save_model(&model.init_params(), &config, dir).unwrap();
    ModelEntry::load(dir).unwrap()
}

pub fn state_with(entry: ModelEntry, session_root: Option<&Path>) -> Arc<AppState> {
    let mut reg = Registry::new();
    reg.insert(entry).unwrap();
    Arc::new(AppState::new(reg, session_root.map(Path::to_path_buf), AdaptConfig::default(), None))
}

pub fn scene(seed: u64) -> Scene {
    gen_scene(seed, &DomainSpec::a(), 32, 32).unwrap()
}

pub fn create_body(image: &ImageTensor, gt: Option<&LabelMap>) -> Value {
    let mut body = serde_json::json!({ "image": B64.encode(encode_ppm(image).unwrap()) });
    if let Some(gt) = gt {
        body["gt"] = Value::String(B64.encode(encode_pgm(gt)));
    }
    body
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}

pub fn decode_labels(v: &Value) -> LabelMap {
    let bytes = B64.decode(v["labels"].as_str().unwrap()).unwrap();
    decode_pgm(&bytes, Path::new("labels"), None).unwrap()
}
