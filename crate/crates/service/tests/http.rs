mod common;

use axum::http::{Method, StatusCode};
use serde_json::{json, Value};

use common::*;
use segsteer::server::{router, AppState};

async fn create(app: &axum::Router, seed: u64) -> String {
    let s = scene(seed);
    let (status, v) = call(app, Method::POST, "/sessions", Some(create_body(&s.image, Some(&s.labels)))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_owned()
}

async fn probs(app: &axum::Router, id: &str, mode: &str) -> String {
    let (status, v) = call(app, Method::GET, &format!("/sessions/{id}/prediction?mode={mode}&probs=true"), None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["probs"].as_str().unwrap().to_owned()
}

async fn click(app: &axum::Router, id: &str, row: i64, col: i64, class: i64) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/clicks"), Some(json!({"row": row, "col": col, "class_id": class}))).await
}

async fn adapt(app: &axum::Router, id: &str) -> Value {
    let (status, v) = call(app, Method::POST, &format!("/sessions/{id}/adapt"), Some(json!({"steps": 3}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn health_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(&dir.path().join("m0")), None), None);
    let (status, body) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("ok".into()));
    let (status, body) = call(&app, Method::GET, "/models", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["default_model"], "m0");
    assert_eq!(body["models"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(dir.path()), None), None);
    for (m, uri) in [
        (Method::GET, "/sessions/nope/prediction"),
        (Method::GET, "/sessions/nope/metrics"),
        (Method::POST, "/sessions/nope/undo"),
    ] {
        let (status, _) = call(&app, m, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
    let (status, _) = click(&app, "nope", 0, 0, 0).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_requests_are_422_and_leave_state_alone() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(dir.path()), None), None);
    let id = create(&app, 1).await;
    let before = probs(&app, &id, "disir").await;
    for (r, c, k) in [(-1, 0, 0), (0, -1, 0), (32, 0, 0), (0, 32, 1), (0, 0, 2), (0, 0, -1)] {
        let (status, v) = click(&app, &id, r, c, k).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "({r},{c},{k})");
        assert!(v["error"].is_string());
    }
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/prediction?mode=sideways"), None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/adapt"), Some(json!({"lr": -1.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, "/sessions", Some(json!({"image": "!!!"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(probs(&app, &id, "disir").await, before);
    let (_, curve) = call(&app, Method::GET, &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(curve["records"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn busy_session_is_409() {
    let dir = tempfile::tempdir().unwrap();
    let state = state_with(untrained_entry(dir.path()), None);
    let app = router(state.clone(), None);
    let id = create(&app, 2).await;
    let guard = state.session(&id).unwrap().write_owned().await;
    let (status, _) = click(&app, &id, 3, 3, 1).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/adapt"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    drop(guard);
    let (status, v) = click(&app, &id, 3, 3, 1).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["click_count"], 1);
}

#[tokio::test]
async fn fresh_session_matches_initial_and_adapt_without_clicks_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(dir.path()), None), None);
    let id = create(&app, 3).await;
    let initial = probs(&app, &id, "initial").await;
    assert_eq!(probs(&app, &id, "disir").await, initial);
    let v = adapt(&app, &id).await;
    let trace = v["loss_trace"].as_array().unwrap();
    assert_eq!(trace.len(), 4);
    assert!(trace.iter().all(|e| e["total"].as_f64() == Some(0.0)));
    assert_eq!(probs(&app, &id, "disir").await, initial);
}

#[tokio::test]
async fn undo_restores_previous_parameters_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(dir.path()), None), None);
    let id = create(&app, 4).await;
    let initial = probs(&app, &id, "disir").await;
    click(&app, &id, 5, 5, 1).await;
    adapt(&app, &id).await;
    let after_one = probs(&app, &id, "disir").await;
    assert_ne!(after_one, initial);
    click(&app, &id, 20, 20, 0).await;
    adapt(&app, &id).await;

    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["click_count"], 1);
    assert_eq!(v["theta_restored"], true);
    assert_eq!(v["removed"]["row"], 20);
    assert_eq!(probs(&app, &id, "disir").await, after_one);

    call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(probs(&app, &id, "disir").await, initial);
    let (_, curve) = call(&app, Method::GET, &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(curve["records"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(untrained_entry(dir.path()), None), None);
    let a = create(&app, 5).await;
    let b = create(&app, 5).await;
    let solo = create(&app, 5).await;

    click(&app, &a, 4, 4, 1).await;
    click(&app, &b, 10, 12, 0).await;
    adapt(&app, &b).await;
    adapt(&app, &a).await;
    click(&app, &b, 1, 30, 1).await;
    adapt(&app, &b).await;

    click(&app, &solo, 4, 4, 1).await;
    adapt(&app, &solo).await;
    assert_eq!(probs(&app, &a, "disir").await, probs(&app, &solo, "disir").await);
    assert_ne!(probs(&app, &a, "disir").await, probs(&app, &b, "disir").await);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("sessions");
    let entry = untrained_entry(&dir.path().join("model"));
    let app = router(state_with(entry.clone(), Some(&root)), None);
    let id = create(&app, 6).await;
    click(&app, &id, 7, 8, 1).await;
    adapt(&app, &id).await;
    click(&app, &id, 20, 3, 0).await;
    let before = probs(&app, &id, "disir").await;
    let (_, curve_before) = call(&app, Method::GET, &format!("/sessions/{id}/metrics"), None).await;
    drop(app);

    let state = state_with(entry, Some(&root));
    assert_eq!(state.recover().unwrap(), 1);
    let app = router(state, None);
    assert_eq!(probs(&app, &id, "disir").await, before);
    let (_, curve_after) = call(&app, Method::GET, &format!("/sessions/{id}/metrics"), None).await;
    assert_eq!(curve_after, curve_before);
    let (status, v) = call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["click_count"], 1);
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let web = dir.path().join("web");
    std::fs::create_dir_all(&web).unwrap();
    std::fs::write(web.join("index.html"), "<html>hi</html>").unwrap();
    std::fs::write(web.join("app.js"), "console.log(1)").unwrap();
    let state: std::sync::Arc<AppState> = state_with(untrained_entry(&dir.path().join("m")), None);
    let app = router(state, Some(&web));
    let (status, body) = call(&app, Method::GET, "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("<html>hi</html>".into()));
    let (status, body) = call(&app, Method::GET, "/app.js", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, Value::String("console.log(1)".into()));
    let (status, _) = call(&app, Method::GET, "/missing.css", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
}
