mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use common::*;
use conplan_cli::{exit, router, AppState, EngineConfig, PlanArtifact, SessionStore};
use http_body_util::BodyExt;
use serde_json::json;
use tower::ServiceExt;

async fn send(app: &axum::Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header(header::CONTENT_TYPE, "application/json");
    }
    let req = req
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

#[tokio::test]
async fn api_steps_and_cli_plan_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let r = ctu();
    let script = abstain_once_script(&r);
    let script_path = write_script(tmp.path(), "once.jsonl", &script);

    let cli_dir = tmp.path().join("cli");
    let ctu = ctu_path();
    let out = conplan(&[
        "plan",
        "--out",
        cli_dir.to_str().unwrap(),
        "--incident",
        ctu.to_str().unwrap(),
        "--script",
        script_path.to_str().unwrap(),
        "--seed",
        "7",
    ]);
    assert_eq!(out.status.code(), Some(exit::OK), "{}", stderr(&out));
    let cli_plan: PlanArtifact =
        serde_json::from_str(&std::fs::read_to_string(cli_dir.join("ctu-ransomware-7.plan.json")).unwrap()).unwrap();
    let cli_log = std::fs::read(cli_dir.join("ctu-ransomware-7.events.jsonl")).unwrap();

    let config = EngineConfig {
        seed: 7,
        ..EngineConfig::default()
    };
    let store = Arc::new(SessionStore::open(tmp.path().join("api")).unwrap());
    let app = router(AppState::new(store, config));
    let (status, _) = send(
        &app,
        "POST",
        "/v1/sessions",
        Some(json!({
            "incident": r,
            "session_id": "ctu-ransomware-7",
            "provider": "digital_twin_stub",
            "script": script,
        })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    // Drive it with single steps rather than one run call.
    for _ in 0..20 {
        let (status, body) = send(&app, "POST", "/v1/sessions/ctu-ransomware-7/step", None).await;
        assert_eq!(status, StatusCode::OK);
        let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
        if v["outcome"] == "completed" {
            break;
        }
    }
    let (_, plan) = send(&app, "GET", "/v1/sessions/ctu-ransomware-7/plan", None).await;
    let api_plan: PlanArtifact = serde_json::from_slice(&plan).unwrap();
    assert_eq!(api_plan, cli_plan);
    assert_eq!(api_plan.feedback_records, 1);
    let (_, api_log) = send(&app, "GET", "/v1/sessions/ctu-ransomware-7/events", None).await;
    assert_eq!(api_log, cli_log, "event logs differ");
    let on_disk = std::fs::read(tmp.path().join("api/ctu-ransomware-7.events.jsonl")).unwrap();
    assert_eq!(on_disk, cli_log);
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port)).ok()?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut response = String::new();
    stream.read_to_string(&mut response).ok()?;
    Some(response)
}

#[test]
fn serve_binary_answers_health() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let config = tmp.path().join("engine.toml");
    std::fs::write(&config, format!("[server]\nbind = \"127.0.0.1:{port}\"\n")).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_conplan"))
        .args(["serve", "--config", config.to_str().unwrap()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut response = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/v1/health") {
            response = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let sessions = http_get(port, "/v1/sessions");
    child.kill().unwrap();
    child.wait().unwrap();
    let response = response.expect("server came up");
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"ok\""));
    assert!(sessions.unwrap().ends_with("[]"));
    assert!(tmp.path().join("sessions").is_dir());
}
