use std::net::SocketAddr;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use planeval::orchestrator::ScriptedMockBackend;
use planeval::{load_kb, HashEmbedder, IndexedKb, RetrievalConfig};
use planeval_cli::server::{serve, AppState};
use serde_json::{json, Value};

fn planeval(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_planeval"))
        .args(args)
        .current_dir(dir)
        .env_remove("PLANEVAL_CONFIG")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn start(kb: &Path) -> SocketAddr {
    let embedder = Arc::new(HashEmbedder::default());
    let ikb = IndexedKb::build(load_kb(kb).unwrap(), embedder.as_ref()).unwrap();
    let state = Arc::new(AppState {
        ikb,
        embedder,
        backend: Arc::new(ScriptedMockBackend),
        retrieval: RetrievalConfig::default(),
    });
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        tokio::runtime::Runtime::new().unwrap().block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            serve(state, listener).await.unwrap();
        })
    });
    rx.recv().unwrap()
}

/// POSTs `body`, returning status and parsed JSON regardless of status.
fn post(addr: SocketAddr, path: &str, body: &str) -> (u16, Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent
        .post(&format!("http://{addr}{path}"))
        .content_type("application/json")
        .send(body)
        .unwrap();
    (resp.status().as_u16(), resp.body_mut().read_json().unwrap())
}

fn get(addr: SocketAddr, path: &str) -> (u16, Value) {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let mut resp = agent.get(&format!("http://{addr}{path}")).call().unwrap();
    (resp.status().as_u16(), resp.body_mut().read_json().unwrap())
}

#[test]
fn service_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planeval(d, &["synth", "--seed", "4", "--protocols", "3", "--plans-per-protocol", "30", "--violation-rate", "0.3", "--out", "data"]);
    planeval(d, &[
        "kb", "build", "--plans", "data/plans", "--protocols", "data/protocols", "--split", "0.1",
        "--seed", "4", "--out", "kb.json",
    ]);
    let addr = start(&d.join("kb.json"));

    assert_eq!(get(addr, "/healthz"), (200, json!({ "status": "ok" })));
    let (status, stats) = get(addr, "/v1/kb/stats");
    assert_eq!(status, 200);
    assert_eq!(stats["total_entries"], 81);
    assert_eq!(stats["protocols"].as_object().unwrap().len(), 3);

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("kb.json.heldout/manifest.json")).unwrap()).unwrap();
    for entry in manifest["plans"].as_array().unwrap() {
        let file = format!("kb.json.heldout/{}", entry["file"].as_str().unwrap());
        let plan: Value = serde_json::from_str(&std::fs::read_to_string(d.join(&file)).unwrap()).unwrap();
        let body = json!({ "plan": plan }).to_string();

        let cli: Value = serde_json::from_slice(&planeval(d, &["retrieve", "--plan", &file, "--kb", "kb.json", "--json"])).unwrap();
        assert_eq!(post(addr, "/v1/retrieve", &body), (200, cli));

        let cli: Value = serde_json::from_slice(&planeval(d, &["score", "--plan", &file, "--kb", "kb.json", "--json"])).unwrap();
        assert_eq!(post(addr, "/v1/score", &body), (200, cli));

        let (status, report) = post(addr, "/v1/check", &body);
        assert_eq!(status, 200);
        assert!(report["violations"].is_array());

        let (status, explained) = post(addr, "/v1/explain", &body);
        assert_eq!(status, 200);
        assert_eq!(explained["agreement"]["overall"], true);
    }
}

#[test]
fn service_errors_have_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    planeval(d, &["synth", "--seed", "5", "--protocols", "1", "--plans-per-protocol", "15", "--out", "data"]);
    planeval(d, &[
        "kb", "build", "--plans", "data/plans", "--protocols", "data/protocols", "--split", "0.1",
        "--seed", "5", "--out", "kb.json",
    ]);
    let addr = start(&d.join("kb.json"));

    let (status, body) = post(addr, "/v1/retrieve", "{not json");
    assert_eq!(status, 400);
    assert_eq!(body["error"]["category"], "request");

    let unknown = json!({ "plan": { "plan_id": "x", "protocol_name": "Nope", "metrics": {} } });
    let (status, body) = post(addr, "/v1/retrieve", &unknown.to_string());
    assert_eq!(status, 404);
    assert_eq!(body["error"]["category"], "knowledge_base");

    let file = std::fs::read_dir(d.join("kb.json.heldout/plans")).unwrap().next().unwrap().unwrap().path();
    let plan: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
    let bad_k = json!({ "plan": plan, "config": { "alpha": 0.0, "beta_norm": 1.0, "beta_raw": 0.0, "k": 11 } });
    let (status, body) = post(addr, "/v1/retrieve", &bad_k.to_string());
    assert_eq!(status, 422);
    assert_eq!(body["error"]["category"], "retrieval");

    let mut missing = plan.clone();
    missing["metrics"].as_object_mut().unwrap().clear();
    let (status, body) = post(addr, "/v1/check", &json!({ "plan": missing }).to_string());
    assert_eq!(status, 422);
    assert_eq!(body["error"]["category"], "validation");

    assert_eq!(get(addr, "/v1/nothing").0, 404);
}
