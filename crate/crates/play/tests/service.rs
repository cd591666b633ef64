use std::time::Duration;

use futures::StreamExt;
use qfrog_core::nn::{save_weights, MlpSpec, PolicyWeights, Role};
use qfrog_play::message::state_schema;
use qfrog_play::{serve_on, AgentPolicy, AppState};
use reqwest::{Client, StatusCode};
use serde_json::{json, Value};
use tokio::net::TcpListener;

struct Server {
    base: String,
    http: Client,
}

async fn start(policy: Option<AgentPolicy>, static_dir: Option<std::path::PathBuf>) -> Server {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = AppState::new(policy, Duration::from_secs(600));
    tokio::spawn(serve_on(listener, app, static_dir));
    Server {
        base: format!("http://{addr}"),
        http: Client::new(),
    }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status();
        (status, r.json().await.unwrap())
    }

    async fn create(&self, body: Value) -> String {
        let (status, v) = self.post("/api/sessions", body).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    async fn act(&self, id: &str, frog: &str, action: &str) -> (StatusCode, Value) {
        self.post(&format!("/api/sessions/{id}/actions"), json!({"frog": frog, "action": action}))
            .await
    }
}

/// Fixed-argmax actor written as a real checkpoint file.
fn fixed_actor(dir: &std::path::Path, name: &str, action: usize) -> std::path::PathBuf {
    let mut w = PolicyWeights::zeros(MlpSpec::new(&[192, 4, 5]).unwrap(), Role::Actor);
    w.layers[1].bias[action] = 1.0;
    let path = dir.join(name);
    save_weights(&w, &path).unwrap();
    path
}

fn assert_valid(state: &Value) {
    let validator = jsonschema::validator_for(&state_schema()).unwrap();
    let errors: Vec<String> = validator.iter_errors(state).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}\n{state}");
}

fn car_cells(state: &Value) -> usize {
    state["cells"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .filter(|c| c["kind"] == "car")
        .count()
}

#[tokio::test]
async fn create_hotseat_session() {
    let s = start(None, None).await;
    let (status, v) = s.post("/api/sessions", json!({"mode": "hotseat", "cars": 2, "seed": 9})).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["schema_version"], 1);
    let state = &v["state"];
    assert_valid(state);
    assert_eq!(car_cells(state), 2);
    assert!(state["frogs"].as_array().unwrap().iter().all(|f| f["row"] == 7));
    assert_eq!(state["tick"], 0);

    let (status, again) = s.get(&format!("/api/sessions/{}", v["session_id"].as_str().unwrap())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&again, state);

    let (status, schema) = s.get("/api/schema").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(schema, state_schema());
}

#[tokio::test]
async fn barrier_over_http_and_live_channel() {
    let s = start(None, None).await;
    let id = s.create(json!({"mode": "hotseat", "cars": 3, "seed": 4})).await;
    let resp = s.http.get(format!("{}/api/sessions/{id}/events", s.base)).send().await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut events = resp.bytes_stream();
    let mut buffer = String::new();
    let mut next_state = async || -> Value {
        loop {
            if let Some(end) = buffer.find("\n\n") {
                let frame: String = buffer.drain(..end + 2).collect();
                if let Some(data) = frame.lines().find_map(|l| l.strip_prefix("data: ")) {
                    return serde_json::from_str(data).unwrap();
                }
                continue;
            }
            let chunk = tokio::time::timeout(Duration::from_secs(5), events.next()).await.unwrap().unwrap().unwrap();
            buffer.push_str(std::str::from_utf8(&chunk).unwrap());
        }
    };
    let first = next_state().await;
    assert_eq!(first["tick"], 0);

    let (status, half) = s.act(&id, "A", "UP").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(half["resolved"], false);
    assert_eq!(half["waiting_for"], json!(["B"]));
    assert_eq!(half["state"]["cells"], first["cells"]);
    assert_eq!(half["state"]["frogs"][0]["row"], 7);
    assert_eq!(half["state"]["frogs"][0]["pending"], true);

    let (status, dup) = s.act(&id, "A", "DOWN").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(dup["error"]["code"], "already_submitted");
    assert_eq!(dup["schema_version"], 1);

    let (_, full) = s.act(&id, "B", "STAY").await;
    assert_eq!(full["resolved"], true);
    assert_eq!(full["state"]["tick"], 1);
    let pushed = next_state().await;
    assert_eq!(pushed, full["state"]);
    assert_valid(&pushed);
}

#[tokio::test]
async fn agent_modes_need_a_policy() {
    let s = start(None, None).await;
    for mode in ["human-vs-agent", "agent-demo"] {
        let (status, v) = s.post("/api/sessions", json!({"mode": mode})).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"]["code"], "policy_required");
    }
    let (status, v) = s
        .post("/api/sessions", json!({"mode": "human-vs-agent", "checkpoint": "/nonexistent/q.qfw"}))
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["code"], "bad_checkpoint");

    let dir = tempfile::tempdir().unwrap();
    let ckpt = fixed_actor(dir.path(), "q.qfw", 2);
    let id = s
        .create(json!({"mode": "human-vs-agent", "cars": 1, "seed": 0, "checkpoint": ckpt}))
        .await;
    let (status, v) = s.act(&id, "B", "UP").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "agent_controlled");
    let (_, hint) = s.get(&format!("/api/sessions/{id}/hint?frog=B")).await;
    assert_eq!(hint["action"], "LEFT");
    let (_, v) = s.act(&id, "A", "STAY").await;
    assert_eq!(v["resolved"], true);
    assert_eq!(v["state"]["frogs"][1]["col"], 4);
    assert_eq!(v["state"]["frogs"][1]["controller"], "agent");
}

#[tokio::test]
async fn agent_demo_from_server_policy() {
    let dir = tempfile::tempdir().unwrap();
    fixed_actor(dir.path(), "q_A.qfw", 0);
    fixed_actor(dir.path(), "q_B.qfw", 4);
    let policy = AgentPolicy::load(dir.path()).unwrap();
    let s = start(Some(policy), None).await;
    let id = s.create(json!({"mode": "agent-demo", "cars": 1, "seed": 2})).await;
    let (status, v) = s.act(&id, "A", "UP").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "agent_controlled");
    let (_, v) = s.post(&format!("/api/sessions/{id}/step"), json!({})).await;
    assert_eq!(v["state"]["tick"], 1);
    assert_eq!(v["state"]["frogs"][1]["row"], 7);
}

#[tokio::test]
async fn finished_episode_then_reset() {
    let s = start(None, None).await;
    let id = s.create(json!({"mode": "hotseat", "frogs": 1, "cars": 1, "seed": 5, "max_steps": 3})).await;
    for _ in 0..3 {
        s.act(&id, "A", "STAY").await;
    }
    let (_, state) = s.get(&format!("/api/sessions/{id}")).await;
    assert_eq!(state["done"], true);
    assert_eq!(state["outcome"], "TIMEOUT");
    assert_eq!(state["frogs"][0]["cumulative_reward"], -3.0);
    let (status, v) = s.act(&id, "A", "UP").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "episode_over");
    assert!(v["error"]["message"].as_str().unwrap().contains("reset"));

    let (_, a) = s.post(&format!("/api/sessions/{id}/reset"), json!({"seed": 77})).await;
    let (_, b) = s.post(&format!("/api/sessions/{id}/reset"), json!({"seed": 77})).await;
    assert_eq!(a["cells"], b["cells"]);
    assert_eq!(a["frogs"], b["frogs"]);
    assert_eq!(b["mode"], "hotseat");
    assert_eq!(b["max_steps"], 3);
    assert_eq!(b["frogs"][0]["cumulative_reward"], 0.0);
    assert_valid(&b);
}

#[tokio::test]
async fn interleaved_sessions_stay_isolated() {
    let s = start(None, None).await;
    let one = s.create(json!({"seed": 3})).await;
    let two = s.create(json!({"seed": 3})).await;
    for _ in 0..3 {
        s.act(&one, "A", "UP").await;
        s.act(&two, "B", "LEFT").await;
        s.act(&one, "B", "UP").await;
    }
    let (_, a) = s.get(&format!("/api/sessions/{one}")).await;
    let (_, b) = s.get(&format!("/api/sessions/{two}")).await;
    assert_eq!(b["tick"], 0);
    assert_eq!(b["frogs"][1]["pending"], true);
    assert!(a["tick"].as_u64().unwrap() >= 1);
}

#[tokio::test]
async fn bad_requests() {
    let s = start(None, None).await;
    let (status, v) = s.get("/api/sessions/missing").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["error"]["code"], "not_found");
    let (status, v) = s.post("/api/sessions", json!({"mode": "solo"})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["schema_version"], 1);
    let (status, _) = s.post("/api/sessions", json!({"cars": 9})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let id = s.create(json!({})).await;
    let (status, _) = s.act(&id, "C", "UP").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s.act(&id, "A", "JUMP").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, v) = s.get(&format!("/api/sessions/{id}/hint")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "no_policy");
}

#[tokio::test]
async fn serves_static_assets() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>frog</h1>").unwrap();
    let s = start(None, Some(dir.path().to_path_buf())).await;
    let body = s.http.get(format!("{}/index.html", s.base)).send().await.unwrap().text().await.unwrap();
    assert_eq!(body, "<h1>frog</h1>");
    let (status, _) = s.get("/api/health").await;
    assert_eq!(status, StatusCode::OK);
}
