use std::sync::Arc;
use std::thread;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use iters::envs::EnvKind;
use iters::orchestrator::{run_iters, ItersConfig, RunOutcome, Scale, SimulatedUser};
use iters::shaping::FitConfig;
use iters_cli::service::{router, HumanFeedback, RunInfo, Session};

fn tiny(n: usize) -> ItersConfig {
    let mut cfg = ItersConfig::defaults(EnvKind::Inventory, Scale::Desk);
    cfg.k = 300;
    cfg.n = n;
    cfg.p = 20;
    cfg.baseline_rollouts = 5;
    cfg.baseline_cap = 50;
    cfg.eval_episodes = 3;
    cfg.summary_episodes = 4;
    cfg.m = 2;
    cfg.dqn.warmup = 100;
    cfg.fit = FitConfig {
        min_updates: 5,
        max_updates: 10,
        ..FitConfig::default()
    };
    cfg
}

fn session_for(cfg: &ItersConfig, seed: u64) -> Arc<Session> {
    Session::new(RunInfo {
        env: cfg.env,
        l: cfg.l,
        n: cfg.n,
        lambda: cfg.lambda,
        seed,
    })
}

struct Client {
    rt: tokio::runtime::Runtime,
    session: Arc<Session>,
}

impl Client {
    fn new(session: Arc<Session>) -> Self {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        Self { rt, session }
    }

    fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let app = router(self.session.clone());
        let mut req = Request::builder().method(method).uri(uri);
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        self.rt.block_on(async move {
            let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
            let status = resp.status();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            let value = if bytes.is_empty() {
                Value::Null
            } else {
                serde_json::from_slice(&bytes).unwrap()
            };
            (status, value)
        })
    }

    fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None)
    }

    fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body))
    }
}

fn spawn_run(cfg: ItersConfig, seed: u64, session: Arc<Session>) -> thread::JoinHandle<RunOutcome> {
    thread::spawn(move || {
        let mut source = HumanFeedback::new(session);
        run_iters(&cfg, seed, &mut source, None).unwrap()
    })
}

#[test]
fn status_reports_run_facts_before_training() {
    let cfg = tiny(2);
    let client = Client::new(session_for(&cfg, 4));
    let (code, body) = client.get("/api/status");
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["env"], "inventory");
    assert_eq!(body["l"], 7);
    assert_eq!(body["n"], 2);
    assert_eq!(body["seed"], 4);
    assert_eq!(body["phase"], "baseline");
    assert_eq!(body["feedback_open"], false);
}

#[test]
fn feedback_outside_the_window_is_a_conflict() {
    let cfg = tiny(1);
    let client = Client::new(session_for(&cfg, 0));
    let (code, body) = client.get("/api/checkpoint/current");
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(body["error"], "not_in_feedback_window");
    assert_eq!(body["phase"], "baseline");

    let sub = json!({
        "trajectory_id": 0,
        "start_step": 0,
        "end_step": 1,
        "explanation": { "type": "action", "mask": [true, true] }
    });
    let (code, body) = client.post("/api/feedback", sub);
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(body["error"], "not_in_feedback_window");
}

#[test]
fn iterate_outside_the_window_changes_nothing() {
    let cfg = tiny(1);
    let client = Client::new(session_for(&cfg, 0));
    let (code, body) = client.post("/api/iterate", json!({}));
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body["phase"], "baseline");
    assert_eq!(body["iteration"], 0);
}

fn field_of(body: &Value) -> &str {
    assert_eq!(body["error"], "invalid_submission");
    body["fields"][0]["field"].as_str().unwrap()
}

#[test]
fn human_loop_accepts_validates_and_advances_once() {
    let seed = 6;
    let cfg = tiny(2);

    // buffer size without any feedback
    let mut plain = cfg.clone();
    plain.n = 0;
    let base_len = run_iters(&plain, seed, &mut SimulatedUser::new(seed), None).unwrap().buffer.len();

    let session = session_for(&cfg, seed);
    let worker = spawn_run(cfg.clone(), seed, session.clone());
    let client = Client::new(session.clone());

    assert!(session.wait_for_feedback_window());
    let (code, ckpt) = client.get("/api/checkpoint/current");
    assert_eq!(code, StatusCode::OK);
    assert_eq!(ckpt["iteration"], 1);
    assert_eq!(ckpt["l"], 7);
    let episodes = ckpt["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), cfg.m);
    let len = episodes[0]["length"].as_u64().unwrap() as usize;
    assert!(len >= 7);
    let step = &episodes[0]["steps"][0];
    assert_eq!(step["features"].as_array().unwrap().len(), EnvKind::Inventory.state_dim());
    assert_eq!(step["render"]["kind"], "inventory");
    assert_eq!(ckpt["feature_names"].as_array().unwrap().len(), EnvKind::Inventory.state_dim());
    assert_eq!(ckpt["action_names"].as_array().unwrap().len(), EnvKind::Inventory.n_actions());

    // one valid mark per explanation type
    let valid = [
        json!({
            "trajectory_id": 0, "start_step": 0, "end_step": 2,
            "explanation": { "type": "feature", "feature_indices": [0] }
        }),
        json!({
            "trajectory_id": 1, "start_step": 1, "end_step": 4,
            "explanation": { "type": "action", "mask": [true, false, true, true] }
        }),
        json!({
            "trajectory_id": 0, "start_step": 0, "end_step": 6,
            "explanation": { "type": "rule", "rule": {
                "predicate": { "subject": { "type": "action" }, "op": "gt", "value": 0.0 },
                "comparator": "gt", "threshold": 5
            } }
        }),
    ];
    for (i, sub) in valid.iter().enumerate() {
        let (code, body) = client.post("/api/feedback", sub.clone());
        assert_eq!(code, StatusCode::OK, "{body}");
        assert_eq!(body["id"], i);
    }

    // malformed submissions name the offending field
    let too_long = json!({
        "trajectory_id": 0, "start_step": 0, "end_step": 7,
        "explanation": { "type": "feature", "feature_indices": [0] }
    });
    let (code, body) = client.post("/api/feedback", too_long);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(field_of(&body), "end_step");

    let bad_trajectory = json!({
        "trajectory_id": 99, "start_step": 0, "end_step": 1,
        "explanation": { "type": "feature", "feature_indices": [0] }
    });
    let (code, body) = client.post("/api/feedback", bad_trajectory);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(field_of(&body), "trajectory_id");

    // more than five orders cannot happen in three weeks
    let infeasible_rule = json!({
        "trajectory_id": 0, "start_step": 0, "end_step": 2,
        "explanation": { "type": "rule", "rule": {
            "predicate": { "subject": { "type": "action" }, "op": "gt", "value": 0.0 },
            "comparator": "gt", "threshold": 5
        } }
    });
    let (code, body) = client.post("/api/feedback", infeasible_rule);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(field_of(&body), "explanation.rule");

    let bad_feature = json!({
        "trajectory_id": 0, "start_step": 0, "end_step": 1,
        "explanation": { "type": "feature", "feature_indices": [999] }
    });
    let (code, body) = client.post("/api/feedback", bad_feature);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(field_of(&body), "explanation.feature_indices");

    let bad_mask = json!({
        "trajectory_id": 0, "start_step": 0, "end_step": 2,
        "explanation": { "type": "action", "mask": [true] }
    });
    let (code, body) = client.post("/api/feedback", bad_mask);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(field_of(&body), "explanation.mask");

    // the pending list round-trips exactly the accepted submissions
    let (code, pending) = client.get("/api/feedback");
    assert_eq!(code, StatusCode::OK);
    let marks = pending["marks"].as_array().unwrap();
    assert_eq!(marks.len(), valid.len());
    for (m, sub) in marks.iter().zip(&valid) {
        assert_eq!(&m["submission"], sub);
    }

    // a double click must not skip the next feedback window
    let (code, _) = client.post("/api/iterate", json!({}));
    assert_eq!(code, StatusCode::OK);
    let (code, _) = client.post("/api/iterate", json!({}));
    assert_eq!(code, StatusCode::OK);

    assert!(session.wait_for_feedback_window());
    let (_, status) = client.get("/api/status");
    assert_eq!(status["iteration"], 2);
    assert_eq!(status["pending"], 0);
    assert_eq!(status["metrics"].as_array().unwrap().len(), 1);
    assert_eq!(status["metrics"][0]["marks"], 3);
    let (code, _) = client.post("/api/iterate", json!({ "satisfied": false }));
    assert_eq!(code, StatusCode::OK);

    let out = worker.join().unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.records[0].marks, 3);
    assert_eq!(out.records[1].marks, 0);
    assert_eq!(out.records[1].cum_marks, 3);
    // each mark adds p augmented windows, first-time feedback counts once
    assert_eq!(out.buffer.len(), base_len + 3 * cfg.p);
    assert!(out.buffer.marks()[base_len..].iter().all(|&m| m == 1));
    assert_eq!(session.phase(), iters::orchestrator::Phase::Done);
}

#[test]
fn satisfied_user_ends_the_run_early() {
    let seed = 2;
    let cfg = tiny(3);
    let session = session_for(&cfg, seed);
    let worker = spawn_run(cfg, seed, session.clone());
    let client = Client::new(session.clone());
    assert!(session.wait_for_feedback_window());
    let (code, _) = client.post("/api/iterate", json!({ "satisfied": true }));
    assert_eq!(code, StatusCode::OK);
    let out = worker.join().unwrap();
    assert_eq!(out.records.len(), 1);
    assert!(!session.wait_for_feedback_window());
}

#[test]
fn unknown_fields_are_rejected() {
    let cfg = tiny(1);
    let session = session_for(&cfg, 1);
    let worker = spawn_run(cfg, 1, session.clone());
    let client = Client::new(session.clone());
    assert!(session.wait_for_feedback_window());
    let sub = json!({
        "trajectory_id": 0, "start_step": 0, "end_step": 1, "weight": 3,
        "explanation": { "type": "action", "mask": [true, true] }
    });
    let (code, body) = client.post("/api/feedback", sub);
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid_submission");
    client.post("/api/iterate", json!({}));
    worker.join().unwrap();
}
