//! HTTP feedback service for human-in-the-loop runs.
//!
//! The training loop and the web handlers share one [`Session`]. The loop
//! blocks inside [`HumanFeedback::collect`] while the feedback window is
//! open; handlers only read state, except for queuing marks and closing the
//! window, which both happen under the session lock.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use iters::augment::{augment, AugmentConfig};
use iters::envs::{lane_of, EnvKind, StepInfo, EGO_Y};
use iters::feedback::{Explanation, MarkSource, MarkedTrajectory};
use iters::orchestrator::{FeedbackRequest, FeedbackResponse, FeedbackSource, IterationDetail, IterationRecord, Phase};
use iters::rng::{substream, Rng, Stream};
use iters::trajectory::{clip_pad, Episode};
use iters::ItersError;

/// The payload of `POST /api/feedback`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSubmission {
    /// Index into the current checkpoint's summary episodes.
    pub trajectory_id: usize,
    pub start_step: usize,
    /// Inclusive.
    pub end_step: usize,
    pub explanation: Explanation,
}

#[derive(Debug, Clone, Serialize)]
pub struct PendingMark {
    pub id: usize,
    pub submission: FeedbackSubmission,
    pub mark: MarkedTrajectory,
}

/// Fixed facts about the run, shown in `/api/status`.
#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub env: EnvKind,
    pub l: usize,
    pub n: usize,
    pub lambda: f32,
    pub seed: u64,
}

struct SessionState {
    phase: Phase,
    iteration: usize,
    summaries: Vec<Episode>,
    pending: Vec<PendingMark>,
    next_id: usize,
    records: Vec<IterationRecord>,
    feedback_open: bool,
    /// Set by `/api/iterate`: whether the user is satisfied.
    release: Option<bool>,
    closed: bool,
    error: Option<String>,
    pad_rng: Rng,
}

pub struct Session {
    info: RunInfo,
    state: Mutex<SessionState>,
    wake: Condvar,
}

impl Session {
    pub fn new(info: RunInfo) -> Arc<Self> {
        let pad_rng = substream(info.seed, Stream::Padding, 0);
        Arc::new(Self {
            info,
            state: Mutex::new(SessionState {
                phase: Phase::Baseline,
                iteration: 0,
                summaries: Vec::new(),
                pending: Vec::new(),
                next_id: 0,
                records: Vec::new(),
                feedback_open: false,
                release: None,
                closed: false,
                error: None,
                pad_rng,
            }),
            wake: Condvar::new(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, SessionState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Unblocks a waiting loop with an error; used on shutdown.
    pub fn close(&self) {
        self.lock().closed = true;
        self.wake.notify_all();
    }

    /// Records a failure of the run so the UI can show it.
    pub fn fail(&self, message: String) {
        let mut s = self.lock();
        s.error = Some(message);
        s.phase = Phase::Done;
        s.feedback_open = false;
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase
    }

    pub fn status(&self) -> Value {
        let s = self.lock();
        json!({
            "env": self.info.env,
            "l": self.info.l,
            "n": self.info.n,
            "lambda": self.info.lambda,
            "seed": self.info.seed,
            "phase": s.phase,
            "iteration": s.iteration,
            "feedback_open": s.feedback_open,
            "pending": s.pending.len(),
            "metrics": s.records,
            "error": s.error,
        })
    }

    /// Blocks until the feedback window is open; for scripted clients.
    pub fn wait_for_feedback_window(&self) -> bool {
        let mut s = self.lock();
        while !s.feedback_open && s.phase != Phase::Done && !s.closed {
            s = self.wake.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        s.feedback_open
    }
}

/// Feedback source backed by the HTTP session.
pub struct HumanFeedback {
    session: Arc<Session>,
}

impl HumanFeedback {
    pub fn new(session: Arc<Session>) -> Self {
        Self { session }
    }
}

impl FeedbackSource for HumanFeedback {
    fn collect(&mut self, req: &FeedbackRequest<'_>) -> iters::Result<FeedbackResponse> {
        let mut s = self.session.lock();
        s.iteration = req.iteration;
        s.summaries = req.summaries.to_vec();
        s.pending.clear();
        s.release = None;
        s.pad_rng = substream(self.session.info.seed, Stream::Padding, req.iteration as u64);
        s.phase = Phase::Feedback;
        s.feedback_open = true;
        self.session.wake.notify_all();
        while s.release.is_none() && !s.closed {
            s = self.session.wake.wait(s).unwrap_or_else(|e| e.into_inner());
        }
        s.feedback_open = false;
        let Some(satisfied) = s.release.take() else {
            return Err(ItersError::domain("feedback session closed"));
        };
        let marks = s.pending.iter().map(|p| p.mark.clone()).collect();
        Ok(FeedbackResponse { marks, satisfied })
    }

    fn on_phase(&mut self, iteration: usize, phase: Phase) {
        let mut s = self.session.lock();
        s.iteration = iteration;
        s.phase = phase;
        drop(s);
        self.session.wake.notify_all();
    }

    fn on_record(&mut self, detail: &IterationDetail) {
        self.session.lock().records.push(detail.record.clone());
    }
}

#[derive(Debug, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

pub enum ApiError {
    Conflict(Phase),
    Invalid(Vec<FieldError>),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        match self {
            ApiError::Conflict(phase) => (
                StatusCode::CONFLICT,
                Json(json!({
                    "error": "not_in_feedback_window",
                    "phase": phase,
                })),
            )
                .into_response(),
            ApiError::Invalid(fields) => (
                StatusCode::BAD_REQUEST,
                Json(json!({
                    "error": "invalid_submission",
                    "fields": fields,
                })),
            )
                .into_response(),
        }
    }
}

fn invalid(field: &str, message: impl Into<String>) -> ApiError {
    ApiError::Invalid(vec![FieldError {
        field: field.to_string(),
        message: message.into(),
    }])
}

fn explanation_field(e: &Explanation) -> &'static str {
    match e {
        Explanation::Feature { .. } => "explanation.feature_indices",
        Explanation::Action { .. } => "explanation.mask",
        Explanation::Rule { .. } => "explanation.rule",
    }
}

/// Checks a submission against the current checkpoint and turns it into a
/// marked window.
fn to_mark(info: &RunInfo, summaries: &[Episode], sub: &FeedbackSubmission, rng: &mut Rng) -> Result<MarkedTrajectory, ApiError> {
    let ep = summaries.get(sub.trajectory_id).ok_or_else(|| {
        invalid(
            "trajectory_id",
            format!("no summary episode {} (checkpoint has {})", sub.trajectory_id, summaries.len()),
        )
    })?;
    if sub.start_step > sub.end_step {
        return Err(invalid("end_step", "end_step must not precede start_step"));
    }
    if sub.end_step >= ep.len() {
        return Err(invalid(
            "end_step",
            format!("episode {} has {} steps", sub.trajectory_id, ep.len()),
        ));
    }
    let span = sub.end_step - sub.start_step + 1;
    if span > info.l {
        return Err(invalid(
            "end_step",
            format!("marked range covers {span} steps but at most l = {} are allowed", info.l),
        ));
    }
    let pairs = ep.pairs();
    let window = clip_pad(info.env, &pairs[sub.start_step..=sub.end_step], info.l, rng)
        .map_err(|e| invalid("start_step", e.to_string()))?;
    let mark = MarkedTrajectory {
        window,
        explanation: sub.explanation.clone(),
        source: MarkSource {
            episode: sub.trajectory_id,
            start: sub.start_step,
            end: sub.end_step,
        },
    };
    let field = explanation_field(&sub.explanation);
    mark.validate(info.l).map_err(|e| invalid(field, e.to_string()))?;
    if let Explanation::Rule { .. } = &mark.explanation {
        // a rule that no window of this length can satisfy would fail later
        let probe = AugmentConfig {
            p: 1,
            ..AugmentConfig::default()
        };
        augment(&mark, &probe, &mut rng.clone()).map_err(|e| invalid(field, e.to_string()))?;
    }
    Ok(mark)
}

async fn status(State(session): State<Arc<Session>>) -> Json<Value> {
    Json(session.status())
}

fn action_names(env: EnvKind) -> Vec<String> {
    match env {
        EnvKind::GridWorld => vec!["forward".into(), "turn".into()],
        EnvKind::Highway => ["lane_left", "idle", "lane_right", "faster", "slower"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        EnvKind::Inventory => (0..env.n_actions()).map(|a| format!("order_{}", 10 * a)).collect(),
    }
}

/// Per-step drawing hints for the UI.
fn render(env: EnvKind, features: &[f32], info: &StepInfo) -> Value {
    match env {
        EnvKind::GridWorld => json!({
            "kind": "grid",
            "size": iters::envs::GRID_SIZE,
            "agent": [features[0], features[1]],
            "goal": [features[2], features[3]],
            "orientation": features[4],
        }),
        EnvKind::Highway => {
            let ego_lane = lane_of(features[EGO_Y]);
            let vehicles: Vec<Value> = features[5..]
                .chunks(5)
                .filter(|v| v[0] > 0.5)
                .map(|v| json!({ "dx": v[1], "lane": ego_lane + (v[2] * 3.0).round() as i32, "dvx": v[3] }))
                .collect();
            json!({
                "kind": "highway",
                "lanes": iters::envs::LANE_COUNT,
                "ego_lane": ego_lane,
                "ego_speed": features[3],
                "vehicles": vehicles,
                "crashed": matches!(info, StepInfo::Highway { crashed: true, .. }),
            })
        }
        EnvKind::Inventory => {
            let (order, demand, sold) = match *info {
                StepInfo::Inventory { order, demand, sold, .. } => (order, demand, sold),
                _ => (0, 0, 0),
            };
            json!({ "kind": "inventory", "stock": features[0], "order": order, "demand": demand, "sold": sold })
        }
    }
}

async fn checkpoint(State(session): State<Arc<Session>>) -> Result<Json<Value>, ApiError> {
    let s = session.lock();
    if !s.feedback_open {
        return Err(ApiError::Conflict(s.phase));
    }
    let env = session.info.env;
    let episodes: Vec<Value> = s
        .summaries
        .iter()
        .enumerate()
        .map(|(id, ep)| {
            let steps: Vec<Value> = ep
                .transitions
                .iter()
                .enumerate()
                .map(|(t, tr)| {
                    json!({
                        "t": t,
                        "features": tr.state.features,
                        "action": tr.action.0,
                        "reward_env": iters::envs::reward(env, iters::envs::RewardVariant::EnvMisspecified, tr).unwrap_or(0.0),
                        "render": render(env, &tr.state.features, &tr.info),
                    })
                })
                .collect();
            json!({ "id": id, "length": ep.len(), "return": ep.ret, "steps": steps })
        })
        .collect();
    Ok(Json(json!({
        "iteration": s.iteration,
        "env": env,
        "l": session.info.l,
        "feature_names": env.feature_specs().iter().map(|f| f.name).collect::<Vec<_>>(),
        "action_names": action_names(env),
        "episodes": episodes,
    })))
}

async fn submit(State(session): State<Arc<Session>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let sub: FeedbackSubmission = serde_json::from_slice(&body).map_err(|e| {
        let field = ["trajectory_id", "start_step", "end_step", "explanation"]
            .into_iter()
            .find(|f| e.to_string().contains(f))
            .unwrap_or("body");
        invalid(field, e.to_string())
    })?;
    let mut s = session.lock();
    if !s.feedback_open {
        return Err(ApiError::Conflict(s.phase));
    }
    let mut rng = s.pad_rng.clone();
    let mark = to_mark(&session.info, &s.summaries, &sub, &mut rng)?;
    s.pad_rng = rng;
    let id = s.next_id;
    s.next_id += 1;
    s.pending.push(PendingMark {
        id,
        submission: sub,
        mark,
    });
    Ok(Json(json!({ "id": id, "pending": s.pending.len() })))
}

async fn pending(State(session): State<Arc<Session>>) -> Json<Value> {
    let s = session.lock();
    Json(json!({
        "iteration": s.iteration,
        "feedback_open": s.feedback_open,
        "marks": s.pending,
    }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IterateRequest {
    #[serde(default)]
    satisfied: bool,
}

async fn iterate(State(session): State<Arc<Session>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: IterateRequest = if body.iter().all(u8::is_ascii_whitespace) {
        IterateRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| invalid("satisfied", e.to_string()))?
    };
    {
        let mut s = session.lock();
        if s.feedback_open && s.release.is_none() {
            s.release = Some(req.satisfied);
            s.feedback_open = false;
            s.phase = Phase::Updating;
            drop(s);
            session.wake.notify_all();
        }
    }
    Ok(Json(session.status()))
}

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/checkpoint/current", get(checkpoint))
        .route("/api/feedback", post(submit).get(pending))
        .route("/api/iterate", post(iterate))
        .with_state(session)
}
