//! HTTP API over a run store, consumed by the review console.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use levelscope::chart::{render_svg, ChartData};
use levelscope::pipeline::{emit_chart, load_cluster, reverify_cluster, ClusterSummary, RunReport};
use levelscope::risk::ReportRow;
use levelscope::store::{
    effective_decisions, sanction_list, Decision, RunStore, RunSummary, SanctionDecision, REPORT, VERDICTS,
};
use levelscope::verify::{ChatBackend, VerdictSet, VerdictStatus};
use levelscope::{ClusterAssignment, Error};

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    store: RunStore,
    token: Option<String>,
    backend: Option<Arc<dyn ChatBackend + Send>>,
    /// Serializes every write to the store.
    writer: Mutex<()>,
    tasks: Mutex<HashMap<String, TaskState>>,
    next_task: AtomicU64,
}

#[derive(Default)]
pub struct ServiceConfig {
    pub token: Option<String>,
    pub ui_dir: Option<PathBuf>,
    /// Overrides the run's configured verifier backend, for tests.
    pub backend: Option<Arc<dyn ChatBackend + Send>>,
}

pub fn router(store: RunStore, cfg: ServiceConfig) -> Router {
    let state = AppState {
        inner: Arc::new(Inner {
            store,
            token: cfg.token,
            backend: cfg.backend,
            writer: Mutex::new(()),
            tasks: Mutex::new(HashMap::new()),
            next_task: AtomicU64::new(1),
        }),
    };
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/clusters", get(list_clusters))
        .route("/runs/{id}/clusters/{cid}", get(get_cluster))
        .route("/runs/{id}/clusters/{cid}/chart", get(get_chart))
        .route("/runs/{id}/clusters/{cid}/chart.svg", get(get_chart_svg))
        .route("/runs/{id}/clusters/{cid}/reverify", post(post_reverify))
        .route("/runs/{id}/tasks/{tid}", get(get_task))
        .route("/runs/{id}/characters/{pid}/decision", post(post_decision))
        .route("/runs/{id}/characters/{pid}/decisions", get(get_decisions))
        .route("/runs/{id}/sanctions", get(get_sanctions))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .fallback(not_found)
        .with_state(state);
    match cfg.ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, error, detail: detail.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::UnknownRun(_) => (StatusCode::NOT_FOUND, "unknown_run"),
            Error::UnknownCluster(_) => (StatusCode::NOT_FOUND, "unknown_cluster"),
            Error::UnknownCharacter(_) => (StatusCode::NOT_FOUND, "unknown_character"),
            Error::DecisionConflict { .. } => (StatusCode::CONFLICT, "decision_conflict"),
            Error::RunExists(_) => (StatusCode::CONFLICT, "run_exists"),
            Error::Store(_) => (StatusCode::CONFLICT, "run_incomplete"),
            Error::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

async fn require_token(State(state): State<AppState>, headers: HeaderMap, req: Request, next: Next) -> Response {
    if let Some(token) = &state.inner.token {
        let presented = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

fn parse_cluster(cid: &str) -> ApiResult<u32> {
    cid.parse().map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "unknown_cluster", format!("unknown cluster {cid}")))
}

impl AppState {
    fn store(&self) -> &RunStore {
        &self.inner.store
    }

    fn report(&self, id: &str) -> ApiResult<RunReport> {
        Ok(self.store().read_json(id, REPORT)?)
    }

    fn verdict_sets(&self, id: &str) -> ApiResult<Vec<VerdictSet>> {
        Ok(if self.store().has(id, VERDICTS) { self.store().read_records(id, VERDICTS)? } else { Vec::new() })
    }
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Json<Vec<RunSummary>>> {
    Ok(Json(s.store().list_runs()?))
}

#[derive(Serialize)]
struct ReportBody {
    run_id: String,
    #[serde(flatten)]
    report: RunReport,
    table: Vec<ReportRow>,
}

async fn get_report(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ReportBody>> {
    let report = s.report(&id)?;
    let table = report.rows();
    Ok(Json(ReportBody { run_id: id, report, table }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterListItem {
    pub cluster_id: u32,
    pub size: usize,
    pub status: VerdictStatus,
    pub acc_info: f64,
    pub max_diff: f64,
    pub mean_diff: f64,
    pub active_days: Vec<NaiveDate>,
    pub excluded: Vec<String>,
    /// Every member has an approved or rejected decision.
    pub resolved: bool,
}

#[derive(Deserialize)]
struct ClusterFilter {
    status: Option<VerdictStatus>,
    day: Option<NaiveDate>,
}

fn current_status(summary: &ClusterSummary, sets: &[VerdictSet]) -> (VerdictStatus, Vec<String>) {
    match sets.iter().find(|v| v.cluster_id == summary.cluster_id) {
        Some(set) => (set.status, set.verdicts.iter().filter(|v| !v.is_bot).map(|v| v.character_id.clone()).collect()),
        None => (summary.status, summary.excluded.clone()),
    }
}

/// Review queue order: clusters needing review first, then ascending
/// acc_info, then cluster id.
async fn list_clusters(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(filter): Query<ClusterFilter>,
) -> ApiResult<Json<Vec<ClusterListItem>>> {
    let report = s.report(&id)?;
    let sets = s.verdict_sets(&id)?;
    let decisions = effective_decisions(&s.store().decisions(&id)?);
    let mut items: Vec<ClusterListItem> = report
        .clusters
        .iter()
        .map(|c| {
            let (status, excluded) = current_status(c, &sets);
            let resolved = c.members.iter().all(|m| decisions.get(m).is_some_and(|d| d.decision != Decision::Pending));
            ClusterListItem {
                cluster_id: c.cluster_id,
                size: c.members.len(),
                status,
                acc_info: c.acc_info,
                max_diff: c.max_diff,
                mean_diff: c.mean_diff,
                active_days: c.active_days.clone(),
                excluded,
                resolved,
            }
        })
        .filter(|c| filter.status.is_none_or(|st| st == c.status))
        .filter(|c| filter.day.is_none_or(|d| c.active_days.contains(&d)))
        .collect();
    items.sort_by(|a, b| {
        let rank = |st: VerdictStatus| u8::from(st != VerdictStatus::NeedsHumanReview);
        rank(a.status)
            .cmp(&rank(b.status))
            .then(a.acc_info.total_cmp(&b.acc_info))
            .then(a.cluster_id.cmp(&b.cluster_id))
    });
    Ok(Json(items))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemberView {
    pub character_id: String,
    pub verdict: Option<String>,
    pub confidence: Option<f64>,
    pub rationale: Option<String>,
    pub decision: Decision,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterView {
    pub cluster_id: u32,
    pub status: VerdictStatus,
    pub detail: Option<String>,
    pub acc_info: f64,
    pub max_diff: f64,
    pub mean_diff: f64,
    pub members: Vec<MemberView>,
    pub chart: ChartData,
}

async fn get_cluster(State(s): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Json<ClusterView>> {
    let cid = parse_cluster(&cid)?;
    let report = s.report(&id)?;
    let summary = report.clusters.iter().find(|c| c.cluster_id == cid).ok_or(Error::UnknownCluster(i64::from(cid)))?;
    let detail = load_cluster(s.store(), &id, cid)?;
    let decisions = effective_decisions(&s.store().decisions(&id)?);
    let set = detail.verdicts.clone();
    let members = detail
        .members
        .iter()
        .map(|m| {
            let v = set.as_ref().and_then(|s| s.verdicts.iter().find(|v| v.character_id == m.character_id));
            MemberView {
                character_id: m.character_id.clone(),
                verdict: v.map(|v| if v.is_bot { "BOT".into() } else { "HUMAN".into() }),
                confidence: v.map(|v| v.confidence),
                rationale: v.map(|v| v.rationale.clone()),
                decision: decisions.get(&m.character_id).map_or(Decision::Pending, |d| d.decision),
            }
        })
        .collect();
    Ok(Json(ClusterView {
        cluster_id: cid,
        status: set.as_ref().map_or(summary.status, |s| s.status),
        detail: set.and_then(|s| s.detail),
        acc_info: summary.acc_info,
        max_diff: summary.max_diff,
        mean_diff: summary.mean_diff,
        members,
        chart: emit_chart(s.store(), &id, cid)?,
    }))
}

async fn get_chart(State(s): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Json<ChartData>> {
    Ok(Json(emit_chart(s.store(), &id, parse_cluster(&cid)?)?))
}

async fn get_chart_svg(State(s): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Response> {
    let svg = render_svg(&emit_chart(s.store(), &id, parse_cluster(&cid)?)?);
    Ok(([(header::CONTENT_TYPE, "image/svg+xml")], svg).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TaskState {
    Pending { task_id: String, run_id: String, cluster_id: u32 },
    Done { task_id: String, run_id: String, cluster_id: u32, result: VerdictSet },
    Failed { task_id: String, run_id: String, cluster_id: u32, error: String },
}

/// Verification runs off the request path; the response carries a task id
/// to poll.
async fn post_reverify(State(s): State<AppState>, Path((id, cid)): Path<(String, String)>) -> ApiResult<Response> {
    let cid = parse_cluster(&cid)?;
    load_cluster(s.store(), &id, cid)?;
    let task_id = format!("t{}", s.inner.next_task.fetch_add(1, Ordering::Relaxed));
    let pending = TaskState::Pending { task_id: task_id.clone(), run_id: id.clone(), cluster_id: cid };
    s.inner.tasks.lock().expect("task table poisoned").insert(task_id.clone(), pending.clone());

    let state = s.clone();
    let tid = task_id.clone();
    tokio::task::spawn_blocking(move || {
        let backend = state.inner.backend.clone();
        let outcome = {
            let _w = state.inner.writer.lock().expect("writer poisoned");
            reverify_cluster(state.store(), &id, cid, backend.as_deref().map(|b| b as &dyn ChatBackend))
        };
        let done = match outcome {
            Ok(result) => TaskState::Done { task_id: tid.clone(), run_id: id, cluster_id: cid, result },
            Err(e) => TaskState::Failed { task_id: tid.clone(), run_id: id, cluster_id: cid, error: e.to_string() },
        };
        state.inner.tasks.lock().expect("task table poisoned").insert(tid, done);
    });
    Ok((StatusCode::ACCEPTED, Json(pending)).into_response())
}

async fn get_task(State(s): State<AppState>, Path((id, tid)): Path<(String, String)>) -> ApiResult<Json<TaskState>> {
    let tasks = s.inner.tasks.lock().expect("task table poisoned");
    let task = tasks.get(&tid).filter(|t| match t {
        TaskState::Pending { run_id, .. } | TaskState::Done { run_id, .. } | TaskState::Failed { run_id, .. } => *run_id == id,
    });
    task.cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_task", format!("unknown task {tid}")))
}

#[derive(Debug, Deserialize)]
pub struct DecisionRequest {
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub moderator_id: Option<String>,
    /// Optimistic-concurrency guard: the decision the client last saw.
    #[serde(default)]
    pub expected: Option<Decision>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionResponse {
    pub decision: SanctionDecision,
    pub audit_len: usize,
}

/// Latest write wins and every write is kept in the audit trail. A request
/// carrying `expected` that no longer matches is refused with 409 so the
/// client can refetch.
async fn post_decision(
    State(s): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Json<DecisionResponse>> {
    let assignments: Vec<ClusterAssignment> = s.store().read_records(&id, levelscope::store::CLUSTERS)?;
    if !assignments.iter().any(|a| a.character_id == pid && !a.cluster_id.is_noise()) {
        return Err(Error::UnknownCharacter(pid).into());
    }
    let _w = s.inner.writer.lock().expect("writer poisoned");
    let audit = s.store().decisions(&id)?;
    let current = effective_decisions(&audit).get(&pid).map_or(Decision::Pending, |d| d.decision);
    if let Some(expected) = req.expected {
        if expected != current {
            return Err(Error::DecisionConflict {
                character_id: pid,
                expected: expected.as_str().into(),
                found: current.as_str().into(),
            }
            .into());
        }
    }
    let record = SanctionDecision {
        character_id: pid,
        decision: req.decision,
        moderator_id: req.moderator_id.unwrap_or_else(|| "anonymous".into()),
        decided_at: Utc::now().trunc_subsecs(0),
        note: req.note,
    };
    s.store().append_decision(&id, record.clone())?;
    Ok(Json(DecisionResponse { decision: record, audit_len: audit.len() + 1 }))
}

async fn get_decisions(
    State(s): State<AppState>,
    Path((id, pid)): Path<(String, String)>,
) -> ApiResult<Json<Vec<SanctionDecision>>> {
    let audit = s.store().decisions(&id)?;
    Ok(Json(audit.into_iter().filter(|d| d.character_id == pid).collect()))
}

async fn get_sanctions(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let sets = s.verdict_sets(&id)?;
    s.store().manifest(&id)?;
    let audit = s.store().decisions(&id)?;
    let list = sanction_list(&sets, &audit);
    let decided: BTreeMap<String, SanctionDecision> =
        effective_decisions(&audit).into_iter().filter(|(k, _)| list.contains(k)).collect();
    Ok(Json(json!({"run_id": id, "sanctions": list, "decisions": decided})))
}

/// Serves until ctrl-c.
pub async fn serve(app: Router, bind: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
