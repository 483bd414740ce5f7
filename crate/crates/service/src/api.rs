use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use textcav_core::cav::{
    compare_models, directional_derivative, head_gradient, make_textcav, rank_concepts, would_be_rank,
    ContrastReport, RankOptions, SensitivityRanking,
};
use textcav_core::concepts::{crs_score, AnnotationRecord, AnnotationSet};
use textcav_core::num_format::{sig9, sig9_opt};
use textcav_core::store::{save_concepts, ClassifierHead, ConceptEntry, ConceptList};
use textcav_core::trainer::{save_checkpoint, train_maps, TrainingConfig};
use textcav_embed::Embedder;

use crate::error::{ApiError, ApiResult};
use crate::state::{now_ms, ActiveJob, AppState, JobRecord, JobStatus, TrainedMap, WorkspaceSlot, WorkspaceSnapshot};

pub const DEFAULT_TOP: usize = 10;
pub const DEFAULT_COMPARE_TOP: usize = 50;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/workspaces", get(list_workspaces))
        .route("/v1/workspaces/{id}", get(get_workspace))
        .route("/v1/workspaces/{id}/train", post(start_training))
        .route("/v1/workspaces/{id}/rankings", get(get_ranking))
        .route("/v1/workspaces/{id}/concepts/score", post(score_concepts))
        .route("/v1/workspaces/{id}/compare", post(compare))
        .route("/v1/jobs/{id}", get(get_job))
        .with_state(state)
}

fn slot<'a>(state: &'a AppState, id: &str) -> ApiResult<&'a Arc<WorkspaceSlot>> {
    state
        .slot(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown workspace {id:?}")))
}

fn json_bytes(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable response");
    s.push('\n');
    s
}

#[derive(Debug, Serialize)]
pub struct WorkspaceSummary {
    pub id: String,
    pub version: u64,
    pub created_at_ms: u64,
    pub vl_dim: usize,
    pub target_dim: usize,
    pub samples: usize,
    pub text_samples: usize,
    pub class_names: Vec<String>,
    pub heads: Vec<String>,
    pub default_head: Option<String>,
    pub maps: Vec<String>,
    pub concepts: usize,
    pub annotations: usize,
    pub training: Option<ActiveJob>,
}

fn summarize(slot: &WorkspaceSlot, snap: &WorkspaceSnapshot) -> WorkspaceSummary {
    let default_head = snap.default_head().map(str::to_owned);
    WorkspaceSummary {
        id: snap.id.clone(),
        version: snap.version,
        created_at_ms: snap.created_at_ms,
        vl_dim: snap.workspace.vl_dim(),
        target_dim: snap.workspace.target_dim(),
        samples: snap.workspace.target_image.count(),
        text_samples: snap.workspace.vl_text.as_ref().map_or(0, |t| t.count()),
        class_names: default_head
            .as_deref()
            .map(|h| snap.heads[h].class_names.clone())
            .unwrap_or_default(),
        heads: snap.heads.keys().cloned().collect(),
        default_head,
        maps: snap.maps.keys().cloned().collect(),
        concepts: snap.concepts.len(),
        annotations: snap.annotations.as_ref().map_or(0, |a| a.len()),
        training: slot.active_job(),
    }
}

async fn list_workspaces(State(state): State<Arc<AppState>>) -> Json<Vec<WorkspaceSummary>> {
    Json(
        state
            .slots
            .values()
            .map(|slot| summarize(slot, &slot.snapshot()))
            .collect(),
    )
}

async fn get_workspace(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<WorkspaceSummary>> {
    let slot = slot(&state, &id)?;
    Ok(Json(summarize(slot, &slot.snapshot())))
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobRecord>> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {id:?}")))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
}

#[derive(Debug, Serialize)]
struct TrainAccepted {
    job_id: String,
    map_id: String,
    status: JobStatus,
}

/// `POST /v1/workspaces/{id}/train[?map=ID]` with an optional
/// `TrainingConfig` body. Without `map`, the next free `map-N` is used; an
/// existing id is retrained and replaced when the job finishes.
async fn start_training(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
    body: Bytes,
) -> ApiResult<Response> {
    let slot = slot(&state, &id)?.clone();
    let config: TrainingConfig = if body.iter().all(u8::is_ascii_whitespace) {
        TrainingConfig::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid training config: {e}")))?
    };
    config.validate()?;

    let job = {
        let mut training = slot.training.lock().expect("training lock");
        if let Some(active) = training.as_ref() {
            return Err(ApiError::conflict(format!(
                "workspace {id:?} is already training map {:?} (job {})",
                active.map_id, active.job_id
            )));
        }
        let snap = slot.snapshot();
        let map_id = match query.get("map") {
            Some(m) if valid_id(m) => m.clone(),
            Some(m) => return Err(ApiError::bad_request(format!("invalid map id {m:?}"))),
            None => (1..)
                .map(|n| format!("map-{n}"))
                .find(|m| !snap.maps.contains_key(m))
                .expect("unbounded range"),
        };
        let now = now_ms();
        let job = JobRecord {
            job_id: format!("{id}-{now}-{}", state.jobs.lock().expect("jobs lock").len() + 1),
            workspace: id.clone(),
            map_id: map_id.clone(),
            status: JobStatus::Queued,
            config,
            created_at_ms: now,
            updated_at_ms: now,
            error: None,
            report: None,
        };
        *training = Some(ActiveJob {
            job_id: job.job_id.clone(),
            map_id,
        });
        job
    };
    state.save_job(&slot, &job);
    let accepted = TrainAccepted {
        job_id: job.job_id.clone(),
        map_id: job.map_id.clone(),
        status: job.status,
    };
    let bg_state = state.clone();
    tokio::task::spawn_blocking(move || run_job(&bg_state, &slot, job));
    Ok((StatusCode::ACCEPTED, Json(accepted)).into_response())
}

fn run_job(state: &AppState, slot: &WorkspaceSlot, mut job: JobRecord) {
    job.status = JobStatus::Running;
    job.updated_at_ms = now_ms();
    state.save_job(slot, &job);

    let snap = slot.snapshot();
    let result = train_maps(&snap.workspace, &job.config).and_then(|outcome| {
        save_checkpoint(slot.layout.map(&job.map_id), &outcome.maps, &outcome.report)?;
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            {
                let _edit = slot.edit.lock().expect("edit lock");
                let current = slot.snapshot();
                let trained = Arc::new(TrainedMap {
                    maps: outcome.maps,
                    report: outcome.report.clone(),
                });
                slot.publish(current.next(|s| {
                    s.maps.insert(job.map_id.clone(), trained);
                }));
            }
            job.status = JobStatus::Done;
            job.report = Some(outcome.report);
        }
        Err(e) => {
            job.status = JobStatus::Failed;
            job.error = Some(e.to_string());
        }
    }
    job.updated_at_ms = now_ms();
    state.save_job(slot, &job);
    *slot.training.lock().expect("training lock") = None;
}

/// Head, class index and trained map named by a request, with the error
/// statuses the API promises.
struct Target<'a> {
    head_id: String,
    head: &'a ClassifierHead,
    class: usize,
    map_id: String,
    map: Arc<TrainedMap>,
}

fn resolve<'a>(
    slot: &WorkspaceSlot,
    snap: &'a WorkspaceSnapshot,
    class: Option<&str>,
    map: Option<&str>,
    head: Option<&str>,
) -> ApiResult<Target<'a>> {
    let head_id = match head {
        Some(h) => h.to_owned(),
        None => snap
            .default_head()
            .ok_or_else(|| ApiError::not_found("workspace has no classifier heads"))?
            .to_owned(),
    };
    let head = snap
        .heads
        .get(&head_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown head {head_id:?}")))?;
    let class_name = class.ok_or_else(|| ApiError::bad_request("missing class"))?;
    let class = head.class_index(class_name).ok_or_else(|| {
        ApiError::not_found(format!(
            "unknown class {class_name:?}; valid classes: {}",
            head.class_names.join(", ")
        ))
    })?;
    let map_id = map.ok_or_else(|| ApiError::bad_request("missing map"))?.to_owned();
    let map = match snap.maps.get(&map_id) {
        Some(m) => m.clone(),
        None => {
            return Err(match slot.active_job() {
                Some(job) if job.map_id == map_id => {
                    ApiError::conflict(format!("map {map_id:?} is still training (job {})", job.job_id))
                }
                _ => ApiError::not_found(format!("unknown map {map_id:?}")),
            })
        }
    };
    Ok(Target {
        head_id,
        head,
        class,
        map_id,
        map,
    })
}

fn require_embedded(concepts: &ConceptList) -> ApiResult<()> {
    if concepts.is_empty() {
        return Err(ApiError::conflict("workspace has no concepts"));
    }
    let bare: Vec<String> = concepts
        .entries()
        .iter()
        .filter(|c| c.embedding.is_none())
        .map(|c| c.text.clone())
        .collect();
    if bare.is_empty() {
        Ok(())
    } else {
        Err(ApiError::conflict("concepts lack embeddings").with_missing(bare))
    }
}

fn parse_top(raw: Option<&String>, default: usize) -> ApiResult<usize> {
    match raw {
        None => Ok(default),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(ApiError::bad_request(format!("top must be a positive integer, got {s:?}"))),
        },
    }
}

fn ranking_for(target: &Target<'_>, concepts: &ConceptList, top: usize) -> ApiResult<SensitivityRanking> {
    let opts = RankOptions {
        map_id: target.map_id.clone(),
        head_id: target.head_id.clone(),
        ..RankOptions::default()
    };
    Ok(rank_concepts(target.head, target.class, concepts.entries(), &target.map.maps.h, top, &opts)?)
}

/// `GET /v1/workspaces/{id}/rankings?class=…&map=…&top=N&head=…`
async fn get_ranking(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let slot = slot(&state, &id)?;
    let snap = slot.snapshot();
    let target = resolve(
        slot,
        &snap,
        q.get("class").map(String::as_str),
        q.get("map").map(String::as_str),
        q.get("head").map(String::as_str),
    )?;
    let top = parse_top(q.get("top"), DEFAULT_TOP)?;
    require_embedded(&snap.concepts)?;
    let ranking = ranking_for(&target, &snap.concepts, top)?;
    Ok(json_bytes(StatusCode::OK, ranking.to_json()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreRequest {
    texts: Vec<String>,
    class: String,
    map: String,
    #[serde(default)]
    head: Option<String>,
    #[serde(default)]
    top: Option<usize>,
    #[serde(default)]
    persist: bool,
}

#[derive(Debug, Serialize)]
struct ScoredText {
    text: String,
    #[serde(serialize_with = "sig9")]
    score: f64,
    /// 1-based position among all current concepts.
    rank: usize,
    in_top: bool,
    existing: bool,
}

#[derive(Debug, Serialize)]
struct ScoreResponse {
    class: String,
    map_id: String,
    head_id: String,
    top: usize,
    concepts: usize,
    results: Vec<ScoredText>,
    persisted: usize,
}

/// Scores new concept texts against the current ranking without changing
/// it, unless `persist` is set.
async fn score_concepts(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: ScoreRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?;
    if req.texts.is_empty() {
        return Err(ApiError::bad_request("texts must not be empty"));
    }
    let texts: Vec<String> = req.texts.iter().map(|t| t.trim().to_owned()).collect();
    if let Some(i) = texts.iter().position(String::is_empty) {
        return Err(ApiError::bad_request(format!("text at position {i} is empty")));
    }
    let top = req.top.unwrap_or(DEFAULT_TOP);
    if top == 0 {
        return Err(ApiError::bad_request("top must be at least 1"));
    }
    let slot = slot(&state, &id)?.clone();
    let snap = slot.snapshot();
    let target = resolve(&slot, &snap, Some(&req.class), Some(&req.map), req.head.as_deref())?;
    require_embedded(&snap.concepts)?;

    let known: HashMap<&str, &ConceptEntry> = snap.concepts.entries().iter().map(|c| (c.text.as_str(), c)).collect();
    let mut unknown: Vec<String> = Vec::new();
    for t in &texts {
        if !known.contains_key(t.as_str()) && !unknown.contains(t) {
            unknown.push(t.clone());
        }
    }
    let fetched: HashMap<String, Vec<f32>> = if unknown.is_empty() {
        HashMap::new()
    } else {
        let embedder = slot.embedder.clone();
        let ask = unknown.clone();
        let vectors = tokio::task::spawn_blocking(move || embedder.embed_texts(&ask))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        unknown.iter().cloned().zip(vectors).collect()
    };

    let full = ranking_for(&target, &snap.concepts, snap.concepts.len())?;
    let grad = head_gradient(target.head, target.class)?;
    let mut results = Vec::with_capacity(texts.len());
    let mut new_entries = Vec::new();
    for t in &texts {
        let (entry, existing) = match known.get(t.as_str()) {
            Some(c) => ((*c).clone(), true),
            None => (ConceptEntry::with_embedding(t.clone(), fetched[t].clone()), false),
        };
        let cav = make_textcav(&entry, &target.map.maps.h)?;
        let score = directional_derivative(&grad, &cav)?;
        let rank = would_be_rank(&full.entries, t, score);
        if !existing && !new_entries.iter().any(|e: &ConceptEntry| e.text == *t) {
            new_entries.push(entry);
        }
        results.push(ScoredText {
            text: t.clone(),
            score,
            rank,
            in_top: rank <= top,
            existing,
        });
    }

    let persisted = if req.persist && !new_entries.is_empty() {
        let _edit = slot.edit.lock().expect("edit lock");
        let current = slot.snapshot();
        let mut entries = current.concepts.entries().to_vec();
        let before = entries.len();
        for e in new_entries {
            if !entries.iter().any(|c| c.normalized_text() == e.normalized_text()) {
                entries.push(e);
            }
        }
        let added = entries.len() - before;
        let list = ConceptList::new(entries)?.with_provenance(current.concepts.provenance.clone());
        save_concepts(&list, slot.layout.concepts())?;
        slot.publish(current.next(|s| s.concepts = Arc::new(list)));
        added
    } else {
        0
    };

    let resp = ScoreResponse {
        class: target.head.class_names[target.class].clone(),
        map_id: target.map_id.clone(),
        head_id: target.head_id.clone(),
        top,
        concepts: snap.concepts.len(),
        results,
        persisted,
    };
    Ok(json_bytes(StatusCode::OK, pretty(&resp)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareRequest {
    class: String,
    map: String,
    head_a: String,
    head_b: String,
    #[serde(default)]
    top: Option<usize>,
    #[serde(default)]
    annotations: Option<Vec<AnnotationRecord>>,
}

#[derive(Debug, Serialize)]
struct CompareResponse {
    #[serde(flatten)]
    report: ContrastReport,
    #[serde(serialize_with = "sig9_opt")]
    crs_a: Option<f64>,
    #[serde(serialize_with = "sig9_opt")]
    crs_b: Option<f64>,
}

/// Category counts and set differences between two heads' rankings. CRS
/// is reported per side when annotations cover both top-N lists.
async fn compare(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: CompareRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request: {e}")))?;
    let top = req.top.unwrap_or(DEFAULT_COMPARE_TOP);
    if top == 0 {
        return Err(ApiError::bad_request("top must be at least 1"));
    }
    let slot = slot(&state, &id)?;
    let snap = slot.snapshot();
    let a = resolve(slot, &snap, Some(&req.class), Some(&req.map), Some(&req.head_a))?;
    let b = resolve(slot, &snap, Some(&req.class), Some(&req.map), Some(&req.head_b))?;
    require_embedded(&snap.concepts)?;
    let annotations: Option<Arc<AnnotationSet>> = match req.annotations {
        Some(records) => Some(Arc::new(AnnotationSet::new(records)?)),
        None => snap.annotations.clone(),
    };
    let ra = ranking_for(&a, &snap.concepts, top)?;
    let rb = ranking_for(&b, &snap.concepts, top)?;
    let labels = annotations
        .as_deref()
        .map(|ann| ann.category_labels(&ra.class_name))
        .unwrap_or_default();
    let report = compare_models(&ra, &rb, &labels)?;
    let crs = |r: &SensitivityRanking| annotations.as_deref().and_then(|ann| crs_score(ann, r, top).ok());
    let resp = CompareResponse {
        crs_a: crs(&ra),
        crs_b: crs(&rb),
        report,
    };
    Ok(json_bytes(StatusCode::OK, pretty(&resp)))
}
