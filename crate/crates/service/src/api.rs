use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cuegen_core::corpus::{parse_script, Line, Script};
use cuegen_core::steering::{SteerError, SteeringParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::candidates::{generate_candidates, prefix_ids, resolve_attribute, AttributeSpec, Generation, ResolveError};
use crate::state::{new_id, now_ms, AppState, Cursor, HistoryEntry, Pending, ScriptRecord, Session};

pub const MAX_CANDIDATES: usize = 16;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/scripts", post(upload_script).get(list_scripts))
        .route("/v1/scripts/{id}", get(get_script))
        .route("/v1/scripts/{id}/export", get(export_script))
        .route("/v1/generate", post(generate))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/accept", post(accept))
        .route("/v1/attributes", get(attributes))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "NotFound", "no such route") })
        .with_state(state)
}

/// Rendered as `{"error": name, "detail": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub name: String,
    pub detail: String,
}

impl ApiError {
    pub fn new(status: StatusCode, name: impl Into<String>, detail: impl Into<String>) -> Self {
        ApiError { status, name: name.into(), detail: detail.into() }
    }
    fn bad_request(name: &str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, name, detail)
    }
    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("Unknown{what}"), format!("no {} with id {id:?}", what.to_lowercase()))
    }
    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.name, "detail": self.detail }))).into_response()
    }
}

impl From<SteerError> for ApiError {
    fn from(e: SteerError) -> Self {
        let status = match e {
            SteerError::InvalidParams(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.name(), e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn json_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("MalformedJson", e.to_string()))
}

fn persist<T: Serialize>(state: &AppState, kind: &str, id: &str, value: &T) -> ApiResult<()> {
    state.store.put(kind, id, value).map_err(ApiError::internal)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let m = &state.models;
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "checkpoint": m.checkpoint.as_ref().map(|c| json!({
            "id": c.id,
            "config": c.ck.model.config,
            "step": c.ck.step,
        })),
    }))
}

#[derive(Debug, Serialize)]
struct ScriptSummary {
    id: String,
    title: String,
    version: u64,
    source_hash: String,
    scenes: usize,
    lines: usize,
    dialogue: usize,
    cues: usize,
}

impl From<&ScriptRecord> for ScriptSummary {
    fn from(r: &ScriptRecord) -> Self {
        let s = &r.script;
        ScriptSummary {
            id: r.id.clone(),
            title: s.title.clone(),
            version: r.version,
            source_hash: r.source_hash.clone(),
            scenes: s.scenes.len(),
            lines: s.line_count(),
            dialogue: s.dialogue_count(),
            cues: s.cue_count(),
        }
    }
}

async fn upload_script(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let unprocessable = |name: &str, detail: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, name, detail);
    let text = std::str::from_utf8(&body).map_err(|e| unprocessable("InvalidUtf8", e.to_string()))?;
    let mut script = parse_script(text).map_err(|e| unprocessable(e.name(), e.to_string()))?;
    state.store.put_blob(text.as_bytes()).map_err(ApiError::internal)?;

    let id = new_id("script");
    script.id = id.clone();
    let record = ScriptRecord { id: id.clone(), version: 1, source_hash: script.source_hash.clone(), created_ms: now_ms(), script };
    persist(&state, "scripts", &id, &record)?;
    let summary = ScriptSummary::from(&record);

    let duplicates: Vec<String> = {
        let mut table = state.scripts.write().unwrap();
        let mut d: Vec<String> = table
            .values()
            .filter_map(|r| r.lock().ok().filter(|r| r.source_hash == record.source_hash).map(|r| r.id.clone()))
            .collect();
        d.sort();
        table.insert(id.clone(), Arc::new(std::sync::Mutex::new(record)));
        d
    };
    let mut out = serde_json::to_value(&summary).map_err(ApiError::internal)?;
    if !duplicates.is_empty() {
        out["warning"] = json!(format!("identical text already uploaded as {}", duplicates.join(", ")));
        out["duplicate_of"] = json!(duplicates);
    }
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_scripts(State(state): State<Arc<AppState>>) -> Json<Vec<ScriptSummary>> {
    let table = state.scripts.read().unwrap();
    let mut records: Vec<(u64, ScriptSummary)> =
        table.values().map(|r| r.lock().unwrap()).map(|r| (r.created_ms, ScriptSummary::from(&*r))).collect();
    records.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Json(records.into_iter().map(|(_, s)| s).collect())
}

fn script_record(state: &AppState, id: &str) -> ApiResult<ScriptRecord> {
    let entry = state.script(id).ok_or_else(|| ApiError::not_found("Script", id))?;
    let r = entry.lock().unwrap().clone();
    Ok(r)
}

async fn get_script(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let r = script_record(&state, &id)?;
    let mut out = serde_json::to_value(ScriptSummary::from(&r)).map_err(ApiError::internal)?;
    out["script"] = serde_json::to_value(&r.script).map_err(ApiError::internal)?;
    Ok(Json(out))
}

async fn export_script(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let r = script_record(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], r.script.to_canonical_text()).into_response())
}

fn check_cursor(script: &Script, c: Cursor) -> ApiResult<()> {
    match script.scenes.get(c.scene) {
        Some(sc) if c.line < sc.lines.len() => Ok(()),
        _ => Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "InvalidCursor",
            format!("scene {} line {} does not exist", c.scene, c.line),
        )),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    script_id: String,
    #[serde(default)]
    scene: usize,
    #[serde(default)]
    line: usize,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Session>)> {
    let req: NewSession = json_body(&body)?;
    let script = script_record(&state, &req.script_id)?;
    let cursor = Cursor { scene: req.scene, line: req.line };
    check_cursor(&script.script, cursor)?;
    let session = Session {
        id: new_id("session"),
        script_id: req.script_id,
        cursor,
        history: Vec::new(),
        checkpoint_id: state.models.checkpoint_id(),
        pending: None,
        params: None,
        attribute: None,
        created_ms: now_ms(),
    };
    persist(&state, "sessions", &session.id, &session)?;
    state.sessions.write().unwrap().insert(session.id.clone(), Arc::new(std::sync::Mutex::new(session.clone())));
    Ok((StatusCode::CREATED, Json(session)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<Session>> {
    let table = state.sessions.read().unwrap();
    let mut all: Vec<Session> = table.values().map(|s| s.lock().unwrap().clone()).collect();
    all.sort_by(|a, b| a.created_ms.cmp(&b.created_ms).then_with(|| a.id.cmp(&b.id)));
    Json(all)
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    let entry = state.session(&id).ok_or_else(|| ApiError::not_found("Session", &id))?;
    let s = entry.lock().unwrap().clone();
    Ok(Json(s))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    /// Free text prefix; alternatively a script line reference, or the
    /// session's cursor.
    #[serde(default)]
    pub prefix: Option<String>,
    #[serde(default)]
    pub script_id: Option<String>,
    #[serde(default)]
    pub scene: Option<usize>,
    #[serde(default)]
    pub line: Option<usize>,
    #[serde(default)]
    pub session_id: Option<String>,
    pub attribute: AttributeSpec,
    /// Partial overrides of the defaults (or of the session's last settings).
    #[serde(default)]
    pub params: Option<Value>,
    #[serde(default = "default_candidates")]
    pub num_candidates: usize,
    #[serde(default = "default_true")]
    pub compare_unsteered: bool,
}

fn default_candidates() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize)]
struct GenerationResponse {
    session_id: Option<String>,
    checkpoint_id: String,
    params: SteeringParams,
    input_line: String,
    #[serde(flatten)]
    generation: Generation,
}

/// Model text of the scene up to and including the cursor line.
fn scene_prefix(script: &Script, c: Cursor) -> (String, String) {
    let lines = &script.scenes[c.scene].lines[..=c.line];
    let text = lines.iter().map(Line::model_text).collect::<Vec<_>>().join(" ");
    (text, lines[c.line].canonical())
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: GenerationRequest = json_body(&body)?;
    if !(1..=MAX_CANDIDATES).contains(&req.num_candidates) {
        return Err(ApiError::bad_request(
            "InvalidRequest",
            format!("num_candidates must be in [1, {MAX_CANDIDATES}], got {}", req.num_candidates),
        ));
    }
    req.attribute.kind().map_err(|e| ApiError::bad_request("InvalidAttribute", e))?;
    let reference = match (&req.script_id, req.scene, req.line) {
        (None, None, None) => None,
        (Some(id), Some(scene), Some(line)) => Some((id.clone(), Cursor { scene, line })),
        _ => return Err(ApiError::bad_request("InvalidRequest", "script_id, scene and line go together")),
    };
    if req.prefix.is_some() && reference.is_some() {
        return Err(ApiError::bad_request("InvalidRequest", "give either prefix or a script line, not both"));
    }
    let session = match &req.session_id {
        Some(id) => Some(state.session(id).ok_or_else(|| ApiError::not_found("Session", id))?),
        None => None,
    };
    if req.prefix.is_none() && reference.is_none() && session.is_none() {
        return Err(ApiError::bad_request("InvalidRequest", "no prefix, script line or session given"));
    }
    let session_snapshot = session.as_ref().map(|s| s.lock().unwrap().clone());

    let base = session_snapshot.as_ref().and_then(|s| s.params).unwrap_or_default();
    let params = match &req.params {
        Some(over) => {
            let mut merged = serde_json::to_value(base).map_err(ApiError::internal)?;
            let Value::Object(over) = over else {
                return Err(ApiError::bad_request("InvalidParams", "params must be an object"));
            };
            for (k, v) in over {
                if merged.get(k).is_none() {
                    return Err(ApiError::bad_request("InvalidParams", format!("unknown parameter {k:?}")));
                }
                merged[k] = v.clone();
            }
            serde_json::from_value::<SteeringParams>(merged).map_err(|e| ApiError::bad_request("InvalidParams", e.to_string()))?
        }
        None => base,
    };
    params.validate()?;

    let models = state.models.clone();
    let Some(loaded) = models.checkpoint.as_ref() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "NoCheckpoint", "no checkpoint is loaded"));
    };
    let attr = resolve_attribute(
        &req.attribute,
        &loaded.ck,
        models.cue_head.as_ref(),
        models.emotion_head.as_ref(),
        models.lda.as_ref(),
    )
    .map_err(|e| match e {
        ResolveError::Invalid(d) => ApiError::bad_request("InvalidAttribute", d),
        ResolveError::NotLoaded(d) => ApiError::new(StatusCode::CONFLICT, "AttributeModelNotLoaded", d),
    })?;

    // resolve the prefix text and, for sessions, the cursor it came from
    let mut cursor = None;
    let (prefix, input_line) = if let Some(p) = &req.prefix {
        (p.clone(), p.clone())
    } else {
        let (script_id, c) = match (&reference, &session_snapshot) {
            (Some((id, c)), _) => (id.clone(), *c),
            (None, Some(s)) => (s.script_id.clone(), s.cursor),
            (None, None) => unreachable!("checked above"),
        };
        if let Some(s) = &session_snapshot {
            if s.script_id != script_id {
                return Err(ApiError::bad_request("InvalidRequest", "script line is not in the session's script"));
            }
        }
        let record = script_record(&state, &script_id)?;
        check_cursor(&record.script, c)?;
        cursor = Some(c);
        scene_prefix(&record.script, c)
    };

    let n = req.num_candidates;
    let compare = req.compare_unsteered;
    let shared = state.models.clone();
    let generation = tokio::task::spawn_blocking(move || {
        let loaded = shared.checkpoint.as_ref().expect("checked above");
        let ids = prefix_ids(&loaded.ck, &prefix, params.max_len);
        generate_candidates(&loaded.ck, &attr, &ids, &params, n, compare)
    })
    .await
    .map_err(ApiError::internal)??;

    if let Some(entry) = &session {
        let mut s = entry.lock().unwrap();
        if let Some(c) = cursor {
            s.cursor = c;
        }
        s.params = Some(params);
        s.attribute = Some(req.attribute.clone());
        s.pending = Some(Pending {
            input_line: input_line.clone(),
            attribute: req.attribute.clone(),
            params,
            candidates: generation.candidates.clone(),
        });
        persist(&state, "sessions", &s.id, &*s)?;
    }
    let resp = GenerationResponse {
        session_id: req.session_id.clone(),
        checkpoint_id: loaded.id.clone(),
        params,
        input_line,
        generation,
    };
    Ok(Json(serde_json::to_value(resp).map_err(ApiError::internal)?))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcceptRequest {
    #[serde(default)]
    candidate: usize,
}

async fn accept(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Session>> {
    let req: AcceptRequest = if body.iter().all(u8::is_ascii_whitespace) { AcceptRequest::default() } else { json_body(&body)? };
    let entry = state.session(&id).ok_or_else(|| ApiError::not_found("Session", &id))?;
    // lock order: session, then script
    let mut session = entry.lock().unwrap();
    let Some(pending) = session.pending.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "NoPendingCandidates", "generate candidates before accepting"));
    };
    let Some(chosen) = pending.candidates.get(req.candidate) else {
        return Err(ApiError::bad_request(
            "CandidateOutOfRange",
            format!("candidate {} of {}", req.candidate, pending.candidates.len()),
        ));
    };
    if chosen.cue_text.trim_matches(|c: char| c == '(' || c == ')' || c.is_whitespace()).is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "EmptyCandidate", "candidate has no text to insert"));
    }
    let script_entry = state.script(&session.script_id).ok_or_else(|| ApiError::not_found("Script", &session.script_id))?;
    let mut record = script_entry.lock().unwrap();
    let c = session.cursor;
    let mut updated = record.clone();
    let at = updated
        .script
        .insert_line(c.scene, c.line, Line::cue(chosen.cue_text.clone()))
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "InvalidCursor", "session cursor no longer addresses a line"))?;
    updated.version += 1;
    persist(&state, "scripts", &updated.id, &updated)?;

    let mut next = session.clone();
    next.cursor = Cursor { scene: c.scene, line: at };
    next.history.push(HistoryEntry {
        input_line: pending.input_line.clone(),
        attribute: pending.attribute.clone(),
        params: pending.params,
        candidate: req.candidate,
        chosen_text: chosen.cue_text.clone(),
        inserted_at: next.cursor,
        script_version: updated.version,
        timestamp_ms: now_ms(),
    });
    next.pending = None;
    persist(&state, "sessions", &next.id, &next)?;
    *record = updated;
    *session = next.clone();
    Ok(Json(next))
}

async fn attributes(State(state): State<Arc<AppState>>) -> Json<Value> {
    let m = &state.models;
    let head = |name: &str, h: &cuegen_core::attributes::LinearHead| {
        json!({ "name": name, "classes": h.classes, "mode": format!("{:?}", h.mode).to_lowercase(), "dim": h.dim() })
    };
    let mut models = Vec::new();
    if let Some(h) = &m.cue_head {
        models.push(head("sentence_type", h));
    }
    if let Some(h) = &m.emotion_head {
        models.push(head("emotion", h));
    }
    let topics: Vec<Value> = m
        .lda
        .as_ref()
        .map(|lda| {
            (0..lda.k)
                .map(|k| {
                    let words = lda.top_words(k, 10).unwrap_or_default();
                    json!({ "topic": k, "top_words": words.iter().map(|(w, p)| json!({"word": w, "weight": p})).collect::<Vec<_>>() })
                })
                .collect()
        })
        .unwrap_or_default();
    Json(json!({ "models": models, "topics": topics }))
}
