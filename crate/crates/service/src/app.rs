//! Route handlers and the application builder.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use colm_core::canonical;
use colm_core::eval::SERVER_PARTICIPANT;
use colm_core::orchestrator::RoundProgress;
use colm_core::store::{StoreError, SERVER_OVERRIDE_KEY};
use colm_core::types::{ClientPool, ClientProfile, ImageRef, Query, QueryMode};

use crate::state::{RunState, SharedState};

pub fn build_app(state: SharedState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/clients", post(register_client))
        .route("/v1/queries", post(submit_query))
        .route("/v1/transcripts/{id}", get(get_transcript))
        .route("/v1/usage", get(usage))
        .with_state(state)
}

fn error_body(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn health() -> Response {
    Json(json!({ "status": "ok" })).into_response()
}

/// Register (or re-register) a client. Identical re-registrations are
/// idempotent; changing an existing client's settings is a conflict.
async fn register_client(
    State(state): State<SharedState>,
    payload: Result<Json<ClientProfile>, JsonRejection>,
) -> Response {
    let Json(profile) = match payload {
        Ok(json) => json,
        Err(rejection) => {
            return error_body(StatusCode::UNPROCESSABLE_ENTITY, rejection.body_text())
        }
    };
    if let Err(err) = profile.validate() {
        return error_body(StatusCode::UNPROCESSABLE_ENTITY, err.to_string());
    }
    if profile.name == SERVER_PARTICIPANT || profile.name == SERVER_OVERRIDE_KEY {
        return error_body(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("client name '{}' is reserved", profile.name),
        );
    }

    let mut clients = state.clients.write().expect("client registry lock");
    if let Some(existing) = clients.get(&profile.name) {
        let unchanged = canonical::to_canonical_json(existing).ok()
            == canonical::to_canonical_json(&profile).ok();
        if unchanged {
            return (
                StatusCode::OK,
                Json(json!({ "status": "unchanged", "name": profile.name })),
            )
                .into_response();
        }
        return error_body(
            StatusCode::CONFLICT,
            format!(
                "client '{}' is already registered with different settings",
                profile.name
            ),
        );
    }
    let name = profile.name.clone();
    clients.insert(name.clone(), profile);
    (
        StatusCode::CREATED,
        Json(json!({ "status": "created", "name": name })),
    )
        .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    text: String,
    #[serde(default)]
    mode: Option<QueryMode>,
    #[serde(default)]
    attachments: Vec<ImageRef>,
}

/// Accept a query, start it in the background, and return the transcript id
/// to poll. Rejects when the pool has no eligible client or the service is
/// at capacity.
async fn submit_query(
    State(state): State<SharedState>,
    payload: Result<Json<QueryRequest>, JsonRejection>,
) -> Response {
    let Json(request) = match payload {
        Ok(json) => json,
        Err(rejection) => {
            return error_body(StatusCode::UNPROCESSABLE_ENTITY, rejection.body_text())
        }
    };

    let mode = request.mode.unwrap_or(if request.attachments.is_empty() {
        QueryMode::Language
    } else {
        QueryMode::VisionLanguage
    });
    let query = match mode {
        QueryMode::Language => {
            if !request.attachments.is_empty() {
                return error_body(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "language queries carry no attachments",
                );
            }
            Query::language(request.text)
        }
        QueryMode::VisionLanguage => Query::vision(request.text, request.attachments),
    };
    let query = match query {
        Ok(query) => query,
        Err(err) => return error_body(StatusCode::UNPROCESSABLE_ENTITY, err.to_string()),
    };

    let profiles: Vec<ClientProfile> = {
        let clients = state.clients.read().expect("client registry lock");
        clients.values().cloned().collect()
    };
    let eligible = match query.mode {
        QueryMode::Language => !profiles.is_empty(),
        QueryMode::VisionLanguage => profiles.iter().any(|p| p.backend.vision),
    };
    if !eligible {
        return error_body(
            StatusCode::CONFLICT,
            "no eligible clients are registered for this query mode",
        );
    }

    let cap = state.admission_cap();
    let admitted = state
        .active
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |active| {
            (active < cap).then_some(active + 1)
        });
    if admitted.is_err() {
        return error_body(
            StatusCode::TOO_MANY_REQUESTS,
            format!("at capacity: {cap} queries already accepted and unfinished"),
        );
    }

    let id = uuid::Uuid::new_v4().to_string();
    let progress = RoundProgress::new();
    state.runs.lock().expect("run registry lock").insert(
        id.clone(),
        RunState::Running {
            progress: progress.clone(),
        },
    );

    tokio::spawn(execute_query(
        state.clone(),
        id.clone(),
        query,
        profiles,
        progress,
    ));

    (StatusCode::ACCEPTED, Json(json!({ "transcript_id": id }))).into_response()
}

async fn execute_query(
    state: SharedState,
    id: String,
    query: Query,
    profiles: Vec<ClientProfile>,
    progress: RoundProgress,
) {
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .expect("run semaphore is never closed");

    let outcome = run_to_stored_body(&state, &id, query, profiles, &progress).await;

    let next = match outcome {
        Ok(body) => RunState::Done {
            body: Arc::new(body),
        },
        Err(message) => RunState::Failed { message },
    };
    state
        .runs
        .lock()
        .expect("run registry lock")
        .insert(id, next);
    state.active.fetch_sub(1, Ordering::SeqCst);
}

async fn run_to_stored_body(
    state: &SharedState,
    id: &str,
    query: Query,
    profiles: Vec<ClientProfile>,
    progress: &RoundProgress,
) -> Result<String, String> {
    let mut transcript = match query.mode {
        QueryMode::Language => {
            let pool = ClientPool::new(profiles).map_err(|e| e.to_string())?;
            state
                .runner
                .run_collaboration(&query, &pool, &state.run_config, Some(progress))
                .await
                .map_err(|e| e.to_string())?
        }
        QueryMode::VisionLanguage => {
            let vision: Vec<ClientProfile> =
                profiles.into_iter().filter(|p| p.backend.vision).collect();
            state
                .runner
                .run_vlm(&query, &vision, &state.run_config)
                .await
                .map_err(|e| e.to_string())?
        }
    };
    transcript.id = id.to_string();

    let store = state.store.clone();
    let body = transcript.encode().map_err(|e| e.to_string())?;
    tokio::task::spawn_blocking(move || store.append_transcript(&transcript).map(|_| ()))
        .await
        .map_err(|e| e.to_string())?
        .map_err(|e| e.to_string())?;
    Ok(body)
}

/// Fetch a transcript: the canonical stored bytes once done, a progress
/// body while running.
async fn get_transcript(State(state): State<SharedState>, Path(id): Path<String>) -> Response {
    {
        let runs = state.runs.lock().expect("run registry lock");
        match runs.get(&id) {
            Some(RunState::Running { progress }) => {
                return (
                    StatusCode::ACCEPTED,
                    Json(json!({
                        "status": "running",
                        "completed_rounds": progress.completed_rounds(),
                    })),
                )
                    .into_response();
            }
            Some(RunState::Done { body }) => {
                return transcript_body(body.as_str().to_owned());
            }
            Some(RunState::Failed { message }) => {
                return error_body(StatusCode::INTERNAL_SERVER_ERROR, message.clone());
            }
            None => {}
        }
    }

    // Not tracked in this process: serve whatever the store has.
    let store = state.store.clone();
    let lookup = tokio::task::spawn_blocking(move || store.load_transcript(&id)).await;
    match lookup {
        Ok(Ok(transcript)) => match transcript.encode() {
            Ok(body) => transcript_body(body),
            Err(err) => error_body(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
        },
        Ok(Err(StoreError::NotFound(id))) => error_body(
            StatusCode::NOT_FOUND,
            format!("transcript '{id}' not found"),
        ),
        Ok(Err(err)) => error_body(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
        Err(err) => error_body(StatusCode::INTERNAL_SERVER_ERROR, err.to_string()),
    }
}

fn transcript_body(body: String) -> Response {
    (
        StatusCode::OK,
        [(header::CONTENT_TYPE, "application/json")],
        body,
    )
        .into_response()
}

/// Usage accounted by the gateway since the service started, per binding.
async fn usage(State(state): State<SharedState>) -> Response {
    let by_binding = state.runner.gateway.usage_by_binding();
    let total = state.runner.gateway.usage_total();
    Json(json!({ "bindings": by_binding, "total": total })).into_response()
}
