//! JSON-over-HTTP facade for participant sessions and analysis.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | `{policy, seed?}` → 201 with id and baseline examples |
//! | GET | `/sessions/{id}/step` | what the participant should see now |
//! | POST | `/sessions/{id}/responses` | `{satisfaction?, guesses}` → progress |
//! | GET | `/analysis/summary` | trajectory summary of completed sessions |
//! | GET | `/analysis/summary.csv` | the same summary as CSV |
//! | GET | `/health` | liveness |

pub mod error;
pub mod store;
pub mod views;

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use seqex_core::analysis::summarize_complete;
use seqex_core::mental_model::{SatisfactionResponse, SimulatabilityResponse};
use seqex_core::policies::PolicyKind;
use seqex_core::session::Phase;

pub use error::ApiError;
pub use store::{SessionStore, StoreError};
use views::{ResponseBody, StartBody, Step};

type Shared = Arc<SessionStore>;

pub fn router(store: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(start))
        .route("/sessions/{id}/step", get(step))
        .route("/sessions/{id}/responses", post(respond))
        .route("/analysis/summary", get(summary))
        .route("/analysis/summary.csv", get(summary_csv))
        .with_state(store)
}

/// CORS for the participant UI: one origin, or any when `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, header::InvalidHeaderValue> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o)?),
        None => AllowOrigin::from(Any),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods(Any)
        .allow_headers(Any))
}

fn parse<T: DeserializeOwned>(body: &Bytes, status: StatusCode) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(status, "malformed_body", e.to_string()))
}

async fn start(State(store): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: StartBody = parse(&body, StatusCode::BAD_REQUEST)?;
    let policy: PolicyKind = req.policy.parse()?;
    let record = store.create(policy, req.seed.unwrap_or_else(rand::random))?;
    let created = views::Created {
        session_id: record.session_id.clone(),
        policy,
        phase: record.phase.name().to_string(),
        baseline_examples: views::baseline_examples(store.experiment(), &record),
    };
    Ok((StatusCode::CREATED, Json(created)))
}

async fn step(State(store): State<Shared>, Path(id): Path<String>) -> Result<Json<Step>, ApiError> {
    store
        .with_session(&id, |record, exp| {
            let step = match record.phase {
                Phase::AwaitingBaseline => Step::AwaitingBaseline {
                    baseline_examples: views::baseline_examples(exp, record),
                    task: views::task_images(exp),
                },
                Phase::AwaitingIteration(t) => Step::AwaitingIteration {
                    t,
                    explanation: views::explanation(exp, record.current_explanation(exp)?),
                    satisfaction: views::SATISFACTION_FORM,
                    task: views::task_images(exp),
                },
                Phase::Complete => Step::Complete {
                    rewards: record.iterations.iter().map(|i| i.reward).collect(),
                    relative_rewards: record.iterations.iter().map(|i| i.relative_reward).collect(),
                },
            };
            Ok(step)
        })
        .map(Json)
}

async fn respond(
    State(store): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<views::Progress>, ApiError> {
    let req: ResponseBody = parse(&body, StatusCode::UNPROCESSABLE_ENTITY)?;
    let guesses = SimulatabilityResponse { guesses: req.guesses };
    store
        .with_session(&id, |record, exp| {
            match (record.phase, req.satisfaction) {
                (Phase::AwaitingBaseline, Some(_)) => {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "unexpected_satisfaction",
                        "the baseline has no satisfaction questionnaire",
                    ))
                }
                (Phase::AwaitingBaseline, None) => record.submit_baseline(exp, &guesses)?,
                (Phase::AwaitingIteration(_), None) => {
                    return Err(ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "missing_satisfaction",
                        "experimental iterations need the satisfaction questionnaire",
                    ))
                }
                (Phase::AwaitingIteration(_), Some(items)) => {
                    record.submit_iteration(exp, &SatisfactionResponse { items }, &guesses)?
                }
                (Phase::Complete, _) => {
                    return Err(ApiError::new(
                        StatusCode::CONFLICT,
                        "wrong_phase",
                        "the session is complete",
                    ))
                }
            }
            Ok(views::progress(record))
        })
        .map(Json)
}

fn completed_summary(store: &SessionStore) -> Result<seqex_core::analysis::TrajectorySummary, ApiError> {
    let summary = summarize_complete(&store.snapshot());
    if summary.rows.is_empty() {
        Err(SessionStore::no_complete_sessions())
    } else {
        Ok(summary)
    }
}

async fn summary(State(store): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(completed_summary(&store)?))
}

async fn summary_csv(State(store): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    let csv = completed_summary(&store)?.to_csv()?;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv))
}
