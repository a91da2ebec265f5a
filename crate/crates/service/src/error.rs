use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

use seqex_core::analysis::AnalysisError;
use seqex_core::mental_model::MentalModelError;
use seqex_core::policies::PolicyError;
use seqex_core::session::SessionError;

/// Error body: `{"status": 409, "code": "wrong_phase", "message": "..."}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(serialize_with = "status_code")]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

fn status_code<S: serde::Serializer>(s: &StatusCode, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_u16(s.as_u16())
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session '{id}'"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<MentalModelError> for ApiError {
    fn from(e: MentalModelError) -> Self {
        let code = match e {
            MentalModelError::InsufficientInstances { .. } => {
                return Self::new(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    "insufficient_instances",
                    e.to_string(),
                )
            }
            MentalModelError::MissingGuess(_) => "missing_guess",
            MentalModelError::UnknownImageId(_) => "unknown_image_id",
            MentalModelError::DuplicateGuess(_) => "duplicate_guess",
            MentalModelError::WrongItemCount { .. } => "wrong_item_count",
            MentalModelError::OutOfRangeItem { .. } => "out_of_range_item",
            MentalModelError::SatWithoutExplanation => "satisfaction_without_explanation",
            MentalModelError::MissingSatisfaction => "missing_satisfaction",
            MentalModelError::LocalOutOfRange { .. } => "local_out_of_range",
        };
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let (status, code) = match e {
            PolicyError::UnknownPolicy(_) => (StatusCode::BAD_REQUEST, "unknown_policy"),
            PolicyError::UnpopulatedState => (StatusCode::CONFLICT, "unpopulated_state"),
            PolicyError::IncompleteCatalog(_) => (StatusCode::INTERNAL_SERVER_ERROR, "incomplete_catalog"),
            PolicyError::UnsupportedDiscount(_) => (StatusCode::INTERNAL_SERVER_ERROR, "unsupported_discount"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        let (status, code) = match e {
            SessionError::Scoring(inner) => return inner.into(),
            SessionError::Policy(inner) => return inner.into(),
            SessionError::WrongPhase { .. } => (StatusCode::CONFLICT, "wrong_phase"),
            SessionError::ExplanationNotIssued(_) => (StatusCode::CONFLICT, "explanation_not_issued"),
            SessionError::ExplanationAlreadyIssued(_) => (StatusCode::CONFLICT, "explanation_already_issued"),
            SessionError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            SessionError::UnknownExplanation(_) => (StatusCode::INTERNAL_SERVER_ERROR, "unknown_explanation"),
            SessionError::SessionMismatch { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "session_mismatch"),
            SessionError::OutOfOrder { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "out_of_order"),
            SessionError::CorruptLog { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_log"),
            SessionError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_failure"),
        };
        Self::new(status, code, message)
    }
}

impl From<AnalysisError> for ApiError {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::TooFewSamples(_) => "too_few_samples",
            AnalysisError::ZeroPooledSd => "zero_pooled_sd",
            AnalysisError::IncompleteSession(_) => "incomplete_session",
            AnalysisError::EmptyArm(_) => "empty_arm",
            AnalysisError::Csv(_) => "csv_failure",
            AnalysisError::Io(_) => "io_failure",
        };
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, code, e.to_string())
    }
}
