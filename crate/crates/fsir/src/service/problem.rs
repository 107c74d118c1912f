use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use serde::{Deserialize, Serialize};

/// Error response body, served as `application/problem+json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemBody {
    #[serde(rename = "type")]
    pub kind: String,
    pub title: String,
    pub status: u16,
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub status: StatusCode,
    pub code: String,
    pub detail: String,
}

impl Problem {
    pub fn new(status: StatusCode, code: &str, detail: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            detail: detail.into(),
        }
    }

    pub fn body(&self) -> ProblemBody {
        ProblemBody {
            kind: "about:blank".into(),
            title: self.status.canonical_reason().unwrap_or("Error").into(),
            status: self.status.as_u16(),
            code: self.code.clone(),
            detail: self.detail.clone(),
        }
    }
}

fn status_for(code: &str) -> StatusCode {
    match code {
        "NO_EMBEDDING" | "UNKNOWN_ID" | "UNKNOWN_QUERY" | "UNKNOWN_TARGET_ID" | "DIMENSION_MISMATCH"
        | "OVERLAP_VIOLATION" | "FSR_LEAK" | "DUPLICATE_ID" | "ZERO_VECTOR" | "NON_FINITE" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        "INSUFFICIENT_EXAMPLES" | "EMPTY_POOL" => StatusCode::CONFLICT,
        "NON_FINITE_LOSS" | "DISTRIBUTION_INVALID" => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<crate::Error> for Problem {
    fn from(e: crate::Error) -> Self {
        let code = e.code();
        Self::new(status_for(code), code, e.to_string())
    }
}

impl From<fsir_core::Error> for Problem {
    fn from(e: fsir_core::Error) -> Self {
        crate::Error::from(e).into()
    }
}

impl IntoResponse for Problem {
    fn into_response(self) -> Response {
        let body = serde_json::to_vec(&self.body()).expect("problem body serializes");
        (self.status, [(header::CONTENT_TYPE, "application/problem+json")], body).into_response()
    }
}
