//! Scenario simulation, filter orchestration, evaluation and Monte Carlo
//! aggregation for the `tpmb-core` filters.

pub mod config;
pub mod io;
pub mod mc;
pub mod run;
pub mod scenario;

use thiserror::Error;
use tpmb_core::filter::FilterError;
use tpmb_core::linalg::LinalgError;
use tpmb_core::metrics::MetricError;
use tpmb_core::models::ModelError;
use tpmb_core::registry::UnknownName;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Unknown(#[from] UnknownName),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Input(_) => "input",
            HarnessError::Io(_) => "io",
            HarnessError::Json(_) => "json",
            HarnessError::Csv(_) => "csv",
            HarnessError::Filter(_) => "filter",
            HarnessError::Metric(_) => "metric",
            HarnessError::Model(_) => "model",
            HarnessError::Linalg(_) => "linalg",
            HarnessError::Unknown(_) => "unknown-name",
        }
    }

    /// `{"error": kind, "message": text}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() })
    }
}
