use std::io;

use pmcmc::samplers::SamplerError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid configuration at `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Runtime(String),
    #[error("oracle checks failed: {0}")]
    OracleFailed(String),
}

impl CliError {
    pub fn validation(field: &str, message: impl Into<String>) -> Self {
        CliError::Validation { field: field.to_string(), message: message.into() }
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            CliError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }

    /// 2 for unusable input, 3 for failed oracle checks, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } => 2,
            CliError::OracleFailed(_) => 3,
            _ => 1,
        }
    }

    /// One-line JSON report for stderr.
    pub fn to_json(&self) -> String {
        let value = match self {
            CliError::Validation { field, message } => {
                json!({ "error": "validation", "field": field, "message": message })
            }
            CliError::Parse { origin, message } => json!({ "error": "parse", "origin": origin, "message": message }),
            CliError::OracleFailed(m) => json!({ "error": "oracle", "message": m }),
            other => json!({ "error": "runtime", "message": other.to_string() }),
        };
        value.to_string()
    }
}
