//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{parameter}` = {value}: {constraint}")]
    InvalidParameter {
        parameter: &'static str,
        value: String,
        constraint: &'static str,
    },

    #[error("non-finite {what} at t={t}, mark={mark:?}, x={x:?}")]
    NonFinite {
        what: &'static str,
        t: f64,
        mark: Option<usize>,
        x: Vec<f64>,
    },

    #[error("degenerate jump map at t={t}, mark={mark}, y={y:?}: Newton residual {residual:e} after {iterations} iterations")]
    DegenerateMap {
        t: f64,
        mark: usize,
        y: Vec<f64>,
        residual: f64,
        iterations: usize,
    },

    #[error("flow blow-up on path {path_id} at t={t}, mesh index {mesh_index}")]
    BlowUp {
        path_id: u64,
        t: f64,
        mesh_index: usize,
    },

    #[error("flow is not monotone on path {path_id} at t={t}")]
    NonMonotone { path_id: u64, t: f64 },

    #[error("stability guard violated: {message}; use dt <= {suggested_dt:e}")]
    Stability { message: String, suggested_dt: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("unknown problem `{name}`; available: {}", available.join(", "))]
    UnknownProblem { name: String, available: Vec<String> },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(parameter: &'static str, value: impl ToString, constraint: &'static str) -> Error {
    Error::InvalidParameter {
        parameter,
        value: value.to_string(),
        constraint,
    }
}
