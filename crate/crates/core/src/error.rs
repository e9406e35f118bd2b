use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model profile `{id}`: {reason}")]
    InvalidProfile { id: String, reason: String },

    #[error("duplicate model id `{0}`")]
    DuplicateId(String),

    #[error("invalid granularity: {0}")]
    InvalidGranularity(String),

    /// Two frontier neighbours sit within one grid step of each other, or a
    /// latency exceeds the configured upper bound.
    #[error("granularity violation: {0}")]
    GranularityViolation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("frontier is empty")]
    EmptyFrontier,

    #[error("serve log is empty")]
    EmptyLog,

    #[error("invalid defense config: {0}")]
    InvalidDefense(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("no fingerprinted model fits the latency budget of {latency_budget} ms")]
    NoFeasibleVictim { latency_budget: f64 },

    #[error("query budget of {budget} exhausted after {spent} queries")]
    BudgetExhausted { spent: u64, budget: u64 },

    #[error("infeasible zoo generation spec: {0}")]
    InfeasibleSpec(String),

    #[error("malformed message: {0}")]
    Malformed(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("model registration is closed once serving has started")]
    RegistrationAfterStart,

    #[error("server is not serving yet")]
    NotServing,

    #[error("telemetry is only available in experiment mode")]
    TelemetryUnavailable,

    #[error("server replied with error `{code}`: {message}")]
    Remote { code: String, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
