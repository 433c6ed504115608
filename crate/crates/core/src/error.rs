use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("scenario is invalid:\n  - {}", .problems.join("\n  - "))]
    Validation { problems: Vec<String> },

    #[error("no path from node {from} to node {to}")]
    NoPath { from: u32, to: u32 },

    #[error("unknown road node {0}")]
    UnknownNode(u32),

    #[error("unknown bus {0}")]
    UnknownBus(u32),

    #[error("empty choice set: no built site and the outside good is disabled")]
    EmptyChoiceSet,

    #[error("branch {from}-{to} has zero series impedance")]
    ZeroImpedance { from: u32, to: u32 },

    #[error("singular Jacobian in power flow")]
    SingularMatrix,

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("policy enumeration over {0} sites exceeds the cap of {cap}", cap = crate::game::MAX_ENUMERATED_SITES)]
    EnumerationCap(usize),

    #[error("provider {provider}: no placement policy satisfies the QoS constraints")]
    Infeasible { provider: usize },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::NoPath { .. } => "no_path",
            Error::UnknownNode(_) => "unknown_node",
            Error::UnknownBus(_) => "unknown_bus",
            Error::EmptyChoiceSet => "empty_choice_set",
            Error::ZeroImpedance { .. } => "zero_impedance",
            Error::SingularMatrix => "singular_matrix",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EnumerationCap(_) => "enumeration_cap",
            Error::Infeasible { .. } => "infeasible",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn parse_error(path: impl Into<PathBuf>, message: impl ToString) -> Error {
    Error::Parse { path: path.into(), message: message.to_string() }
}
