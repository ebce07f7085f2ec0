use std::io;

use thiserror::Error;

use crate::model::EventIssue;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("event validation failed with {} issue(s): {}", .0.len(), summarize(.0))]
    InvalidEvents(Vec<EventIssue>),

    #[error("invalid interval sequence for {character_id}: {reason}")]
    InvalidSequence { character_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("insufficient data: need at least {need} sequences, got {got}")]
    InsufficientData { need: usize, got: usize },

    #[error("crop overlap of {0} timesteps is shorter than 2")]
    OverlapTooShort(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("too few points: need more than {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("perturbation level {0} outside 1..=10")]
    InvalidLevel(u32),

    #[error("length mismatch: {left} != {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),

    #[error("cluster has {got} members, need at least {need}")]
    ClusterTooSmall { need: usize, got: usize },

    #[error("unknown cluster {0}")]
    UnknownCluster(i64),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("verifier backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("run store: {0}")]
    Store(String),

    #[error("unknown run {0}")]
    UnknownRun(String),

    #[error("run {0} already exists; pass --force to overwrite or --resume to continue")]
    RunExists(String),

    #[error("character {0} is not a member of any cluster in this run")]
    UnknownCharacter(String),

    #[error("decision conflict for {character_id}: expected {expected}, found {found}")]
    DecisionConflict { character_id: String, expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn summarize(issues: &[EventIssue]) -> String {
    let mut out = issues
        .iter()
        .take(3)
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    if issues.len() > 3 {
        out.push_str("; ...");
    }
    out
}
