use std::path::PathBuf;

use crate::types::PhaseTag;

#[derive(Debug, thiserror::Error)]
pub enum PcnError {
    #[error("invalid range: lo ({lo}) must be below hi ({hi})")]
    InvalidRange { lo: f64, hi: f64 },
    #[error("{name} = {value} lies outside [{lo}, {hi}]")]
    OutOfBounds { name: String, value: f64, lo: f64, hi: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("phase mismatch: expected {expected}, got {got}")]
    PhaseMismatch { expected: PhaseTag, got: PhaseTag },
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}", format_issues(.0))]
    Validation(Vec<ConfigIssue>),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("stage order violation: {0}")]
    StageOrder(String),
    #[error("checksum mismatch in {path}: {detail}")]
    Checksum { path: PathBuf, detail: String },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("run directory {0} is locked by another invocation")]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PcnError>;

/// One violation found while validating a configuration file.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    let mut s = format!("{} configuration error(s)", issues.len());
    for i in issues {
        s.push_str("\n  ");
        s.push_str(&i.to_string());
    }
    s
}

impl PcnError {
    /// Process exit code for the CLI: 1 for validation problems, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PcnError::Validation(_) | PcnError::Config(_) | PcnError::InvalidRange { .. } | PcnError::OutOfBounds { .. } => 1,
            _ => 2,
        }
    }
}
