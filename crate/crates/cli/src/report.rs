use std::time::Duration;

use cdtree_core::{ComputeError, ModelError};
use serde_json::{json, Value};

pub const SCHEMA: u32 = 1;

/// Exit status for malformed command lines, kept apart from the model (1)
/// and computation (2) failures.
pub const USAGE_EXIT: i32 = 64;

/// What a command produced. `payload` is the deterministic part; the
/// envelope adds the command echo and timing.
#[derive(Debug)]
pub struct RunReport {
    pub command: Vec<String>,
    pub engine: Option<String>,
    pub mode: Option<&'static str>,
    pub wall_time: Duration,
    pub nodes: Value,
    pub payload: Value,
}

impl RunReport {
    pub fn to_json(&self) -> Value {
        json!({
            "schema": SCHEMA,
            "command": self.command,
            "engine": self.engine,
            "mode": self.mode,
            "wall_time_ms": self.wall_time.as_secs_f64() * 1e3,
            "nodes": self.nodes,
            "result": self.payload,
        })
    }
}

/// Text a command writes to stdout.
#[derive(Debug)]
pub enum Output {
    Report(RunReport),
    /// CSV or DOT, written verbatim.
    Text(String),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag values that clap cannot check on its own.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Model(String),
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => USAGE_EXIT,
            CliError::Model(_) => 1,
            CliError::Compute(_) => 2,
        }
    }
}
