//! Experiment driver: configuration, training and evaluation runs,
//! attention probes, heatmap rendering and arm comparison.

pub mod config;
pub mod probe;
pub mod render;
pub mod report;
pub mod run;

use std::path::Path;

pub use config::{
    exp1_arms, exp2_arm, output_root, parse_document, reduced_arm, resolve_config, smoke_config, ExperimentConfig,
    OUTPUT_ROOT_VAR,
};
pub use probe::{probe_agent, probe_run, ProbeExport, Scenario};
pub use render::{grid_to_text, parse_grid, render_pgm, Palette};
pub use report::{compare, format_rows, ReportRow};
pub use run::{evaluate, is_complete, read_eval, read_metadata, train, AgentHeatmap, EvalReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] da3_core::CoreError),
    #[error(transparent)]
    Env(#[from] da3_gridworld::EnvError),
    #[error(transparent)]
    Map(#[from] da3_gridworld::MapError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, e: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            message: e.to_string(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
