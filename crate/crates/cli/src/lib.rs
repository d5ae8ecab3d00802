//! Config-driven pipeline behind the `pqo` binary: scenario generation,
//! candidate generation, collection, training and evaluation, each stage
//! reading and writing the files named by a [`PipelineConfig`].

pub mod config;
pub mod pipeline;
pub mod report;
pub mod workload_file;

use std::fmt;

use thiserror::Error;

pub use config::{Files, Holdout, PipelineConfig, CONFIG_VERSION};
pub use pipeline::{collect, evaluate, gen, predict, run, train, candidates, RunSummary};
pub use report::{EvaluationReport, HoldoutReport, SweepPoint};
pub use workload_file::WorkloadFile;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Gen,
    Candidates,
    Collect,
    Train,
    Evaluate,
    Predict,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Gen => "gen",
            Stage::Candidates => "candidates",
            Stage::Collect => "collect",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Predict => "predict",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed [{}]: {source}", source.code())]
    Stage {
        stage: Stage,
        #[source]
        source: pqo::Error,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }

    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Stage { source, .. } => source.code(),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> StageExt<T> for pqo::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError::Stage { stage, source })
    }
}
