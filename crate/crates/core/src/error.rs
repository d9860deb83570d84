use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IdeaError> = std::result::Result<T, E>;

/// Pipeline stage attached to errors surfaced by the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Sample,
    Assemble,
    Search,
    Train,
    Evaluate,
    Report,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Sample => "sample",
            Stage::Assemble => "assemble",
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum IdeaError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate row {row}: norm is zero")]
    DegenerateRow { row: usize },

    #[error("class {class} has {found} samples, expected {expected}")]
    Cardinality {
        class: usize,
        expected: usize,
        found: usize,
    },

    #[error("label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("state corruption: {0}")]
    StateCorruption(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<IdeaError>,
    },
}

impl IdeaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdeaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        IdeaError::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// The stage tag of the outermost stage wrapper, if any.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            IdeaError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// Tags an error with the pipeline stage it came from; an existing tag wins.
pub trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            already @ IdeaError::Stage { .. } => already,
            other => IdeaError::Stage {
                stage,
                source: Box::new(other),
            },
        })
    }
}
