use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate record for scene {scene}, track {track}, frame {frame}")]
    DuplicateFrame { scene: String, track: i64, frame: i64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("soft-negative regularizer undefined for a single occluded index")]
    DegenerateSegment,

    #[error("AUC undefined: scores contain only {0} labels")]
    SingleClass(&'static str),

    #[error("missing label for scene {scene}, frame {frame}")]
    MissingLabel { scene: String, frame: i64 },

    #[error("non-finite loss at step {step}, task {task}: {detail}")]
    NonFinite {
        step: u64,
        task: String,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
