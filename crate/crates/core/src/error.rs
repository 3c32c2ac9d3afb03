use std::path::PathBuf;

/// Errors raised across the pose estimation stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid rotation matrix: {0}")]
    InvalidRotation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("camera outside lumen (signed distance {distance:.4})")]
    OutsideLumen { distance: f64 },

    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("trajectory {traj_id}: {source}")]
    Trajectory {
        traj_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient trajectories in group {group}: need {needed}, have {available}")]
    InsufficientTrajectories {
        group: String,
        needed: usize,
        available: usize,
    },

    #[error("empty validation set")]
    EmptyValidation,

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or arguments rather than runtime failures.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Precondition(_)
            | Error::InsufficientTrajectories { .. }
            | Error::EmptyValidation => true,
            Error::Trajectory { source, .. } | Error::Frame { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
