use std::path::PathBuf;

/// Errors produced anywhere in the depth pipeline.
#[derive(Debug, thiserror::Error)]
pub enum RadError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: {what}: expected {expected:?}, got {got:?}")]
    Dimension {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("depth model failed on noisy variant {variant}: {source}")]
    Model {
        variant: usize,
        #[source]
        source: Box<RadError>,
    },

    #[error("evaluation set is empty (pixel_count = 0)")]
    EmptyEvaluation,

    #[error("loss undefined: no jointly valid pixels")]
    UndefinedLoss,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<RadError>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("frozen parameter `{0}` changed during optimization")]
    FrozenDrift(String),

    #[error("image codec error on {path}: {message}")]
    Codec { path: PathBuf, message: String },
}

impl RadError {
    pub fn input(msg: impl Into<String>) -> Self {
        RadError::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RadError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        RadError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = RadError> = std::result::Result<T, E>;
