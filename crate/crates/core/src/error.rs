use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis} axis: {extent} is not divisible by patch extent {patch}")]
    PatchDivisibility {
        axis: &'static str,
        extent: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("need at least two frames, got {0}")]
    TooFewFrames(usize),

    #[error("zero variance in {0} population")]
    ZeroVariance(&'static str),

    #[error("keep mask frame 0 must be all-true")]
    FirstFrameNotKept,

    #[error("query at position {0:?} has no visible keys under causal masking")]
    NoVisibleKeys((usize, usize, usize)),

    #[error("kv cache rejects non-clean tokens (frame {0})")]
    NotClean(usize),

    #[error("no clean cache entry for location ({y}, {x}) near frame {t}")]
    CacheMiss { t: usize, y: usize, x: usize },

    #[error("ltns format: {0}")]
    Format(String),

    #[error("timer resolution insufficient: {0}")]
    TimerResolution(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
