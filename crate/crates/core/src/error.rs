//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid region box: {0}")]
    InvalidBox(String),

    #[error("degenerate zoom: crop covers {w:.4}x{h:.4} source pixels, need at least 1x1")]
    DegenerateZoom { w: f64, h: f64 },

    #[error("empty clip: every dimension must be nonzero")]
    EmptyClip,

    #[error("bad container data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("exploration stalled: {0} candidates rejected in a row")]
    ExploreStall(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
