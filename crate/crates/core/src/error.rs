//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor or grid shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Otsu thresholding on a constant (or single-bin) histogram; the
    /// between-class variance is zero for every split.
    #[error("degenerate histogram: all values fall into a single class")]
    DegenerateHistogram,

    /// Fewer detected panels than a spread statistic needs.
    #[error("insufficient detections: found {found}, need at least {needed}")]
    InsufficientDetections { found: usize, needed: usize },

    /// A remote service could not be reached.
    #[error("transport error: {0}")]
    Transport(String),

    /// A service reply could not be parsed into the expected shape.
    #[error("format error: {message}\n--- raw reply ---\n{raw}")]
    Format { message: String, raw: String },

    /// Missing or inconsistent configuration (files, env vars, field ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data failed validation; one message per offending item.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// A storyboard or annotation lookup found no matching entry.
    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
