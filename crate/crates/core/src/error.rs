use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a numeric precondition (negative intensity, channel
    /// outside [0,1], ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Too few samples or too few distinct abscissae for a fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Mesh is open, degenerate, or otherwise not a closed oriented surface.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed text input.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Could not place an item / object within the allowed area.
    #[error("placement error: {0}")]
    Placement(String),

    /// The attack region cannot host even one object footprint.
    #[error("region error: {0}")]
    Region(String),

    /// A supplied location violates a region constraint.
    #[error("constraint error: {0}")]
    Constraint(String),

    /// The detector handle lacks a required capability (e.g. input gradients).
    #[error("capability error: {0}")]
    Capability(String),

    /// A referenced file is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    /// Manifest or dataset failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// Optimization produced non-finite values and could not recover.
    #[error("diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
