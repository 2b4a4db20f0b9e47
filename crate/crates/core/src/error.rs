use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(
        "infeasible cycle flow: dissipation time {tau:.3}s outside [0, {green_s:.3}]s \
         for arrival={arrival:.4} veh/s saturation={saturation:.4} veh/s flow={flow:.3} veh"
    )]
    InfeasibleFlow {
        tau: f64,
        green_s: f64,
        arrival: f64,
        saturation: f64,
        flow: f64,
    },

    #[error("inconsistent data: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config hash mismatch: expected {expected}, found {found} in {source_name}")]
    HashMismatch {
        expected: String,
        found: String,
        source_name: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
