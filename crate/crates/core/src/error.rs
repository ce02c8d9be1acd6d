use std::path::PathBuf;

/// Errors surfaced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place {n_bodies} non-overlapping balls of radius {radius} after {retries} retries")]
    InfeasiblePacking {
        n_bodies: usize,
        radius: f64,
        retries: usize,
    },

    #[error("composition plan leaves {} coordinates uncovered (first: {:?})", .uncovered.len(), .uncovered.iter().take(8).collect::<Vec<_>>())]
    CoverageGap { uncovered: Vec<usize> },

    #[error("time windows: (T_total - T_tr) = {span} is not divisible by stride {stride} (residue {residue})")]
    WindowStride {
        span: usize,
        stride: usize,
        residue: usize,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
