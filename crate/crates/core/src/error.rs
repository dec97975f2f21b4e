use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("buffer of length {len} cannot hold a {rows}x{cols} matrix")]
    BufferLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("SVD did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("rank {rank} is invalid for a {rows}x{cols} matrix (need 1 <= rank <= {max})")]
    Rank {
        rank: usize,
        rows: usize,
        cols: usize,
        max: usize,
    },

    #[error(
        "gradient-aligned reconstruction needs 2r <= min(rows, cols): r = {rank}, \
         matrix is {rows}x{cols}; use rank <= {max}"
    )]
    GradientAlignedRank {
        rank: usize,
        rows: usize,
        cols: usize,
        max: usize,
    },

    #[error("layer index {index} out of range ({layers} layers)")]
    LayerIndex { index: usize, layers: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("verification: {0}")]
    Verification(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
