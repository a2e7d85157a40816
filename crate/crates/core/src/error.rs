//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by simulation, inversion, flow, and I/O code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameters caught before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    /// Time step violates the CFL stability bound.
    #[error("CFL violation: dt={dt:.3e} s exceeds stable maximum {max_dt:.3e} s")]
    CflViolation { dt: f64, max_dt: f64 },

    /// The wavefield became non-finite during time stepping.
    #[error("numerical instability: non-finite wavefield at time step {step}")]
    Instability { step: usize },

    /// Array shape does not match what the operation requires.
    #[error("shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: String, found: String },

    /// Forward-field history would exceed the configured memory cap.
    #[error("wavefield history needs {bytes} bytes, above the cap of {cap} bytes")]
    HistoryTooLarge { bytes: usize, cap: usize },

    /// Grid too small for the requested phantom geometry.
    #[error("grid {nx}x{ny} is too small: need at least {min}x{min}")]
    GridTooSmall { nx: usize, ny: usize, min: usize },

    /// Clustering input has fewer distinct values than clusters.
    #[error("degenerate clustering input: {distinct} distinct values for k={k}")]
    DegenerateInput { distinct: usize, k: usize },

    /// A flow layer produced a non-finite value.
    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    /// Non-finite training loss, with the offending sample index.
    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },

    /// File does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    /// File ends before the declared payload is complete.
    #[error("truncated file: expected {expected} bytes of payload, found {found}")]
    Truncated { expected: usize, found: usize },

    /// Declared dimensions overflow or are inconsistent.
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    /// Calibration received no cells to bin.
    #[error("empty cell pool for calibration")]
    EmptyPool,

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Failure attributed to one dataset pair.
    #[error("dataset pair {pair}: {source}")]
    Pair {
        pair: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the dataset pair index it occurred in.
    pub fn for_pair(self, pair: usize) -> Error {
        Error::Pair {
            pair,
            source: Box::new(self),
        }
    }
}
