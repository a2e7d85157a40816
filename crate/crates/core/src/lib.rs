//! Transcranial ultrasound tomography toolkit: acoustic wave simulation,
//! physics-informed data summaries, full-waveform inversion, conditional
//! normalizing flows for posterior sampling, synthetic phantom generation,
//! and uncertainty diagnostics.
//!
//! Everything is deterministic given explicit seeds: pseudo-random state
//! comes from counter-derived ChaCha streams and reductions run in fixed
//! order, so outputs are bitwise reproducible across runs and worker
//! counts.

pub mod config;
pub mod error;
pub mod flow;
pub mod grid;
pub mod inversion;
pub mod io;
pub mod phantom;
pub mod seeds;
pub mod uq;
pub mod wavesim;

pub use error::{Error, Result};
