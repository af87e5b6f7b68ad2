//! Automatic gaze-zone labelling from speech-marked recording sessions.
//!
//! A subject looks at each of nine in-car zones in turn and says the zone's
//! number aloud. This crate turns the recording into per-frame zone labels:
//! transcript keywords are aligned to the expected ascending sequence
//! ([`annotate`]), zones the transcriber missed are recovered from voiced
//! audio segments ([`audio`]), labels around gaze transitions are refined by
//! clustering frame embeddings ([`refine`]), and [`eval`] scores the result.
//! [`synth`] generates sessions with known ground truth for every stage, and
//! [`illum`] evaluates the skin chromaticity model behind the
//! illumination-robust kernel initialisation.

pub mod annotate;
pub mod audio;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod illum;
pub mod pipeline;
pub mod refine;
pub mod sessions;
pub mod stt;
pub mod synth;

pub use error::{Error, Result};
