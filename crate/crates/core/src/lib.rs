//! Dysarthric speech reconstruction at desk scale.
//!
//! The pipeline turns slow, noisy, prosodically flattened speech back into
//! intelligible speech in the same voice:
//!
//! 1. [`synth`] generates a deterministic multi-speaker corpus of normal
//!    utterances and dysarthric corruptions (no external data).
//! 2. [`codec`] trains a residual-vector-quantized codec mapping waveforms to
//!    T x 8 code matrices and back.
//! 3. [`content`] trains a multi-modal (audio + lip trajectory) phoneme
//!    recognizer whose per-frame posteriors are the content representation.
//! 4. [`sv`] trains a GE2E speaker embedder over code matrices; [`codecset`]
//!    builds the normal-speech retrieval database and swaps each dysarthric
//!    code matrix for its nearest normal neighbor.
//! 5. [`lm`] generates first-quantizer codes autoregressively from phoneme
//!    posteriors plus the retrieved prompt, then fills quantizers 2-8
//!    non-autoregressively; the codec decoder renders the waveform.
//! 6. [`eval`] and [`experiment`] score speaker similarity, intelligibility,
//!    and prosody, and drive the staged, resumable end-to-end run.

pub mod audio;
pub mod codec;
pub mod codecset;
pub mod config;
pub mod content;
pub mod container;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod lm;
pub mod par;
pub mod phonemes;
pub mod reconstruct;
pub mod seeds;
pub mod sv;
pub mod synth;

pub use error::{Error, Result};
