//! Desk-scale active-noise-control laboratory.
//!
//! The crate implements a complete generative fixed-filter ANC (GFANC)
//! pipeline and its baselines:
//!
//! * [`signal`] — waveform/filter types, FIR filtering, DFT/IDFT, acoustic
//!   path design, synthetic noise, NR metric, STFT.
//! * [`filterbank`] — perfect-reconstruction decomposition of a broadband
//!   control filter into sub-band filters via spectral masking.
//! * [`adaptive`] — filtered-reference LMS: control-filter pretraining, the
//!   runtime FxLMS baseline, and the adaptive labelling mechanism that turns
//!   noise frames into binary sub-band labels.
//! * [`dataset`] — synthesis of the labelled noise corpus.
//! * [`cnn`] — a small from-scratch 1D CNN that predicts the binary
//!   combination weights from a raw noise frame.
//! * [`engine`] — end-to-end controllers (GFANC frame loop, SFANC-style
//!   selection, FxLMS) and head-to-head comparison.
//! * [`io`] — WAV / raw-f32 / CSV interchange.
//!
//! Everything is deterministic under a fixed seed; see [`rng`].

pub mod adaptive;
pub mod cnn;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod fft;
pub mod filterbank;
pub mod io;
pub(crate) mod linalg;
pub mod rng;
pub mod signal;

pub use error::{Error, Result};
