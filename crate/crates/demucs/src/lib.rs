//! Waveform-domain music source separation toolkit.
//!
//! The crate separates a stereo music mixture into four stems (drums, bass,
//! other, vocals) with a convolutional encoder / BiLSTM / convolutional
//! decoder network trained directly on waveforms, and ships everything needed
//! to exercise the pipeline end to end on synthetic audio:
//!
//! - [`audio`] — WAV I/O, polyphase resampling, the on-disk track layout and
//!   a deterministic synthetic corpus generator.
//! - [`tensor`] — a minimal N-d tensor with reverse-mode differentiation,
//!   hand-rolled convolution/LSTM kernels and their gradients, Adam, and the
//!   weight-rescaling initialization trick.
//! - [`model`] — the separator network itself.
//! - [`metrics`] — SDR/SIR/SAR via orthogonal projections, plus relative
//!   volume and silence predicates.
//! - [`detector`] — scattering-transform front end and the per-window
//!   silent-source classifier.
//! - [`extract`] — probability-threshold calibration and harvesting of
//!   silent-source excerpts from unlabeled audio.
//! - [`train`] — the supervised training loop, data augmentations, and the
//!   unlabeled-data remixing step.
//!
//! Compute kernels are data-parallel with rayon by default; building with
//! `--no-default-features` selects the sequential fallbacks. Both paths use
//! the same per-element arithmetic order, so results are identical.

pub mod audio;
pub mod detector;
pub mod extract;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;
pub mod train;

pub use audio::{SourceSet, Waveform, SOURCE_NAMES};

