//! Preterm EEG seizure detection.
//!
//! The crate covers the full pipeline: record I/O, preprocessing to 32 Hz
//! windows, a fully convolutional detector with hand-written
//! backpropagation, training with optional layer-wise adaptive rate scaling
//! and gestational-age sample weighting, classifier fusion, epoch- and
//! event-based evaluation, and a synthetic cohort generator for exercising
//! all of it without clinical data.

pub mod dsp;
pub mod eeg_io;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod net;
pub mod synth;
pub mod train;

pub use error::{Result, SdaError};
