//! Domain-adversarial surgical caption generation on a small reverse-mode
//! autodiff core: memory-augmented meshed transformer, gradient-reversal
//! domain head, label-smoothed losses, beam search, caption and calibration
//! metrics, a synthetic two-domain generator and the training protocols.

pub mod calibration;
pub mod caption_metrics;
pub mod data;
pub mod decoding;
pub mod domain_head;
pub mod error;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
