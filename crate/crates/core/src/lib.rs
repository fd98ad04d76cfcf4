//! Generative event pretraining at desk scale.
//!
//! Event streams are accumulated into normalized pseudo-frames, an event
//! encoder is aligned to a frozen image teacher, and a small causal
//! transformer is pretrained on interleaved event/image token sequences.
//! Task heads, losses and evaluation metrics cover recognition,
//! segmentation and depth.

pub mod align;
pub mod blob;
pub mod config;
pub mod encoder;
pub mod error;
pub mod events;
pub mod heads;
pub mod lm;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod seq;
pub mod synth;
pub mod tensor;

pub use error::{GepError, Result};
