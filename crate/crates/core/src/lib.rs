//! Masked trajectory autoencoding for sequential decision making.
//!
//! A transformer is pretrained to reconstruct state–action windows from
//! randomly masked copies, with the mask ratio drawn per sample from a set.
//! The same network then serves goal reaching by inpainting, skill
//! prompting, and (after swapping to causal attention) offline actor-critic
//! finetuning. Baselines and experiment drivers share the same data and
//! evaluation harness.

pub mod ablation;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod downstream;
pub mod env;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod rng;

pub use error::{Error, FormatError, Result};
