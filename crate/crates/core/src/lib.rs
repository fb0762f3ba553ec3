//! Audio-visual self-supervised representation learning at desk scale.
//!
//! The crate combines a nearest-neighbour augmented contrastive objective
//! over video and audio embeddings with temporal pretext tasks (playback
//! speed, direction and clip ordering), trained on a synthetic paired
//! audio-video corpus and evaluated with class retrieval, linear probes and
//! manipulation-robust fingerprint retrieval.

pub mod augment;
pub mod container;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
