//! Self-supervised surface representation learning over multi-temporal
//! aligned imagery: a deterministic texture-refinement stack, a small
//! convolutional encoder, residual cluster encoding, contrastive
//! pre-training, and downstream unsupervised change detection and visual
//! word maps.

pub mod accept;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod tern;
pub mod error;
pub mod export;
pub mod model;
pub mod num;
pub mod resenc;
pub mod rng;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
