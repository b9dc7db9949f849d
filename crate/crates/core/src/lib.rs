//! Gradient-free fine-tuning of low-rank adapters by evolving their top
//! singular values with CMA-ES.
//!
//! The pipeline: supervised warm-up of LoRA adapters ([`model`]), per-factor
//! SVD ([`lowrank`]), then CMA-ES over singular-value deltas ([`cmaes`]) with
//! candidates scored by [`fitness`] and distributed by [`scheduler`], where
//! workers exchange only seeds and scalar rewards with the coordinator.

pub mod cmaes;
pub mod fitness;
pub(crate) mod codec;
pub mod linalg;
pub mod model;
pub mod lowrank;
pub mod rng;
pub mod scheduler;

pub use codec::DecodeError;
