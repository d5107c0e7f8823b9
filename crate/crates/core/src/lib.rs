//! Demonstration-guided reinforcement learning from pixel observations.
//!
//! The crate learns sparse-reward control tasks from a handful of demonstrations:
//!
//! 1. [`diffnet`] is a small reverse-mode neural-network library (dense, conv,
//!    layer norm) with Adam/SGD optimisers and bit-exact checkpointing.
//! 2. [`envsim`] provides a pixel-observation point-maze environment together
//!    with a scripted demonstrator.
//! 3. [`demostore`] loads demonstrations and holds them pinned inside a replay
//!    buffer whose sampler guarantees a minimum demonstration fraction.
//! 4. [`latentmodel`] trains a variational encoder plus a locally linear latent
//!    dynamics model and derives an augmentation-invariant distance metric from
//!    the encoder.
//! 5. [`shaping`] turns that metric into an exploration reward by matching
//!    visited states against the demonstrations.
//! 6. [`learner`] is an off-policy actor-critic with image augmentation,
//!    importance sampling of demonstrations, and value-clipped targets.
//! 7. [`harness`] wires everything into `collect-demos` / `train` / `eval` /
//!    `metric-bench` runs driven by a flat JSON config.
//!
//! Batched numeric work goes through [`par`], which keeps results bitwise
//! identical whether or not the `parallel` feature is enabled.

pub mod demostore;
pub mod diffnet;
pub mod envsim;
pub mod harness;
pub mod latentmodel;
pub mod learner;
pub mod par;
pub mod rng;
pub mod shaping;

mod error;

pub use error::{Error, Result};
