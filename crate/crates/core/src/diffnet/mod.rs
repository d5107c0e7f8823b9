//! Minimal reverse-mode neural networks.
//!
//! A [`Network`] is a fixed pipeline of layers (dense, strided conv, flatten,
//! reshape, nearest-neighbour upsampling), each optionally followed by layer
//! normalisation and an activation, in that order. [`Network::forward_tape`]
//! records the intermediate values needed for [`Network::backward`], which
//! accumulates parameter gradients into a [`GradStore`] and returns the
//! gradient with respect to the input.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod check;
mod checkpoint;
mod network;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use network::{Activation, GradStore, LayerKind, LayerSpec, Network, NetworkSpec, Tape};
pub use optim::{Adam, Sgd};
pub use tensor::{ParamTensor, Tensor};

use rand::Rng;

/// Scalar type for network parameters and activations.
pub trait Real:
    num_traits::Float + Send + Sync + Default + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Draws from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draws uniformly from `[-bound, bound)`.
    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }

    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self {
        (rng.gen::<f32>() * 2.0 - 1.0) * bound
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }

    fn uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self {
        (rng.gen::<f64>() * 2.0 - 1.0) * bound
    }
}
