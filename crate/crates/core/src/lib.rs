//! Diffusion models with bidirectional selective state-space blocks.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] – dense `f64` tensors, the seeded RNG, activations and the
//!   finite-difference gradient oracle.
//! * [`ssm`] – zero-order-hold discretization, the selective scan and its
//!   adjoint, and the time-invariant convolution kernel.
//! * [`block`] – the bidirectional block (adaptive norm, gated forward and
//!   reversed scans, residual).
//! * [`patchify`] – image/video latents to token sequences and back.
//! * [`model`] – the full noise-prediction network and the S/B/L/XL ladder.
//! * [`diffusion`] – DDPM schedule, training loss, ancestral sampler with
//!   classifier-free guidance, EMA.
//! * [`efficiency`] – analytic operation counts and a shape-driven walker.
//! * [`train`] – configuration, datasets, optimizer, checkpoints and the
//!   command implementations used by the `dim` binary.
//! * [`verify`] – the self-check suite behind `dim check`.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod block;
pub mod diffusion;
pub mod efficiency;
mod error;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod patchify;
pub mod ssm;
pub mod train;
pub mod verify;

pub use error::{DimError, Result};
pub use numerics::{Rng, Tensor};
