//! Noise-adaptive MMD gradient flows for particle-based generative sampling.
//!
//! The crate trains a noise-conditional MMD discriminator on diffusion-corrupted
//! data (no adversarial generator) and then generates samples by following the
//! gradient of the empirical witness function across a descending schedule of
//! noise levels. Closed-form Gaussian quantities make every estimator and
//! gradient independently checkable.
//!
//! Main pieces:
//! - [`nn`]: small MLP feature networks with exact reverse-mode gradients,
//!   sinusoidal time embedding, and Adam.
//! - [`graph`]: an eager expression tape over feature networks that supports
//!   one level of nested differentiation (gradients of witness gradients),
//!   used by all training losses.
//! - [`kernels`] / [`mmd`]: base kernels, composed neural kernels, unbiased
//!   MMD^2, witness function, penalties, and the O(N) linear-kernel path.
//! - [`gaussian`]: closed-form Gaussian MMD quantities and the adaptive
//!   bandwidth formula, plus a mean-space flow simulator.
//! - [`diffusion`]: the variance-preserving forward process on a discrete
//!   schedule table.
//! - [`training`] / [`sampling`]: the discriminator training loop (MMD and
//!   KALE objectives) and the flow samplers (exact, approximate, KALE).
//! - [`data`]: 2-D datasets, the evaluation metric, and baseline flows.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gaussian;
pub mod graph;
pub mod kernels;
pub mod mmd;
pub mod nn;
pub mod particles;
pub mod sampling;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use particles::Particles;
