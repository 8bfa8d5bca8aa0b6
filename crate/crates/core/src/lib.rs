//! A desk-scale laboratory for entropic optimal-transport attention and
//! attention-perturbation guidance of a toy diffusion model.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major `f64` tensors, a seeded counter-based RNG,
//!   and a Wengert-tape reverse-mode autodiff over a small primitive set;
//! - [`sinkhorn`]: the log-domain Sinkhorn solver for entropic optimal
//!   transport, with convergence diagnostics and entropy helpers;
//! - [`attention`]: softmax attention and its transport-backed and degraded
//!   replacements (similarity / adversarial Sinkhorn, identity, blurred,
//!   uniform);
//! - [`diffusion`]: linear noise schedules, the forward process, and the
//!   deterministic DDIM update;
//! - [`denoiser`]: a tiny class-conditional transformer over 2-D point sets
//!   whose attention layers can be swapped per call;
//! - [`guidance`]: CFG and weakened-prediction guidance, guided sampling, and
//!   scale sweeps;
//! - [`data`] and [`metrics`]: synthetic datasets and the evaluation suite.

pub mod attention;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod sinkhorn;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tensor::{Rng, Tensor};
