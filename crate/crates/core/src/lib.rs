//! # tiue-core
//!
//! A desk-scale, CPU-only diffusion laboratory built around a
//! time-independent shared-encoder UNet. The encoder runs once at a key
//! timestep, its features are cached, and the decoder runs at several
//! timesteps whose noise predictions are combined in closed form into the
//! final sample. Because the decoder passes do not depend on each other
//! they can execute in parallel, turning multi-step sampling into a
//! single pass.
//!
//! The crate ships everything needed to study that design end to end:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff plus Adam/EMA;
//! * [`schedule`] — the discrete noise schedule, the deterministic DDIM
//!   update, and the loop-free coefficient algebra;
//! * [`unet`] — the epsilon-prediction UNet with an explicit
//!   encoder/decoder boundary and encoder feature caching;
//! * [`sampler`] — iterated DDIM, sequential and parallel loop-free
//!   samplers, and condition interpolation;
//! * [`distill`] — teacher pretraining, LoRA, classifier-free guidance,
//!   variational score distillation with a KL noise regularizer, and the
//!   alternating student/LoRA training loop;
//! * [`data`] — a procedural shape/color toy dataset with deterministic
//!   condition embeddings;
//! * [`metrics`] — Fréchet-distance proxy, precision/recall,
//!   density/coverage, and noise normality statistics;
//! * [`analysis`] — feature-similarity traces and quality-vs-steps
//!   curves.
//!
//! Everything is deterministic given seeds: parallel and sequential
//! sampling produce bit-identical outputs.

pub mod analysis;
pub mod data;
pub mod distill;
mod error;
pub mod metrics;
pub mod ppm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
