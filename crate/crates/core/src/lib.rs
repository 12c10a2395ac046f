//! RecipeCrit: a hierarchical denoising recipe auto-encoder with an
//! unsupervised gradient-based latent critiquing procedure.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`]: recipes, vocabularies, tokenisation, noise and sampling,
//!   plus a synthetic grammar-driven corpus generator.
//! * [`tensor`]: a small reverse-mode autodiff engine over dense `f64`
//!   matrices.
//! * [`model`]: the recipe encoder, ingredient set predictor and
//!   instruction decoder, their losses and checkpoints.
//! * [`training`]: the two-stage denoising training loop.
//! * [`critique`]: latent critiquing and the recipe-editing pipelines.
//! * [`eval`]: metrics and experiment harnesses.

pub mod corpus;
pub mod critique;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
