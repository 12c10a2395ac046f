//! Minimal dense linear algebra and reverse-mode autodiff.

mod adam;
mod graph;
mod matrix;
mod params;

pub use adam::{Adam, GradAccumulator};
pub use graph::{sigmoid, AttnBlock, Grads, Graph, Var, PROB_CLAMP};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};

#[cfg(test)]
mod gradcheck;
