//! Reverse-mode automatic differentiation on `ndarray`, sized for the
//! picsynth pipeline: a per-step Wengert tape, NCHW conv kernels, batch norm,
//! Adam, and finite-difference verification helpers.
//!
//! The tape is generic over `f32`/`f64`. Training uses `f32`; gradient-check
//! suites instantiate the identical ops in `f64`.

mod conv;
mod elem;
mod graph;
mod ops;

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod rng;

pub use conv::{conv2d, conv_transpose2d};
pub use elem::Elem;
pub use graph::{Gradients, Graph, Var};
pub use ops::{concat, cross_entropy, stack0, sum_vars};
pub use rng::RandomSource;
