//! Lyapunov-stabilized deep equilibrium classifiers.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`graph`], [`gradcheck`]: dense `f64` arrays, a tape-based
//!   reverse-mode differentiator (with second-order support) and the
//!   finite-difference oracle used to test it.
//! * [`layers`]: linear maps, normalization, the input-convex network behind
//!   the Lyapunov function, and the Householder-parametrized semi-orthogonal
//!   output layer.
//! * [`fixedpoint`]: Picard and Anderson solvers and the linear solve used by
//!   implicit differentiation.
//! * [`deq`]: the implicit layer, its equilibrium forward pass and its
//!   implicit backward pass.
//! * [`lyapunov`]: the stability projection and the stabilized output state.
//! * [`model`]: the four classifier variants assembled from the above.
//! * [`attacks`], [`optim`], [`train`], [`data`], [`checkpoint`]: white-box
//!   attacks, Adam with cosine annealing, training loops, MNIST/synthetic
//!   data and the binary parameter container.
//! * [`experiment`], [`invariants`]: run configuration, the result-row grid
//!   and the post-training structural checks shared by the CLI and tests.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod deq;
pub mod error;
pub mod experiment;
pub mod fixedpoint;
pub mod gradcheck;
pub mod layers;
pub mod lyapunov;
pub mod model;
pub mod optim;
pub mod graph;
pub mod invariants;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
