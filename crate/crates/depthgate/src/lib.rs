//! depthgate: a desk-scale lab for conditional-depth transformers.
//!
//! The model keeps its last `C` decoder layers "controlled": each one carries
//! a full FFN branch and a cheap low-rank branch, and a per-token controller
//! decides which branch executes under an exact top-k budget with a
//! straight-through gradient. Controllers are either a plain MLP scorer (G1)
//! or a JEPA-guided scorer (G3) whose predictor is trained to anticipate the
//! latent outcome of each branch. An oracle produces counterfactual utility
//! labels by forking each controlled layer and measuring the windowed
//! cross-entropy difference between branches.
//!
//! Everything runs on a hand-rolled reverse-mode tape over row-major
//! tensors, generic over f32 (training) and f64 (tests, gradient checks).

pub mod checkpoint;
pub mod controller;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gating;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use tensor::{Scalar, Tensor};
