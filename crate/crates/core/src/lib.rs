//! Region ensemble networks for 3D hand pose estimation from depth images.
//!
//! Everything runs on the CPU with a small reverse-mode autodiff engine:
//! [`graph`] and [`kernels`] for the math, [`preprocess`] and [`data`] for
//! frames and samples, [`model`] for the network variants, [`train`] and
//! [`eval`] for fitting and scoring.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamSet};
pub use tensor::{Real, Tensor};
