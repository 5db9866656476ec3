//! Differentiable architecture compression.
//!
//! A trained network is relaxed layer by layer into convex mixtures of the
//! original layer and cheaper candidates. Mixture weights and candidate
//! weights are trained jointly under a growing cost penalty, with the
//! mixture weights kept on the probability simplex by a clamp-and-rescale
//! projection that zeroes out candidates. Blocks of training alternate with
//! pruning until the model fits a cost budget.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the command line tool.

// `!(x > 0.0)` is used on purpose so that NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod candidates;
pub mod cost;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod simplex;
pub mod tensor;
pub mod theory;

pub use candidates::{CandidateKind, CandidateParams, Dims};
pub use cost::{CostKind, CostVector, Norm};
pub use engine::{DarcSchedule, MixtureLayer, Snapshot};
pub use error::{DarcError, Result};
pub use model::{Layer, Model};
pub use scalar::Scalar;
pub use simplex::AlphaVector;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Dataset64 = harness::Dataset<f64>;
/// Hypothesis class with exact rational values.
pub type RationalClass = theory::FiniteClass<num_rational::Rational64>;
