//! Space-time varying coefficient regression with low-rank radial penalized
//! splines, fitted through the equivalent linear mixed model.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accessibility;
pub mod basis;
pub mod inference;
pub mod linalg;
pub mod mixedmodel;
pub mod multilevel;
pub mod panel;
pub mod rng;
pub mod scalar;
pub mod simulate;

pub use scalar::Scalar;

/// Double-precision aliases of the generic types.
pub type Panel = panel::SpaceTimePanel<f64>;
pub type Knots = basis::KnotLayout<f64>;
pub type Design = basis::DesignMatrices<f64>;
pub type Model = mixedmodel::FittedModel<f64>;
pub type MultilevelData = multilevel::MultilevelPanel<f64>;
pub type Multilevel = multilevel::MultilevelFit<f64>;
