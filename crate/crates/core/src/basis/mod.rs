//! Knot layouts, radial kernels and design assembly.

pub mod design;
pub mod kernels;
pub mod knots;

use thiserror::Error;

pub use design::{assemble_design, assemble_design_with, BlockKind, DesignMatrices, RandomBlock};
pub use kernels::{spatial_kernel, temporal_kernel, BasisConfig, MaternSmoothness, SpatialKernel, TemporalKernel};
pub use knots::{
    coverage_radius, default_separation, select_spatial_knots, select_temporal_knots, separate_knots, KnotFamily,
    KnotLayout, Separation,
};

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),
    #[error("need {needed} distinct values but only {available} are available")]
    InsufficientDistinct { needed: usize, available: usize },
    #[error("knot families violate the separation requirement ({} temporal, {} spatial pairs)", .0.temporal.len(), .0.spatial.len())]
    Identifiability(Separation),
    #[error("separation infeasible: {0}")]
    InfeasibleSeparation(String),
    #[error("malformed knot document: {0}")]
    Format(String),
    #[error("unsupported document version {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no observed responses")]
    NoObservations,
    #[error("design contains non-finite entries")]
    NonFinite,
}
