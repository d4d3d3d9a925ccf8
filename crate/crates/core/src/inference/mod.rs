//! Simultaneous bands, shape classification, significance maps and the
//! interaction test.

pub mod band;
pub mod io;
pub mod rlrt;
pub mod shape;

use thiserror::Error;

use crate::basis::BasisError;
use crate::mixedmodel::MixedModelError;

pub use band::{
    band_from_moments, critical_value, max_modulus_draws, simultaneous_band, BandGrid, ConfidenceBand, DEFAULT_DRAWS,
    MIN_DRAWS,
};
pub use rlrt::{test_interaction, test_interaction_design, InteractionFits, InteractionTest, InteractionTestOptions};
pub use shape::{classify_shape, significance_map, Shape, ShapeVerdict, Significance, Witness};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("level γ = {0} must lie strictly between 0 and 1")]
    InvalidLevel(f64),
    #[error("{got} draws requested, at least {min} needed")]
    TooFewDraws { got: usize, min: usize },
    #[error("{got} bootstrap replicates requested, at least {min} needed")]
    TooFewBootstrap { got: usize, min: usize },
    #[error("evaluation grid is empty")]
    EmptyGrid,
    #[error("grid does not match the requested part: {0}")]
    GridMismatch(String),
    #[error("covariance of the band contrast is singular")]
    SingularCovariance,
    #[error("shape classification needs a one-dimensional grid or a spatial slice; slice the space-time grid at a fixed time or location")]
    SliceRequired,
    #[error("null model fit failed: {0}")]
    NullFit(MixedModelError),
    #[error(transparent)]
    Model(#[from] MixedModelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
}
