//! Response and covariates observed on a locations × times grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PanelError {
    #[error("panel needs at least one location, one time and one predictor")]
    Empty,
    #[error("{what} has {got} cells, expected {expected}")]
    Dimension { what: String, got: usize, expected: usize },
    #[error("covariate {predictor} is not finite at cell {cell}")]
    NonFiniteCovariate { predictor: usize, cell: usize },
    #[error("times must be strictly increasing")]
    UnorderedTimes,
}

/// Observed data on an `S × T` grid.
///
/// Cells are stored time-major: the cell for time `i` and location `j` has
/// index `i * S + j`. A missing response is `None`; such rows are dropped
/// when the design is assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SpaceTimePanel<T> {
    pub location_ids: Vec<String>,
    pub locations: Vec<[T; 2]>,
    pub times: Vec<T>,
    pub response: Vec<Option<T>>,
    /// One vector of `S * T` values per predictor.
    pub covariates: Vec<Vec<T>>,
}

impl<T: Scalar> SpaceTimePanel<T> {
    pub fn new(
        location_ids: Vec<String>,
        locations: Vec<[T; 2]>,
        times: Vec<T>,
        response: Vec<Option<T>>,
        covariates: Vec<Vec<T>>,
    ) -> Result<Self, PanelError> {
        let s = locations.len();
        let t = times.len();
        if s == 0 || t == 0 || covariates.is_empty() {
            return Err(PanelError::Empty);
        }
        if location_ids.len() != s {
            return Err(PanelError::Dimension {
                what: "location ids".into(),
                got: location_ids.len(),
                expected: s,
            });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PanelError::UnorderedTimes);
        }
        let cells = s * t;
        if response.len() != cells {
            return Err(PanelError::Dimension {
                what: "response".into(),
                got: response.len(),
                expected: cells,
            });
        }
        for (r, cov) in covariates.iter().enumerate() {
            if cov.len() != cells {
                return Err(PanelError::Dimension {
                    what: format!("covariate {r}"),
                    got: cov.len(),
                    expected: cells,
                });
            }
            if let Some(cell) = cov.iter().position(|v| !v.is_finite()) {
                return Err(PanelError::NonFiniteCovariate { predictor: r, cell });
            }
        }
        Ok(Self {
            location_ids,
            locations,
            times,
            response,
            covariates,
        })
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_cells(&self) -> usize {
        self.n_locations() * self.n_times()
    }

    #[inline]
    pub fn cell(&self, time: usize, location: usize) -> usize {
        time * self.n_locations() + location
    }

    /// `(time index, location index)` of a cell.
    #[inline]
    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.n_locations(), cell % self.n_locations())
    }

    /// Cells whose response is observed and finite, in cell order.
    pub fn observed_cells(&self) -> Vec<usize> {
        self.response
            .iter()
            .enumerate()
            .filter(|(_, y)| matches!(y, Some(v) if v.is_finite()))
            .map(|(i, _)| i)
            .collect()
    }
}
