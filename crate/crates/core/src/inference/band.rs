//! Simultaneous confidence bands from the max-modulus of a Gaussian process.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::linalg::psd_factor;
use crate::mixedmodel::{FittedModel, Part};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;

pub const DEFAULT_DRAWS: usize = 10_000;
pub const MIN_DRAWS: usize = 1_000;

/// Evaluation points of a band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "points", rename_all = "snake_case")]
pub enum BandGrid {
    Times(Vec<f64>),
    Locations(Vec<[f64; 2]>),
    SpaceTime(Vec<(f64, [f64; 2])>),
}

impl BandGrid {
    pub fn len(&self) -> usize {
        match self {
            BandGrid::Times(v) => v.len(),
            BandGrid::Locations(v) => v.len(),
            BandGrid::SpaceTime(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(t, s)` pairs; the unused coordinate is zero.
    pub fn points<T: Scalar>(&self) -> Vec<(T, [T; 2])> {
        let z = T::zero();
        match self {
            BandGrid::Times(v) => v.iter().map(|t| (T::lit(*t), [z, z])).collect(),
            BandGrid::Locations(v) => v.iter().map(|s| (z, [T::lit(s[0]), T::lit(s[1])])).collect(),
            BandGrid::SpaceTime(v) => v
                .iter()
                .map(|(t, s)| (T::lit(*t), [T::lit(s[0]), T::lit(s[1])]))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub predictor: usize,
    pub part: Part,
    pub grid: BandGrid,
    pub center: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub se: Vec<f64>,
    /// Coverage level `1 − γ`.
    pub level: f64,
    pub critical_value: f64,
    pub n_draws: usize,
    pub seed: u64,
}

impl ConfidenceBand {
    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.center.len()
            && values
                .iter()
                .enumerate()
                .all(|(g, v)| self.lower[g] <= *v && *v <= self.upper[g])
    }

    pub fn width(&self) -> Vec<f64> {
        self.upper.iter().zip(&self.lower).map(|(u, l)| u - l).collect()
    }
}

pub fn check_gamma(gamma: f64) -> Result<(), InferenceError> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(InferenceError::InvalidLevel(gamma))
    }
}

/// Simulated `max_g |Z_g| / se_g` for `Z ~ N(0, Σ)`, sorted ascending.
///
/// Draw `i` uses its own stream, so the result does not depend on the
/// number of worker threads.
pub fn max_modulus_draws<T: Scalar>(cov: &DMatrix<T>, n_draws: usize, seed: u64) -> Result<Vec<f64>, InferenceError> {
    let se: Vec<f64> = (0..cov.nrows()).map(|g| cov[(g, g)].as_f64().sqrt()).collect();
    if se.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(InferenceError::SingularCovariance);
    }
    let f = psd_factor(cov).ok_or(InferenceError::SingularCovariance)?;
    let f: DMatrix<f64> = f.map(|v| v.as_f64());
    let k = f.ncols();
    let mut stats: Vec<f64> = (0..n_draws)
        .into_par_iter()
        .map_init(
            || (DVector::<f64>::zeros(k), DVector::<f64>::zeros(se.len())),
            |(xi, z), i| {
                let mut rng = stream(seed, Domain::BandDraws, i as u64);
                for v in xi.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                z.gemv(1.0, &f, xi, 0.0);
                z.iter().zip(&se).fold(0.0f64, |m, (v, s)| m.max(v.abs() / s))
            },
        )
        .collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(stats)
}

/// Empirical `1 − γ` quantile of sorted draws (order statistic `⌈(1−γ)n⌉`).
pub fn critical_value(sorted: &[f64], gamma: f64) -> f64 {
    let n = sorted.len();
    let idx = (((1.0 - gamma) * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Center, lower, upper, standard error and critical value of a band.
pub type BandParts = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, f64);

/// Band `center ± c·se` for an estimate with covariance `cov`.
pub fn band_from_moments<T: Scalar>(
    center: &DVector<T>,
    cov: &DMatrix<T>,
    gamma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<BandParts, InferenceError> {
    check_gamma(gamma)?;
    if n_draws < MIN_DRAWS {
        return Err(InferenceError::TooFewDraws {
            got: n_draws,
            min: MIN_DRAWS,
        });
    }
    let stats = max_modulus_draws(cov, n_draws, seed)?;
    let c = critical_value(&stats, gamma);
    let mid: Vec<f64> = center.iter().map(|v| v.as_f64()).collect();
    let se: Vec<f64> = (0..cov.nrows()).map(|g| cov[(g, g)].as_f64().sqrt()).collect();
    let lower = mid.iter().zip(&se).map(|(m, s)| m - c * s).collect();
    let upper = mid.iter().zip(&se).map(|(m, s)| m + c * s).collect();
    Ok((mid, lower, upper, se, c))
}

/// Simultaneous band for part `part` of coefficient `predictor`.
pub fn simultaneous_band<T: Scalar>(
    model: &FittedModel<T>,
    predictor: usize,
    part: Part,
    grid: &BandGrid,
    gamma: f64,
    n_draws: usize,
    seed: u64,
) -> Result<ConfidenceBand, InferenceError> {
    check_gamma(gamma)?;
    check_grid(part, grid)?;
    let pts = grid.points::<T>();
    let a = model.contrast(predictor, part, &pts)?;
    let (center, cov) = model.contrast_moments(predictor, &a);
    let (center, lower, upper, se, c) = band_from_moments(&center, &cov, gamma, n_draws, seed)?;
    Ok(ConfidenceBand {
        predictor,
        part,
        grid: grid.clone(),
        center,
        lower,
        upper,
        se,
        level: 1.0 - gamma,
        critical_value: c,
        n_draws,
        seed,
    })
}

pub fn check_grid(part: Part, grid: &BandGrid) -> Result<(), InferenceError> {
    if grid.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    let ok = matches!(
        (part, grid),
        (Part::Temporal, BandGrid::Times(_))
            | (Part::Spatial, BandGrid::Locations(_))
            | (Part::Full, BandGrid::SpaceTime(_))
    );
    if ok {
        Ok(())
    } else {
        Err(InferenceError::GridMismatch(format!(
            "{part:?} part needs a matching grid"
        )))
    }
}
