//! Population and service rate surfaces.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AccessError, Year};
use crate::scalar::Scalar;

/// A point of a spatial point process with an optional mass (default 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WeightedPoint<T> {
    pub at: [T; 2],
    pub weight: T,
}

impl<T: Scalar> WeightedPoint<T> {
    pub fn unit(at: [T; 2]) -> Self {
        Self { at, weight: T::one() }
    }
}

/// Isotropic Gaussian kernel intensity at `at`, scaled by the point masses.
fn kernel_sum<T: Scalar>(points: &[WeightedPoint<T>], at: &[T; 2], bandwidth: T) -> T {
    let two_h2 = T::lit(2.0) * bandwidth * bandwidth;
    let norm = T::one() / (T::pi() * two_h2);
    let mut acc = T::zero();
    for p in points {
        let dx = at[0] - p.at[0];
        let dy = at[1] - p.at[1];
        acc += p.weight * (-(dx * dx + dy * dy) / two_h2).exp();
    }
    acc * norm
}

/// Gaussian kernel smoothing of a weighted point pattern, evaluated on
/// `grid`. The surface integrates to the total weight over the plane.
pub fn smooth_rate<T: Scalar>(
    points: &[WeightedPoint<T>],
    grid: &[[T; 2]],
    bandwidth: T,
) -> Result<Vec<T>, AccessError> {
    if points.is_empty() {
        return Err(AccessError::EmptyInput("point pattern"));
    }
    if !(bandwidth > T::zero()) || !bandwidth.is_finite() {
        return Err(AccessError::InvalidBandwidth(bandwidth.as_f64()));
    }
    Ok(grid.par_iter().map(|g| kernel_sum(points, g, bandwidth)).collect())
}

/// Silverman's reference bandwidth for a bivariate Gaussian kernel,
/// `sigma * n^(-1/6)` with `sigma` the root mean of the two coordinate
/// variances.
pub fn silverman_bandwidth<T: Scalar>(points: &[WeightedPoint<T>]) -> Result<T, AccessError> {
    let n = points.len();
    if n < 2 {
        return Err(AccessError::EmptyInput("bandwidth needs at least two points"));
    }
    let nf = T::from_count(n);
    let mean = |k: usize| points.iter().fold(T::zero(), |a, p| a + p.at[k]) / nf;
    let var =
        |k: usize, m: T| points.iter().fold(T::zero(), |a, p| a + (p.at[k] - m) * (p.at[k] - m)) / (nf - T::one());
    let (mx, my) = (mean(0), mean(1));
    let sigma = ((var(0, mx) + var(1, my)) * T::lit(0.5)).sqrt();
    if !(sigma > T::zero()) {
        return Err(AccessError::InvalidBandwidth(0.0));
    }
    Ok(sigma * nf.powf(T::lit(-1.0 / 6.0)))
}

/// Rate values on a regular grid, bilinearly interpolated; queries outside
/// the extent take the value of the nearest edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Raster<T> {
    pub origin: [T; 2],
    pub spacing: [T; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major by y then x: `values[iy * nx + ix]`.
    pub values: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(origin: [T; 2], spacing: [T; 2], nx: usize, ny: usize, values: Vec<T>) -> Result<Self, AccessError> {
        if nx == 0 || ny == 0 || values.len() != nx * ny {
            return Err(AccessError::InvalidRaster(format!(
                "{} values for a {nx}x{ny} grid",
                values.len()
            )));
        }
        if (nx > 1 && !(spacing[0] > T::zero())) || (ny > 1 && !(spacing[1] > T::zero())) {
            return Err(AccessError::InvalidRaster("non-positive spacing".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(AccessError::InvalidRaster(
                "rates must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            origin,
            spacing,
            nx,
            ny,
            values,
        })
    }

    fn axis(pos: T, origin: T, step: T, n: usize) -> (usize, usize, T) {
        if n == 1 {
            return (0, 0, T::zero());
        }
        let f = ((pos - origin) / step).max(T::zero()).min(T::from_count(n - 1));
        let i0 = f.floor().as_f64() as usize;
        let i0 = i0.min(n - 2);
        (i0, i0 + 1, f - T::from_count(i0))
    }

    pub fn sample(&self, at: &[T; 2]) -> T {
        let (x0, x1, fx) = Self::axis(at[0], self.origin[0], self.spacing[0], self.nx);
        let (y0, y1, fy) = Self::axis(at[1], self.origin[1], self.spacing[1], self.ny);
        let v = |ix: usize, iy: usize| self.values[iy * self.nx + ix];
        let one = T::one();
        let bottom = v(x0, y0) * (one - fx) + v(x1, y0) * fx;
        let top = v(x0, y1) * (one - fx) + v(x1, y1) * fx;
        bottom * (one - fy) + top * fy
    }
}

/// Where a rate value at `(point, year)` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum RateSurface<T> {
    /// Same value everywhere and every year.
    Constant(T),
    /// One raster per year.
    Raster(Vec<(Year, Raster<T>)>),
    /// Raw point pattern per year, smoothed on demand. `None` bandwidth uses
    /// Silverman's rule on that year's points.
    Kernel {
        points: Vec<(Year, Vec<WeightedPoint<T>>)>,
        bandwidth: Option<T>,
    },
}

impl<T: Scalar> RateSurface<T> {
    pub fn rate(&self, at: &[T; 2], year: Year) -> Result<T, AccessError> {
        match self {
            RateSurface::Constant(v) => Ok(*v),
            RateSurface::Raster(by_year) => by_year
                .iter()
                .find(|(y, _)| *y == year)
                .map(|(_, r)| r.sample(at))
                .ok_or(AccessError::MissingRateYear(year)),
            RateSurface::Kernel { points, bandwidth } => {
                let pts = points
                    .iter()
                    .find(|(y, _)| *y == year)
                    .map(|(_, p)| p)
                    .ok_or(AccessError::MissingRateYear(year))?;
                if pts.is_empty() {
                    return Err(AccessError::EmptyInput("point pattern"));
                }
                let h = match bandwidth {
                    Some(h) => *h,
                    None => silverman_bandwidth(pts)?,
                };
                if !(h > T::zero()) {
                    return Err(AccessError::InvalidBandwidth(h.as_f64()));
                }
                Ok(kernel_sum(pts, at, h))
            }
        }
    }
}

/// Population and service rates; the utilization weight is their ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RateField<T> {
    pub population: RateSurface<T>,
    pub service: RateSurface<T>,
}
