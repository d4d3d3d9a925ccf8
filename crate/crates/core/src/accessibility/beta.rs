//! Distance-utility exponent by Huber-weighted robust regression of
//! `log W` on `log C`.

use serde::{Deserialize, Serialize};

use super::AccessError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberOptions {
    /// Huber tuning constant in units of the residual scale.
    pub tuning: f64,
    pub max_iter: usize,
    /// Relative change in the coefficients that stops the iteration.
    pub rel_tol: f64,
    /// Weights are clamped below at this value before taking logs.
    pub weight_floor: f64,
}

impl Default for HuberOptions {
    fn default() -> Self {
        Self {
            tuning: 1.345,
            max_iter: 50,
            rel_tol: 1e-10,
            weight_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BetaEstimate<T> {
    pub beta: T,
    pub intercept: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Weighted least squares line `y = a + b x`.
fn wls_line<T: Scalar>(x: &[T], y: &[T], w: &[T]) -> Option<(T, T)> {
    let mut sw = T::zero();
    let mut sx = T::zero();
    let mut sy = T::zero();
    for i in 0..x.len() {
        sw += w[i];
        sx += w[i] * x[i];
        sy += w[i] * y[i];
    }
    if !(sw > T::zero()) {
        return None;
    }
    let mx = sx / sw;
    let my = sy / sw;
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    for i in 0..x.len() {
        let dx = x[i] - mx;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (y[i] - my);
    }
    if !(sxx > T::zero()) {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

fn median<T: Scalar>(v: &mut [T]) -> T {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::lit(0.5)
    }
}

/// Ordinary least-squares version of [`estimate_beta`]; used as a baseline.
pub fn estimate_beta_ols<T: Scalar>(costs: &[T], weights: &[T]) -> Result<T, AccessError> {
    let (x, y) = log_pairs(costs, weights, T::lit(HuberOptions::default().weight_floor))?;
    let ones = vec![T::one(); x.len()];
    let (_, b) = wls_line(&x, &y, &ones).ok_or(AccessError::DegenerateCosts)?;
    Ok(-b)
}

fn log_pairs<T: Scalar>(costs: &[T], weights: &[T], floor: T) -> Result<(Vec<T>, Vec<T>), AccessError> {
    if costs.len() != weights.len() {
        return Err(AccessError::LengthMismatch {
            costs: costs.len(),
            weights: weights.len(),
        });
    }
    if costs.len() < 2 {
        return Err(AccessError::DegenerateCosts);
    }
    if let Some(i) = costs.iter().position(|c| !(*c > T::zero()) || !c.is_finite()) {
        return Err(AccessError::NonPositiveCost { index: i });
    }
    let x: Vec<T> = costs.iter().map(|c| c.ln()).collect();
    let y: Vec<T> = weights.iter().map(|w| w.max(floor).ln()).collect();
    Ok((x, y))
}

/// Estimates `beta` in `W ≈ c · C^(-beta)` by Huber IRLS with a MAD scale.
pub fn estimate_beta<T: Scalar>(
    costs: &[T],
    weights: &[T],
    opts: &HuberOptions,
) -> Result<BetaEstimate<T>, AccessError> {
    let (x, y) = log_pairs(costs, weights, T::lit(opts.weight_floor))?;
    let n = x.len();
    let mut w = vec![T::one(); n];
    let (mut a, mut b) = wls_line(&x, &y, &w).ok_or(AccessError::DegenerateCosts)?;
    let k = T::lit(opts.tuning);
    let tol = T::lit(opts.rel_tol);
    let y_scale = y.iter().fold(T::zero(), |m, v| m.max(v.abs())).max(T::one());
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let resid: Vec<T> = (0..n).map(|i| y[i] - a - b * x[i]).collect();
        let mut tmp = resid.clone();
        let med = median(&mut tmp);
        let mut dev: Vec<T> = resid.iter().map(|r| (*r - med).abs()).collect();
        let scale = median(&mut dev) / T::lit(0.674_489_750_196_081_7);
        if scale <= T::eps() * T::lit(16.0) * y_scale {
            // more than half the points sit on the current line
            converged = true;
            break;
        }
        for i in 0..n {
            let ar = resid[i].abs();
            w[i] = if ar <= k * scale { T::one() } else { k * scale / ar };
        }
        let (na, nb) = wls_line(&x, &y, &w).ok_or(AccessError::DegenerateCosts)?;
        let change = (na - a).abs().max((nb - b).abs());
        let size = a.abs().max(b.abs()).max(T::eps());
        a = na;
        b = nb;
        if change <= tol * size {
            converged = true;
            break;
        }
    }
    Ok(BetaEstimate {
        beta: -b,
        intercept: a,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn costs() -> Vec<f64> {
        (1..=30).map(|i| 0.5 + i as f64 * 0.37).collect()
    }

    #[test]
    fn exact_power_law() {
        let c = costs();
        let w: Vec<f64> = c.iter().map(|c| c.powf(-2.0)).collect();
        let est = estimate_beta(&c, &w, &HuberOptions::default()).unwrap();
        assert!((est.beta - 2.0).abs() < 1e-8);
    }

    #[test]
    fn intercept_absorbs_constant() {
        let c = costs();
        let w: Vec<f64> = c.iter().map(|c| 7.5 / c).collect();
        let est = estimate_beta(&c, &w, &HuberOptions::default()).unwrap();
        assert!((est.beta - 1.0).abs() < 1e-8);
    }

    #[test]
    fn robust_to_outliers_where_ols_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..20.0)).collect();
        let mut w: Vec<f64> = c
            .iter()
            .map(|c| c.powf(-1.5) * (0.05 * rng.random::<f64>() - 0.025).exp())
            .collect();
        // contaminate the 10% largest costs upward so the slope is pulled
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| c[*b].partial_cmp(&c[*a]).unwrap());
        for &i in order.iter().take(n / 10) {
            w[i] *= 100.0;
        }
        let huber = estimate_beta(&c, &w, &HuberOptions::default()).unwrap().beta;
        let ols = estimate_beta_ols(&c, &w).unwrap();
        assert!((huber - 1.5).abs() < 0.05, "huber {huber}");
        assert!((ols - 1.5).abs() > (huber - 1.5).abs(), "ols {ols} huber {huber}");
    }

    #[test]
    fn constant_costs_are_rank_deficient() {
        let r = estimate_beta(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0], &HuberOptions::default());
        assert_eq!(r, Err(AccessError::DegenerateCosts));
    }

    proptest::proptest! {
        #[test]
        fn invariant_to_weight_rescaling(scale in 0.01f64..100.0, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<f64> = (0..40).map(|_| rng.random_range(1.0..10.0)).collect();
            let w: Vec<f64> = c.iter().map(|c| c.powf(-0.8) * rng.random_range(0.5..1.5)).collect();
            let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
            let a = estimate_beta(&c, &w, &HuberOptions::default()).unwrap().beta;
            let b = estimate_beta(&c, &ws, &HuberOptions::default()).unwrap().beta;
            proptest::prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }
}
