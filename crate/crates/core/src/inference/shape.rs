//! Constant / linear / nonlinear classification by band feasibility.

use serde::{Deserialize, Serialize};

use super::band::{BandGrid, ConfidenceBand};
use super::InferenceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Constant,
    /// A line in time, or a plane in space.
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    Constant { a: f64 },
    Linear { a: f64, b: f64 },
    Planar { a: f64, b1: f64, b2: f64 },
}

impl Witness {
    pub fn eval(&self, g: &[f64]) -> f64 {
        match *self {
            Witness::Constant { a } => a,
            Witness::Linear { a, b } => a + b * g[0],
            Witness::Planar { a, b1, b2 } => a + b1 * g[0] + b2 * g[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeVerdict {
    pub shape: Shape,
    pub witness: Option<Witness>,
    pub level: f64,
}

/// Points of a one-dimensional (time) or planar (space) grid.
enum Domain {
    Line(Vec<f64>),
    Plane(Vec<[f64; 2]>),
}

fn domain(grid: &BandGrid) -> Result<Domain, InferenceError> {
    match grid {
        BandGrid::Times(t) => Ok(Domain::Line(t.clone())),
        BandGrid::Locations(s) => Ok(Domain::Plane(s.clone())),
        BandGrid::SpaceTime(p) => {
            if p.iter().all(|(_, s)| *s == p[0].1) {
                Ok(Domain::Line(p.iter().map(|(t, _)| *t).collect()))
            } else if p.iter().all(|(t, _)| *t == p[0].0) {
                Ok(Domain::Plane(p.iter().map(|(_, s)| *s).collect()))
            } else {
                Err(InferenceError::SliceRequired)
            }
        }
    }
}

/// Classifies the band: constant if a constant fits inside it, else linear
/// (planar for a spatial grid) if an affine function fits, else nonlinear.
/// Boundary ties count as feasible.
pub fn classify_shape(band: &ConfidenceBand) -> Result<ShapeVerdict, InferenceError> {
    if band.lower.is_empty() {
        return Err(InferenceError::EmptyGrid);
    }
    let (lo, hi) = (&band.lower, &band.upper);
    let verdict = |shape, witness| {
        Ok(ShapeVerdict {
            shape,
            witness,
            level: band.level,
        })
    };
    if let Some(a) = constant_fit(lo, hi) {
        return verdict(Shape::Constant, Some(Witness::Constant { a }));
    }
    match domain(&band.grid)? {
        Domain::Line(g) => match line_fit(&g, lo, hi) {
            Some((a, b)) => verdict(Shape::Linear, Some(Witness::Linear { a, b })),
            None => verdict(Shape::Nonlinear, None),
        },
        Domain::Plane(s) => match plane_fit(&s, lo, hi) {
            Some((a, b1, b2)) => verdict(Shape::Linear, Some(Witness::Planar { a, b1, b2 })),
            None => verdict(Shape::Nonlinear, None),
        },
    }
}

/// Midpoint of `[max lower, min upper]` when non-empty.
pub fn constant_fit(lower: &[f64], upper: &[f64]) -> Option<f64> {
    let l = lower.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let u = upper.iter().cloned().fold(f64::INFINITY, f64::min);
    (l <= u).then_some(0.5 * (l + u))
}

/// Line `a + b g` inside `[lower, upper]` at every `g`, if one exists.
///
/// The feasible slopes form the interval obtained from every pair `g_i < g_j`:
/// `(l_j − u_i)/(g_j − g_i) ≤ b ≤ (u_j − l_i)/(g_j − g_i)`.
pub fn line_fit(g: &[f64], lower: &[f64], upper: &[f64]) -> Option<(f64, f64)> {
    let n = g.len();
    let (mut b_lo, mut b_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..n {
        if lower[i] > upper[i] {
            return None;
        }
        for j in 0..n {
            let d = g[j] - g[i];
            if d > 0.0 {
                b_lo = b_lo.max((lower[j] - upper[i]) / d);
                b_hi = b_hi.min((upper[j] - lower[i]) / d);
            } else if d == 0.0 && lower[i] > upper[j] {
                return None;
            }
        }
    }
    if b_lo > b_hi {
        return None;
    }
    let b = match (b_lo.is_finite(), b_hi.is_finite()) {
        (true, true) => 0.5 * (b_lo + b_hi),
        (true, false) => b_lo.max(0.0),
        (false, true) => b_hi.min(0.0),
        (false, false) => 0.0,
    };
    let a_lo = (0..n).map(|k| lower[k] - b * g[k]).fold(f64::NEG_INFINITY, f64::max);
    let a_hi = (0..n).map(|k| upper[k] - b * g[k]).fold(f64::INFINITY, f64::min);
    Some((0.5 * (a_lo + a_hi), b))
}

/// Plane `a + b·s` inside the band, by clipping the slope polygon against
/// the pairwise half-planes `b·(s_j − s_i) ≤ u_j − l_i`.
pub fn plane_fit(s: &[[f64; 2]], lower: &[f64], upper: &[f64]) -> Option<(f64, f64, f64)> {
    let n = s.len();
    if lower.iter().zip(upper).any(|(l, u)| l > u) {
        return None;
    }
    let spread =
        upper.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - lower.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut min_d = f64::INFINITY;
    for i in 0..n {
        for j in 0..i {
            let d = ((s[i][0] - s[j][0]).powi(2) + (s[i][1] - s[j][1]).powi(2)).sqrt();
            if d > 0.0 {
                min_d = min_d.min(d);
            }
        }
    }
    let bound = if min_d.is_finite() {
        1e3 * (spread.abs() + 1.0) / min_d
    } else {
        1.0
    };
    let mut poly = vec![[-bound, -bound], [bound, -bound], [bound, bound], [-bound, bound]];
    for i in 0..n {
        for j in 0..n {
            let d = [s[j][0] - s[i][0], s[j][1] - s[i][1]];
            if d == [0.0, 0.0] {
                if lower[i] > upper[j] {
                    return None;
                }
                continue;
            }
            let c = upper[j] - lower[i];
            let tol = 1e-12 * (c.abs() + bound * (d[0].abs() + d[1].abs()));
            poly = clip(&poly, d, c + tol);
            if poly.is_empty() {
                return None;
            }
        }
    }
    let k = poly.len() as f64;
    let b = [
        poly.iter().map(|p| p[0]).sum::<f64>() / k,
        poly.iter().map(|p| p[1]).sum::<f64>() / k,
    ];
    let a_lo = (0..n)
        .map(|k| lower[k] - b[0] * s[k][0] - b[1] * s[k][1])
        .fold(f64::NEG_INFINITY, f64::max);
    let a_hi = (0..n)
        .map(|k| upper[k] - b[0] * s[k][0] - b[1] * s[k][1])
        .fold(f64::INFINITY, f64::min);
    Some((0.5 * (a_lo + a_hi), b[0], b[1]))
}

/// Convex polygon ∩ `{x : d·x ≤ c}`.
fn clip(poly: &[[f64; 2]], d: [f64; 2], c: f64) -> Vec<[f64; 2]> {
    let val = |p: &[f64; 2]| d[0] * p[0] + d[1] * p[1] - c;
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let (vp, vq) = (val(&p), val(&q));
        if vp <= 0.0 {
            out.push(p);
        }
        if (vp < 0.0 && vq > 0.0) || (vp > 0.0 && vq < 0.0) {
            let t = vp / (vp - vq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Significance {
    Positive,
    Negative,
    NotSignificant,
}

impl Significance {
    pub fn label(self) -> &'static str {
        match self {
            Significance::Positive => "positive",
            Significance::Negative => "negative",
            Significance::NotSignificant => "not_significant",
        }
    }
}

/// Positive where the lower envelope is above zero, negative where the
/// upper envelope is below zero.
pub fn significance_map(band: &ConfidenceBand) -> Vec<Significance> {
    band.lower
        .iter()
        .zip(&band.upper)
        .map(|(l, u)| {
            if *l > 0.0 {
                Significance::Positive
            } else if *u < 0.0 {
                Significance::Negative
            } else {
                Significance::NotSignificant
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixedmodel::Part;

    fn band(grid: BandGrid, lower: Vec<f64>, upper: Vec<f64>) -> ConfidenceBand {
        let center = lower.iter().zip(&upper).map(|(l, u)| 0.5 * (l + u)).collect();
        ConfidenceBand {
            predictor: 0,
            part: Part::Temporal,
            se: vec![1.0; lower.len()],
            grid,
            center,
            lower,
            upper,
            level: 0.95,
            critical_value: 2.5,
            n_draws: 1000,
            seed: 0,
        }
    }

    fn line_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn wide_band_is_constant_zero() {
        let g = line_grid(11);
        let v = classify_shape(&band(BandGrid::Times(g), vec![-1.0; 11], vec![1.0; 11])).unwrap();
        assert_eq!(v.shape, Shape::Constant);
        assert_eq!(v.witness, Some(Witness::Constant { a: 0.0 }));
    }

    #[test]
    fn tight_line() {
        let g = line_grid(21);
        let lo = g.iter().map(|t| 2.0 * t - 0.05).collect();
        let hi = g.iter().map(|t| 2.0 * t + 0.05).collect();
        let b = band(BandGrid::Times(g.clone()), lo, hi);
        let v = classify_shape(&b).unwrap();
        assert_eq!(v.shape, Shape::Linear);
        let Some(Witness::Linear { a, b: slope }) = v.witness else {
            panic!()
        };
        assert!((slope - 2.0).abs() < 0.1);
        for (k, t) in g.iter().enumerate() {
            let w = a + slope * t;
            assert!(b.lower[k] <= w && w <= b.upper[k]);
        }
    }

    #[test]
    fn sine_is_nonlinear_by_grid_search() {
        let g = line_grid(41);
        let lo: Vec<f64> = g
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t).sin() - 0.05)
            .collect();
        let hi: Vec<f64> = g
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t).sin() + 0.05)
            .collect();
        let v = classify_shape(&band(BandGrid::Times(g.clone()), lo.clone(), hi.clone())).unwrap();
        assert_eq!(v.shape, Shape::Nonlinear);
        // dense (a, b) search finds nothing either
        for ia in 0..=400 {
            let a = -2.0 + ia as f64 * 0.01;
            for ib in 0..=800 {
                let b = -4.0 + ib as f64 * 0.01;
                assert!(g
                    .iter()
                    .enumerate()
                    .any(|(k, t)| a + b * t < lo[k] || a + b * t > hi[k]));
            }
        }
    }

    #[test]
    fn line_fit_agrees_with_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let g = line_grid(6);
            let c: Vec<f64> = g.iter().map(|t| 0.3 * t + rng.random_range(-0.2..0.2)).collect();
            let w = rng.random_range(0.02..0.2);
            let lo: Vec<f64> = c.iter().map(|v| v - w).collect();
            let hi: Vec<f64> = c.iter().map(|v| v + w).collect();
            let found = line_fit(&g, &lo, &hi);
            let mut brute = false;
            'outer: for ia in 0..=300 {
                for ib in 0..=300 {
                    let (a, b) = (-0.75 + ia as f64 * 0.005, -0.45 + ib as f64 * 0.005);
                    if g.iter()
                        .enumerate()
                        .all(|(k, t)| lo[k] <= a + b * t && a + b * t <= hi[k])
                    {
                        brute = true;
                        break 'outer;
                    }
                }
            }
            if brute {
                assert!(found.is_some());
            }
            if let Some((a, b)) = found {
                for (k, t) in g.iter().enumerate() {
                    assert!(lo[k] - 1e-12 <= a + b * t && a + b * t <= hi[k] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn planar_witness() {
        let s: Vec<[f64; 2]> = (0..25).map(|k| [(k % 5) as f64 / 4.0, (k / 5) as f64 / 4.0]).collect();
        let plane = |p: &[f64; 2]| 1.0 + 0.5 * p[0] - 2.0 * p[1];
        let lo: Vec<f64> = s.iter().map(|p| plane(p) - 0.05).collect();
        let hi: Vec<f64> = s.iter().map(|p| plane(p) + 0.05).collect();
        let v = classify_shape(&band(BandGrid::Locations(s.clone()), lo.clone(), hi.clone())).unwrap();
        assert_eq!(v.shape, Shape::Linear);
        let w = v.witness.unwrap();
        for (k, p) in s.iter().enumerate() {
            let x = w.eval(p);
            assert!(lo[k] <= x && x <= hi[k]);
        }
        let bumpy_lo: Vec<f64> = s.iter().map(|p| (p[0] * p[1] * 8.0).sin() - 0.05).collect();
        let bumpy_hi: Vec<f64> = bumpy_lo.iter().map(|v| v + 0.1).collect();
        let v = classify_shape(&band(BandGrid::Locations(s), bumpy_lo, bumpy_hi)).unwrap();
        assert_eq!(v.shape, Shape::Nonlinear);
    }

    #[test]
    fn space_time_grid_needs_a_slice() {
        let grid = BandGrid::SpaceTime(vec![(1.0, [0.0, 0.0]), (2.0, [1.0, 0.0]), (3.0, [0.5, 0.5])]);
        let b = band(grid, vec![0.0, 1.0, 5.0], vec![0.1, 1.1, 5.1]);
        assert!(matches!(classify_shape(&b), Err(InferenceError::SliceRequired)));
    }

    #[test]
    fn constant_implies_linear_feasible() {
        let g = line_grid(9);
        let lo: Vec<f64> = g.iter().map(|t| 0.1 * t).collect();
        let hi: Vec<f64> = g.iter().map(|t| 1.0 - 0.1 * t).collect();
        assert!(constant_fit(&lo, &hi).is_some());
        assert!(line_fit(&g, &lo, &hi).is_some());
    }

    #[test]
    fn significance_labels() {
        let b = band(
            BandGrid::Times(vec![0.0, 1.0, 2.0]),
            vec![0.2, -0.5, -0.4],
            vec![0.9, 0.5, -0.1],
        );
        assert_eq!(
            significance_map(&b),
            vec![
                Significance::Positive,
                Significance::NotSignificant,
                Significance::Negative
            ]
        );
    }
}
