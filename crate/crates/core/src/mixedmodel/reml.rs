//! Restricted likelihood of a Gaussian linear mixed model with independent
//! ridge-type variance components.
//!
//! With `y = Xθ + Zu + e`, `u_k ~ N(0, σ_k² I)`, `e ~ N(0, σ² I)` and
//! `ψ_k = σ_k² / σ²`, the fixed effects are projected out by a QR
//! factorization of `X`; the profiled criterion then only involves the
//! `q × q` matrix `G + Λ` with `G = Z'(I - P_X)Z` and `Λ = diag(1/ψ)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::optim::{minimize, Objective, OptimOptions, Termination};
use super::MixedModelError;
use crate::linalg::{dependent_columns, lower_triangular_inverse, principal_submatrix, select_columns};
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Bounds of the normalized variance ratios `ω_k = ψ_k tr(Z_k'Z_k) / n`.
pub const RATIO_LOWER: f64 = 1e-12;
pub const RATIO_UPPER: f64 = 1e12;

/// Cached cross-products for repeated fits with the same `X` and `Z`.
#[derive(Debug, Clone)]
pub struct RemlProblem<T: Scalar> {
    n: usize,
    p: usize,
    x: DMatrix<T>,
    /// Orthonormal basis of `col(X)`.
    qx: DMatrix<T>,
    rx: DMatrix<T>,
    /// Active random columns (indices into the caller's `Z`).
    columns: Vec<usize>,
    /// Active components (indices into the caller's component list).
    components: Vec<usize>,
    /// For each active component, positions within `columns`.
    groups: Vec<Vec<usize>>,
    z: DMatrix<T>,
    z_perp: DMatrix<T>,
    g: DMatrix<T>,
    /// `tr(Z_k'Z_k) / n` per active component.
    scale: Vec<f64>,
    total_columns: usize,
    total_components: usize,
}

/// Response-dependent quantities.
#[derive(Debug, Clone)]
pub struct ResponseData<T: Scalar> {
    y: DVector<T>,
    /// `(I - P_X) y`.
    ry: DVector<T>,
    ryy: T,
    /// `Z_perp' y`.
    c: DVector<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    /// Stopped where no further decrease is representable.
    Stalled,
    /// Response lies in the span of the fixed columns.
    Interpolation,
    /// No active variance component: ordinary least squares.
    FixedOnly,
}

/// Estimates at the REML optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RemlSolution<T: Scalar> {
    pub theta: DVector<T>,
    /// Random effects for every caller column (zero for inactive columns).
    pub u: DVector<T>,
    pub sigma2: f64,
    /// Variance ratio `σ_k² / σ²` per caller component (zero when inactive).
    pub psi: Vec<f64>,
    /// Whether each component sits at the lower ratio bound or is inactive.
    pub boundary: Vec<bool>,
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub trace: Vec<f64>,
    pub status: FitStatus,
    /// Index of the start that produced the optimum.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlOptions {
    pub optim: OptimOptions,
    /// Normalized ratios `ω` used for every component at each default start.
    pub default_starts: Vec<f64>,
    /// Extra starting points given as ratios `ψ` per caller component.
    pub warm_starts: Vec<Vec<f64>>,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self {
            optim: OptimOptions {
                lower: RATIO_LOWER.ln(),
                upper: RATIO_UPPER.ln(),
                ..Default::default()
            },
            default_starts: vec![1.0, 1e-2, 1e2],
            warm_starts: Vec::new(),
        }
    }
}

struct Eval {
    f: f64,
    grad: Option<Vec<f64>>,
}

impl<T: Scalar> RemlProblem<T> {
    /// `groups[k]` lists the columns of `z` belonging to component `k`;
    /// components in `inactive` are fixed at zero and their columns dropped.
    pub fn new(
        x: &DMatrix<T>,
        z: &DMatrix<T>,
        groups: &[Vec<usize>],
        inactive: &[usize],
        names: &[String],
    ) -> Result<Self, MixedModelError> {
        let n = x.nrows();
        let p = x.ncols();
        if z.nrows() != n {
            return Err(MixedModelError::Dimension(format!(
                "X has {n} rows but Z has {}",
                z.nrows()
            )));
        }
        if n < p {
            return Err(MixedModelError::TooFewRows { rows: n, needed: p });
        }
        let dep = dependent_columns(x);
        if !dep.is_empty() {
            return Err(MixedModelError::RankDeficient {
                columns: dep
                    .iter()
                    .map(|&j| names.get(j).cloned().unwrap_or_else(|| format!("column {j}")))
                    .collect(),
            });
        }
        let qr = x.clone().qr();
        let qx = qr.q();
        let rx = qr.r();

        let mut columns = Vec::new();
        let mut components = Vec::new();
        let mut local_groups = Vec::new();
        for (k, cols) in groups.iter().enumerate() {
            if inactive.contains(&k) || cols.is_empty() {
                continue;
            }
            let start = columns.len();
            columns.extend(cols.iter().copied());
            components.push(k);
            local_groups.push((start..columns.len()).collect::<Vec<_>>());
        }
        let zs = select_columns(z, &columns);
        let z_perp = &zs - &qx * (qx.transpose() * &zs);
        let g = z_perp.transpose() * &z_perp;
        let nf = n as f64;
        let scale = local_groups
            .iter()
            .map(|cols| {
                let tr: f64 = cols.iter().map(|&c| zs.column(c).norm_squared().as_f64()).sum();
                if tr > 0.0 && tr.is_finite() {
                    tr / nf
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            n,
            p,
            x: x.clone(),
            qx,
            rx,
            columns,
            components,
            groups: local_groups,
            z: zs,
            z_perp,
            g,
            scale,
            total_columns: z.ncols(),
            total_components: groups.len(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_fixed(&self) -> usize {
        self.p
    }

    /// Caller component indices that are estimated.
    pub fn active_components(&self) -> &[usize] {
        &self.components
    }

    pub fn active_columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn response(&self, y: &DVector<T>) -> ResponseData<T> {
        let ry = y - &self.qx * (self.qx.transpose() * y);
        let ryy = ry.norm_squared();
        let c = self.z_perp.transpose() * y;
        ResponseData {
            y: y.clone(),
            ry,
            ryy,
            c,
        }
    }

    fn psi_of(&self, log_omega: &[f64]) -> Vec<f64> {
        log_omega.iter().zip(&self.scale).map(|(l, s)| l.exp() / s).collect()
    }

    fn penalized(&self, psi: &[f64]) -> DMatrix<T> {
        let mut m = self.g.clone();
        for (k, cols) in self.groups.iter().enumerate() {
            let lam = T::lit(1.0 / psi[k]);
            for &c in cols {
                m[(c, c)] += lam;
            }
        }
        m
    }

    fn evaluate(&self, d: &ResponseData<T>, log_omega: &[f64], want_grad: bool) -> Option<Eval> {
        let psi = self.psi_of(log_omega);
        let chol = Cholesky::new(self.penalized(&psi))?;
        let u = chol.solve(&d.c);
        let mut qpen = (d.ryy - u.dot(&d.c)).as_f64();
        if !(qpen > 1e-8 * d.ryy.as_f64()) {
            let r = &d.ry - &self.z_perp * &u;
            let mut pen = 0.0;
            for (k, cols) in self.groups.iter().enumerate() {
                let s: f64 = cols.iter().map(|&c| u[c].as_f64().powi(2)).sum();
                pen += s / psi[k];
            }
            qpen = r.norm_squared().as_f64() + pen;
        }
        if !(qpen > 0.0) || !qpen.is_finite() {
            return None;
        }
        let l = chol.l();
        let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].as_f64().ln()).sum::<f64>();
        let dof = (self.n - self.p) as f64;
        let mut f = dof * ((qpen / dof).ln() + 1.0 + LN_2PI) + logdet;
        for (k, cols) in self.groups.iter().enumerate() {
            f += cols.len() as f64 * psi[k].ln();
        }
        if !f.is_finite() {
            return None;
        }
        let grad = if want_grad {
            let linv = lower_triangular_inverse(&l)?;
            let diag: Vec<f64> = (0..linv.ncols())
                .map(|i| linv.column(i).norm_squared().as_f64())
                .collect();
            Some(
                self.groups
                    .iter()
                    .enumerate()
                    .map(|(k, cols)| {
                        let tr: f64 = cols.iter().map(|&c| diag[c]).sum();
                        let uu: f64 = cols.iter().map(|&c| u[c].as_f64().powi(2)).sum();
                        cols.len() as f64 - tr / psi[k] - dof * uu / (qpen * psi[k])
                    })
                    .collect(),
            )
        } else {
            None
        };
        Some(Eval { f, grad })
    }

    /// `-2 ×` restricted log-likelihood at ratios `ψ` (per caller component).
    pub fn deviance(&self, d: &ResponseData<T>, psi: &[f64]) -> Option<f64> {
        let lo: Vec<f64> = self
            .components
            .iter()
            .zip(&self.scale)
            .map(|(&k, s)| (psi[k] * s).ln())
            .collect();
        self.evaluate(d, &lo, false).map(|e| e.f)
    }

    fn fixed_only(&self, d: &ResponseData<T>, status: FitStatus) -> RemlSolution<T> {
        let theta = self
            .rx
            .solve_upper_triangular(&(self.qx.transpose() * &d.y))
            .unwrap_or_else(|| DVector::zeros(self.p));
        let dof = (self.n - self.p) as f64;
        let rss = d.ryy.as_f64();
        let (sigma2, loglik) = if status == FitStatus::Interpolation {
            (0.0, 0.0)
        } else {
            let s2 = rss / dof;
            (s2, -0.5 * dof * (s2.ln() + 1.0 + LN_2PI))
        };
        RemlSolution {
            theta,
            u: DVector::zeros(self.total_columns),
            sigma2,
            psi: vec![0.0; self.total_components],
            boundary: vec![true; self.total_components],
            loglik,
            iterations: 0,
            grad_norm: 0.0,
            trace: Vec::new(),
            status,
            start: 0,
        }
    }

    /// Maximizes the restricted likelihood for response `y`.
    pub fn fit(&self, y: &DVector<T>, opts: &RemlOptions) -> Result<RemlSolution<T>, MixedModelError> {
        if y.len() != self.n {
            return Err(MixedModelError::Dimension(format!(
                "response has {} rows, design has {}",
                y.len(),
                self.n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(MixedModelError::NonFinite);
        }
        let d = self.response(y);
        let yy = y.norm_squared().as_f64();
        if self.n == self.p || d.ryy.as_f64() <= (64.0 * f64::EPSILON).powi(2) * yy.max(f64::MIN_POSITIVE) {
            return Ok(self.fixed_only(&d, FitStatus::Interpolation));
        }
        if self.groups.is_empty() {
            return Ok(self.fixed_only(&d, FitStatus::FixedOnly));
        }

        let k = self.groups.len();
        let mut starts: Vec<Vec<f64>> = opts.default_starts.iter().map(|w| vec![w.ln(); k]).collect();
        for w in &opts.warm_starts {
            if w.len() == self.total_components {
                starts.push(
                    self.components
                        .iter()
                        .zip(&self.scale)
                        .map(|(&c, s)| (w[c].max(RATIO_LOWER / s) * s).ln())
                        .collect(),
                );
            }
        }
        let mut best: Option<(usize, super::optim::OptimResult)> = None;
        for (i, x0) in starts.iter().enumerate() {
            let mut obj = Criterion {
                problem: self,
                data: &d,
            };
            let Some(r) = minimize(&mut obj, x0, &opts.optim) else {
                continue;
            };
            log::debug!(
                "REML start {i}: f = {} after {} iterations ({:?})",
                r.f,
                r.iterations,
                r.termination
            );
            if best.as_ref().is_none_or(|(_, b)| r.f < b.f) {
                best = Some((i, r));
            }
        }
        let (start, r) = best.ok_or(MixedModelError::Singular)?;
        let sol = self.solution(&d, &r.x, start, &r);
        match r.termination {
            Termination::IterationCap => Err(MixedModelError::NotConverged {
                iterations: r.iterations,
                best: Box::new(sol.into()),
            }),
            _ => Ok(sol),
        }
    }

    fn solution(
        &self,
        d: &ResponseData<T>,
        log_omega: &[f64],
        start: usize,
        r: &super::optim::OptimResult,
    ) -> RemlSolution<T> {
        let psi_local = self.psi_of(log_omega);
        let (theta, u_local, qpen) = self.blup(d, &psi_local);
        let dof = (self.n - self.p) as f64;
        let sigma2 = qpen / dof;
        let mut psi = vec![0.0; self.total_components];
        let mut boundary = vec![true; self.total_components];
        for (i, &c) in self.components.iter().enumerate() {
            psi[c] = psi_local[i];
            boundary[c] = log_omega[i] <= RATIO_LOWER.ln() + 1e-9;
        }
        let mut u = DVector::zeros(self.total_columns);
        for (i, &c) in self.columns.iter().enumerate() {
            u[c] = u_local[i];
        }
        RemlSolution {
            theta,
            u,
            sigma2,
            psi,
            boundary,
            loglik: -0.5 * r.f,
            iterations: r.iterations,
            grad_norm: r.projected_grad_norm,
            trace: r.trace.iter().map(|f| -0.5 * f).collect(),
            status: match r.termination {
                Termination::Gradient => FitStatus::Converged,
                _ => FitStatus::Stalled,
            },
            start,
        }
    }

    /// GLS fixed effects and BLUPs at ratios `ψ` (active components only),
    /// with the penalized residual sum of squares.
    fn blup(&self, d: &ResponseData<T>, psi: &[f64]) -> (DVector<T>, DVector<T>, f64) {
        let chol =
            Cholesky::new(self.penalized(psi)).expect("penalized matrix is positive definite at a feasible point");
        let u = chol.solve(&d.c);
        let resid_fixed = &d.y - &self.z * &u;
        let theta = self
            .rx
            .solve_upper_triangular(&(self.qx.transpose() * &resid_fixed))
            .expect("fixed block has full column rank");
        let r = &resid_fixed - &self.x * &theta;
        let mut pen = 0.0;
        for (k, cols) in self.groups.iter().enumerate() {
            pen += cols.iter().map(|&c| u[c].as_f64().powi(2)).sum::<f64>() / psi[k];
        }
        (theta, u, r.norm_squared().as_f64() + pen)
    }

    /// `C⁻¹` of the penalized normal equations in `[θ; u_active]` order
    /// at ratios `ψ` per caller component.
    pub fn inverse_normal_matrix(&self, psi: &[f64]) -> Option<DMatrix<T>> {
        let local: Vec<f64> = self.components.iter().map(|&k| psi[k]).collect();
        let p = self.p;
        let q = self.columns.len();
        let rinv = self.rx.solve_upper_triangular(&DMatrix::identity(p, p))?;
        let xtx_inv = &rinv * rinv.transpose();
        let mut out = DMatrix::zeros(p + q, p + q);
        if q == 0 {
            out.copy_from(&xtx_inv);
            return Some(out);
        }
        let chol: Cholesky<T, Dyn> = Cholesky::new(self.penalized(&local))?;
        let w = chol.inverse();
        // A = (X'X)⁻¹ X'Z
        let a = &rinv * (self.qx.transpose() * &self.z);
        let aw = &a * &w;
        let top_left = &xtx_inv + &aw * a.transpose();
        out.view_mut((0, 0), (p, p)).copy_from(&top_left);
        out.view_mut((0, p), (p, q)).copy_from(&(-&aw));
        out.view_mut((p, 0), (q, p)).copy_from(&(-aw.transpose()));
        out.view_mut((p, p), (q, q)).copy_from(&w);
        Some(out)
    }

    /// Active random columns restricted to those with the given caller indices.
    pub fn local_index(&self, caller_column: usize) -> Option<usize> {
        self.columns.iter().position(|&c| c == caller_column)
    }

    /// Sub-matrix of `G` restricted to caller columns (for diagnostics).
    pub fn projected_gram(&self, caller_columns: &[usize]) -> DMatrix<T> {
        let idx: Vec<usize> = caller_columns.iter().filter_map(|&c| self.local_index(c)).collect();
        principal_submatrix(&self.g, &idx)
    }
}

/// Best state reached when the optimizer hit its iteration cap.
#[derive(Debug, Clone, PartialEq)]
pub struct BestState {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub grad_norm: f64,
}

impl<T: Scalar> From<RemlSolution<T>> for BestState {
    fn from(s: RemlSolution<T>) -> Self {
        Self {
            theta: s.theta.iter().map(|v| v.as_f64()).collect(),
            psi: s.psi,
            sigma2: s.sigma2,
            loglik: s.loglik,
            grad_norm: s.grad_norm,
        }
    }
}

struct Criterion<'a, T: Scalar> {
    problem: &'a RemlProblem<T>,
    data: &'a ResponseData<T>,
}

impl<T: Scalar> Objective for Criterion<'_, T> {
    fn value(&mut self, x: &[f64]) -> Option<f64> {
        self.problem.evaluate(self.data, x, false).map(|e| e.f)
    }

    fn value_and_gradient(&mut self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        self.problem
            .evaluate(self.data, x, true)
            .map(|e| (e.f, e.grad.unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("x{j}")).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / n as f64 });
        let z = DMatrix::from_fn(n, 5, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let prob = RemlProblem::new(&x, &z, &[vec![0, 1], vec![2, 3, 4]], &[], &names(2)).unwrap();
        let d = prob.response(&y);
        let at = [0.3, -1.2];
        let e = prob.evaluate(&d, &at, true).unwrap();
        for k in 0..2 {
            let h = 1e-5;
            let mut a = at;
            let mut b = at;
            a[k] += h;
            b[k] -= h;
            let fd = (prob.evaluate(&d, &a, false).unwrap().f - prob.evaluate(&d, &b, false).unwrap().f) / (2.0 * h);
            assert!(
                (fd - e.grad.as_ref().unwrap()[k]).abs() < 1e-6,
                "{k}: {fd} vs {:?}",
                e.grad
            );
        }
    }

    #[test]
    fn deviance_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 25;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let z = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let prob = RemlProblem::new(&x, &z, &[vec![0, 1, 2]], &[], &names(2)).unwrap();
        let d = prob.response(&y);
        let psi = 0.7;
        let sigma2 = 1.3;
        // dense REML with V = σ²(I + ψ ZZ'), minus ln|X'X|
        let v = (DMatrix::identity(n, n) + &z * z.transpose() * psi) * sigma2;
        let vinv = v.clone().try_inverse().unwrap();
        let xvx = x.transpose() * &vinv * &x;
        let theta = xvx.clone().try_inverse().unwrap() * x.transpose() * &vinv * &y;
        let r = &y - &x * theta;
        let dense = (n - 2) as f64 * LN_2PI + v.determinant().ln() + xvx.determinant().ln()
            - (x.transpose() * &x).determinant().ln()
            + (r.transpose() * &vinv * &r)[(0, 0)];
        // profile over σ²
        let mut best = f64::INFINITY;
        for i in 0..20001 {
            let s2 = 0.05 + i as f64 * 0.0005;
            let v = (DMatrix::identity(n, n) + &z * z.transpose() * psi) * s2;
            let vinv = v.clone().try_inverse().unwrap();
            let xvx = x.transpose() * &vinv * &x;
            let th = xvx.clone().try_inverse().unwrap() * x.transpose() * &vinv * &y;
            let r = &y - &x * th;
            let val = (n - 2) as f64 * LN_2PI + v.determinant().ln() + xvx.determinant().ln()
                - (x.transpose() * &x).determinant().ln()
                + (r.transpose() * &vinv * &r)[(0, 0)];
            best = best.min(val);
        }
        let ours = prob.deviance(&d, &[psi]).unwrap();
        assert!(dense.is_finite());
        assert!((ours - best).abs() < 1e-4, "{ours} vs {best}");
    }
}
