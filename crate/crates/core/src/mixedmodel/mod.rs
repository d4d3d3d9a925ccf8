//! REML fitting of the varying-coefficient model through its mixed-model form.

pub mod optim;
pub mod reml;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::design::{coefficient_rows, fixed_names, FIXED_PER_PREDICTOR};
use crate::basis::{BasisConfig, BasisError, BlockKind, DesignMatrices, KnotLayout, RandomBlock};
use crate::panel::SpaceTimePanel;
use crate::scalar::{dist2d, Scalar};

pub use optim::{OptimOptions, Termination};
pub use reml::{BestState, FitStatus, RemlOptions, RemlProblem, RemlSolution, RATIO_LOWER, RATIO_UPPER};

pub const MODEL_FORMAT: &str = "stvcm.model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MixedModelError {
    #[error("fixed-effect columns are linearly dependent: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("REML did not converge within {iterations} iterations")]
    NotConverged { iterations: usize, best: Box<BestState> },
    #[error("need at least {needed} rows, got {rows}")]
    TooFewRows { rows: usize, needed: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("penalized normal equations are singular")]
    Singular,
    #[error("non-finite values in the response")]
    NonFinite,
    #[error("predictor {index} out of range (model has {count})")]
    PredictorOutOfRange { index: usize, count: usize },
    #[error("penalties must be non-negative")]
    NegativePenalty,
    #[error("malformed model document: {0}")]
    Format(String),
    #[error("unsupported document version {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Estimated variance components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_eps2: f64,
    pub sigma_t2: Vec<f64>,
    pub sigma_s2: Vec<f64>,
    pub sigma_i2: Vec<f64>,
    /// Components at the lower boundary, in `[T, S, I]` order per predictor.
    pub boundary: Vec<bool>,
}

impl VarianceComponents {
    /// Component variances in design component order.
    pub fn as_components(&self) -> Vec<f64> {
        (0..self.sigma_t2.len())
            .flat_map(|r| [self.sigma_t2[r], self.sigma_s2[r], self.sigma_i2[r]])
            .collect()
    }

    /// `λ = σ_ε² / σ²` per component (infinite for a zero component).
    pub fn penalties(&self) -> Vec<f64> {
        self.as_components()
            .into_iter()
            .map(|s| if s > 0.0 { self.sigma_eps2 / s } else { f64::INFINITY })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub grad_norm: f64,
    /// Restricted log-likelihood after each accepted iteration.
    pub trace: Vec<f64>,
    pub status: FitStatus,
    pub start: usize,
}

/// Posterior covariance `σ̂² C⁻¹` restricted to one predictor's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CoefficientCovariance<T: Scalar> {
    /// Positions in the stacked `[θ; u]` vector.
    pub columns: Vec<usize>,
    pub matrix: DMatrix<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FittedModel<T: Scalar> {
    pub theta: DVector<T>,
    pub u: DVector<T>,
    pub vc: VarianceComponents,
    pub knots: KnotLayout<T>,
    pub basis: BasisConfig,
    pub n_predictors: usize,
    pub fixed_names: Vec<String>,
    pub blocks: Vec<RandomBlock>,
    pub loglik_reml: f64,
    pub convergence: Convergence,
    pub n_obs: usize,
    pub dropped: Vec<usize>,
    /// One covariance block per predictor.
    pub covariance: Vec<CoefficientCovariance<T>>,
}

/// `γ̂_r = α̂_r + β̂_r + interaction` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientParts<T> {
    pub temporal: Vec<T>,
    pub spatial: Vec<T>,
    pub interaction: Vec<T>,
    pub total: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    /// `α_r(t) = τ_{r,0} + τ_{r,1} t + Σ u K_T`.
    Temporal,
    /// `β_r(s) = δ_{r,11} s1 + δ_{r,12} s2 + Σ v K_S`.
    Spatial,
    /// `γ_r(t, s)`.
    Full,
}

impl<T: Scalar> FittedModel<T> {
    fn block(&self, r: usize, kind: BlockKind) -> std::ops::Range<usize> {
        self.blocks
            .iter()
            .find(|b| b.predictor == r && b.kind == kind && b.family == 0)
            .map(|b| b.columns.clone())
            .expect("every predictor has three blocks")
    }

    fn check_predictor(&self, r: usize) -> Result<(), MixedModelError> {
        if r >= self.n_predictors {
            return Err(MixedModelError::PredictorOutOfRange {
                index: r,
                count: self.n_predictors,
            });
        }
        Ok(())
    }

    /// Coefficients of predictor `r` in the stacked `[θ; u]` layout, with
    /// their positions.
    pub fn predictor_columns(&self, r: usize) -> Vec<usize> {
        let p = self.theta.len();
        let mut cols: Vec<usize> = (r * FIXED_PER_PREDICTOR..(r + 1) * FIXED_PER_PREDICTOR).collect();
        for kind in BlockKind::ALL {
            cols.extend(self.block(r, kind).map(|c| p + c));
        }
        cols
    }

    /// Linear map from the predictor's coefficients (as ordered by
    /// [`FittedModel::predictor_columns`]) to the requested part on `grid`.
    pub fn contrast(&self, r: usize, part: Part, grid: &[(T, [T; 2])]) -> Result<DMatrix<T>, MixedModelError> {
        self.check_predictor(r)?;
        if grid.is_empty() {
            return Err(MixedModelError::Dimension("empty evaluation grid".into()));
        }
        let (f, z) = coefficient_rows(&self.knots.temporal, &self.knots.spatial, &self.basis, grid);
        let (m, n) = (self.knots.m(), self.knots.n());
        let mut a = DMatrix::zeros(grid.len(), FIXED_PER_PREDICTOR + m + n + m * n);
        let (fixed_cols, random_cols): (&[usize], std::ops::Range<usize>) = match part {
            Part::Temporal => (&[0, 1], 0..m),
            Part::Spatial => (&[2, 3], m..m + n),
            Part::Full => (&[0, 1, 2, 3], 0..m + n + m * n),
        };
        for g in 0..grid.len() {
            for &c in fixed_cols {
                a[(g, c)] = f[(g, c)];
            }
            for c in random_cols.clone() {
                a[(g, FIXED_PER_PREDICTOR + c)] = z[(g, c)];
            }
        }
        Ok(a)
    }

    fn predictor_coefficients(&self, r: usize) -> DVector<T> {
        let p = self.theta.len();
        let cols = self.predictor_columns(r);
        DVector::from_iterator(
            cols.len(),
            cols.iter().map(|&c| if c < p { self.theta[c] } else { self.u[c - p] }),
        )
    }

    /// `γ̂_r` at each `(t, s)` of `grid`, with its three additive parts.
    pub fn evaluate_coefficient(&self, r: usize, grid: &[(T, [T; 2])]) -> Result<CoefficientParts<T>, MixedModelError> {
        self.check_predictor(r)?;
        let b = self.predictor_coefficients(r);
        let parts: Vec<Vec<T>> = [Part::Temporal, Part::Spatial]
            .iter()
            .map(|&part| Ok((self.contrast(r, part, grid)? * &b).iter().copied().collect()))
            .collect::<Result<_, MixedModelError>>()?;
        let (_, z) = coefficient_rows(&self.knots.temporal, &self.knots.spatial, &self.basis, grid);
        let (m, n) = (self.knots.m(), self.knots.n());
        let nu = self.u.rows(self.block(r, BlockKind::Interaction).start, m * n);
        let inter = z.columns(m + n, m * n) * nu;
        let interaction: Vec<T> = inter.iter().copied().collect();
        let total = (0..grid.len())
            .map(|g| parts[0][g] + parts[1][g] + interaction[g])
            .collect();
        Ok(CoefficientParts {
            temporal: parts[0].clone(),
            spatial: parts[1].clone(),
            interaction,
            total,
        })
    }

    /// Value and covariance of a linear contrast of predictor `r`.
    pub fn contrast_moments(&self, r: usize, a: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
        let b = self.predictor_coefficients(r);
        let cov = &self.covariance[r].matrix;
        (a * b, a * cov * a.transpose())
    }

    /// Fitted values `𝒳θ + 𝒵u` for a design built on the same layout.
    pub fn fitted_values(&self, design: &DesignMatrices<T>) -> DVector<T> {
        &design.fixed * &self.theta + &design.random * &self.u
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelDocument {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MixedModelError> {
        let head: DocumentHead = serde_json::from_str(text).map_err(|e| MixedModelError::Format(e.to_string()))?;
        if head.format != MODEL_FORMAT || head.version != MODEL_VERSION {
            return Err(MixedModelError::Version {
                found: format!("{} v{}", head.format, head.version),
                expected: format!("{MODEL_FORMAT} v{MODEL_VERSION}"),
            });
        }
        let doc: ModelDocument<T> = serde_json::from_str(text).map_err(|e| MixedModelError::Format(e.to_string()))?;
        Ok(doc.model)
    }
}

/// Format tag and version shared by every JSON artifact.
#[derive(Deserialize)]
pub struct DocumentHead {
    pub format: String,
    pub version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ModelDocument<T: Scalar> {
    format: String,
    version: u32,
    model: FittedModel<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitOptions {
    pub reml: RemlOptions,
    /// Components held at zero (design component indices).
    pub zero_components: Vec<usize>,
}

/// REML fit of `design.response` on the design.
pub fn fit_reml<T: Scalar>(design: &DesignMatrices<T>, opts: &FitOptions) -> Result<FittedModel<T>, MixedModelError> {
    fit_reml_response(design, &design.response, opts)
}

/// REML fit with an explicit response vector.
pub fn fit_reml_response<T: Scalar>(
    design: &DesignMatrices<T>,
    y: &DVector<T>,
    opts: &FitOptions,
) -> Result<FittedModel<T>, MixedModelError> {
    let problem = RemlProblem::new(
        &design.fixed,
        &design.random,
        &design.component_columns(),
        &opts.zero_components,
        &design.fixed_names,
    )?;
    let sol = problem.fit(y, &opts.reml)?;
    Ok(assemble_model(design, &problem, sol))
}

/// Packs a REML solution on a single-level design into a [`FittedModel`].
pub fn assemble_model<T: Scalar>(
    design: &DesignMatrices<T>,
    problem: &RemlProblem<T>,
    sol: RemlSolution<T>,
) -> FittedModel<T> {
    let r = design.n_fixed() / FIXED_PER_PREDICTOR;
    let p = design.n_fixed();
    let comp = |k: usize| sol.psi[k] * sol.sigma2;
    let vc = VarianceComponents {
        sigma_eps2: sol.sigma2,
        sigma_t2: (0..r).map(|i| comp(3 * i)).collect(),
        sigma_s2: (0..r).map(|i| comp(3 * i + 1)).collect(),
        sigma_i2: (0..r).map(|i| comp(3 * i + 2)).collect(),
        boundary: sol.boundary.clone(),
    };
    let covariance = covariance_blocks(
        design,
        problem,
        &sol,
        (0..r).map(|i| predictor_positions(design, i)).collect(),
    );
    FittedModel {
        theta: sol.theta,
        u: sol.u,
        vc,
        knots: design.knots.clone(),
        basis: design.config,
        n_predictors: r,
        fixed_names: if design.fixed_names.len() == p {
            design.fixed_names.clone()
        } else {
            fixed_names(r)
        },
        blocks: design.blocks.clone(),
        loglik_reml: sol.loglik,
        convergence: Convergence {
            iterations: sol.iterations,
            grad_norm: sol.grad_norm,
            trace: sol.trace,
            status: sol.status,
            start: sol.start,
        },
        n_obs: design.n_rows(),
        dropped: design.dropped.clone(),
        covariance,
    }
}

fn predictor_positions<T: Scalar>(design: &DesignMatrices<T>, r: usize) -> Vec<usize> {
    let p = design.n_fixed();
    let mut cols: Vec<usize> = design.fixed_index(r).collect();
    for kind in BlockKind::ALL {
        cols.extend(design.block_index(r, kind).expect("block present").map(|c| p + c));
    }
    cols
}

/// `σ̂² C⁻¹` restricted to each requested set of `[θ; u]` positions;
/// inactive random columns get zero rows and columns.
pub fn covariance_blocks<T: Scalar>(
    design: &DesignMatrices<T>,
    problem: &RemlProblem<T>,
    sol: &RemlSolution<T>,
    sets: Vec<Vec<usize>>,
) -> Vec<CoefficientCovariance<T>> {
    let p = design.n_fixed();
    let full = if sol.status == FitStatus::Interpolation {
        None
    } else {
        problem.inverse_normal_matrix(&sol.psi)
    };
    let s2 = T::lit(sol.sigma2);
    sets.into_iter()
        .map(|columns| {
            // position in the reduced [θ; u_active] system
            let local: Vec<Option<usize>> = columns
                .iter()
                .map(|&c| {
                    if c < p {
                        Some(c)
                    } else {
                        problem.local_index(c - p).map(|i| p + i)
                    }
                })
                .collect();
            let k = columns.len();
            let matrix = match &full {
                Some(cinv) => DMatrix::from_fn(k, k, |i, j| match (local[i], local[j]) {
                    (Some(a), Some(b)) => cinv[(a, b)] * s2,
                    _ => T::zero(),
                }),
                None => DMatrix::zeros(k, k),
            };
            CoefficientCovariance { columns, matrix }
        })
        .collect()
}

/// Minimizer of `‖y − 𝒳θ − 𝒵u‖² + Σ_k λ_k ‖u_k‖²` as the stacked `[θ; u]`.
///
/// `penalties` has one entry per design component; an infinite penalty
/// removes the component's columns (their coefficients are zero).
pub fn penalized_fit<T: Scalar>(
    design: &DesignMatrices<T>,
    y: &DVector<T>,
    penalties: &[f64],
) -> Result<DVector<T>, MixedModelError> {
    let groups = design.component_columns();
    if penalties.len() != groups.len() {
        return Err(MixedModelError::Dimension(format!(
            "{} penalties for {} components",
            penalties.len(),
            groups.len()
        )));
    }
    if penalties.iter().any(|l| !(*l >= 0.0)) {
        return Err(MixedModelError::NegativePenalty);
    }
    if y.len() != design.n_rows() {
        return Err(MixedModelError::Dimension(
            "response length differs from design rows".into(),
        ));
    }
    let p = design.n_fixed();
    let mut cols: Vec<usize> = (0..p).collect();
    let mut lam: Vec<T> = vec![T::zero(); p];
    for (k, g) in groups.iter().enumerate() {
        if penalties[k].is_finite() {
            for &c in g {
                cols.push(p + c);
                lam.push(T::lit(penalties[k]));
            }
        }
    }
    let w = DMatrix::from_fn(design.n_rows(), cols.len(), |i, j| {
        let c = cols[j];
        if c < p {
            design.fixed[(i, c)]
        } else {
            design.random[(i, c - p)]
        }
    });
    let mut c = w.transpose() * &w;
    for (i, l) in lam.iter().enumerate() {
        c[(i, i)] += *l;
    }
    let rhs = w.transpose() * y;
    // symmetric diagonal scaling before the factorization
    let d: Vec<T> = (0..c.nrows())
        .map(|i| {
            if c[(i, i)] > T::zero() {
                T::one() / c[(i, i)].sqrt()
            } else {
                T::one()
            }
        })
        .collect();
    let cs = DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| c[(i, j)] * d[i] * d[j]);
    let chol = Cholesky::new(cs).ok_or(MixedModelError::Singular)?;
    let l = chol.l_dirty();
    let max_diag = (0..l.nrows()).fold(T::zero(), |m, i| m.max(l[(i, i)]));
    let min_diag = (0..l.nrows()).fold(T::max_value().unwrap(), |m, i| m.min(l[(i, i)]));
    if !(min_diag > max_diag * T::eps().sqrt() * T::lit(1e-4)) {
        return Err(MixedModelError::Singular);
    }
    let rs = DVector::from_fn(rhs.len(), |i, _| rhs[i] * d[i]);
    let bs = chol.solve(&rs);
    let mut out = DVector::zeros(p + design.n_random());
    for (j, &col) in cols.iter().enumerate() {
        out[col] = bs[j] * d[j];
    }
    Ok(out)
}

/// Residual summaries for choosing the number of spatial knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub rmse: f64,
    /// Mean squared residual per time index.
    pub by_time: Vec<f64>,
    /// Mean residual per location index.
    pub location_mean: Vec<f64>,
    /// Moran's I of the per-location mean residuals with inverse-distance weights.
    pub morans_i: f64,
}

pub fn residual_diagnostics<T: Scalar>(
    model: &FittedModel<T>,
    design: &DesignMatrices<T>,
    panel: &SpaceTimePanel<T>,
) -> ResidualDiagnostics {
    let fitted = model.fitted_values(design);
    let (s, t) = (panel.n_locations(), panel.n_times());
    let mut sq_t = vec![0.0; t];
    let mut n_t = vec![0usize; t];
    let mut sum_s = vec![0.0; s];
    let mut n_s = vec![0usize; s];
    let mut total = 0.0;
    for (row, &cell) in design.rows.iter().enumerate() {
        let e = (design.response[row] - fitted[row]).as_f64();
        let (i, j) = panel.cell_coords(cell);
        sq_t[i] += e * e;
        n_t[i] += 1;
        sum_s[j] += e;
        n_s[j] += 1;
        total += e * e;
    }
    let by_time = sq_t
        .iter()
        .zip(&n_t)
        .map(|(a, &n)| if n > 0 { a / n as f64 } else { f64::NAN })
        .collect();
    let location_mean: Vec<f64> = sum_s
        .iter()
        .zip(&n_s)
        .map(|(a, &n)| if n > 0 { a / n as f64 } else { f64::NAN })
        .collect();
    let idx: Vec<usize> = (0..s).filter(|&j| n_s[j] > 0).collect();
    let mean = idx.iter().map(|&j| location_mean[j]).sum::<f64>() / idx.len().max(1) as f64;
    let (mut num, mut den, mut wsum) = (0.0, 0.0, 0.0);
    for &a in &idx {
        let da = location_mean[a] - mean;
        den += da * da;
        for &b in &idx {
            if a == b {
                continue;
            }
            let d = dist2d(&panel.locations[a], &panel.locations[b]).as_f64();
            if d > 0.0 {
                let w = 1.0 / d;
                num += w * da * (location_mean[b] - mean);
                wsum += w;
            }
        }
    }
    let morans_i = if den > 0.0 && wsum > 0.0 {
        idx.len() as f64 / wsum * num / den
    } else {
        0.0
    };
    ResidualDiagnostics {
        rmse: (total / design.n_rows() as f64).sqrt(),
        by_time,
        location_mean,
        morans_i,
    }
}

/// Relative norm-wise difference `‖a − b‖ / ‖b‖`.
pub fn relative_difference<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> f64 {
    let nb = b.norm().as_f64();
    let d = (a - b).norm().as_f64();
    if nb > 0.0 {
        d / nb
    } else {
        d
    }
}
