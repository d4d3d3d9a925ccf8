//! Global coefficients plus provider-specific deviations, fitted jointly.
//!
//! For provider `p` the coefficient is `γ_rp = γ_r + η_rp`. The global part
//! is additive (`α_r(t) + β_r(s)`); each deviation has its own temporal,
//! spatial and interaction kernels on a separated knot family. Deviation
//! fixed effects are coded with orthonormal Helmert contrasts, so they sum
//! to zero over providers by construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::design::{interaction_row, spatial_matrix, temporal_matrix, FIXED_NAMES, FIXED_PER_PREDICTOR};
use crate::basis::{BasisConfig, BasisError, BlockKind, DesignMatrices, KnotLayout, RandomBlock};
use crate::inference::band::{band_from_moments, check_gamma, BandParts, ConfidenceBand};
use crate::inference::{BandGrid, InferenceError};
use crate::mixedmodel::{
    covariance_blocks, CoefficientCovariance, Convergence, DocumentHead, FitStatus, MixedModelError, Part, RemlOptions,
    RemlProblem,
};
use crate::panel::SpaceTimePanel;
use crate::rng::derive_seed;
use crate::scalar::Scalar;

pub const MULTILEVEL_FORMAT: &str = "stvcm.multilevel";
pub const MULTILEVEL_VERSION: u32 = 1;

/// Variance components per predictor in design order.
pub const COMPONENTS_PER_PREDICTOR: usize = 5;

#[derive(Debug, Error)]
pub enum MultilevelError {
    #[error("need at least two providers, got {0}")]
    TooFewProviders(usize),
    #[error("provider grids do not match: {0}")]
    GridMismatch(String),
    #[error("provider {index} out of range (fit has {count})")]
    ProviderOutOfRange { index: usize, count: usize },
    #[error("joint level ρ = {0} must lie strictly between 0 and 1")]
    InvalidLevel(f64),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Model(#[from] MixedModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

/// Responses of several providers on one shared `S × T` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MultilevelPanel<T> {
    pub providers: Vec<String>,
    pub location_ids: Vec<String>,
    pub locations: Vec<[T; 2]>,
    pub times: Vec<T>,
    /// Per provider, `S * T` time-major cells.
    pub responses: Vec<Vec<Option<T>>>,
    pub covariates: Vec<Vec<T>>,
}

impl<T: Scalar> MultilevelPanel<T> {
    pub fn new(
        providers: Vec<String>,
        location_ids: Vec<String>,
        locations: Vec<[T; 2]>,
        times: Vec<T>,
        responses: Vec<Vec<Option<T>>>,
        covariates: Vec<Vec<T>>,
    ) -> Result<Self, MultilevelError> {
        if providers.len() < 2 {
            return Err(MultilevelError::TooFewProviders(providers.len()));
        }
        if responses.len() != providers.len() {
            return Err(MultilevelError::GridMismatch(format!(
                "{} providers but {} response sets",
                providers.len(),
                responses.len()
            )));
        }
        let out = Self {
            providers,
            location_ids,
            locations,
            times,
            responses,
            covariates,
        };
        for p in 0..out.providers.len() {
            out.provider_panel(p)?;
        }
        Ok(out)
    }

    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.covariates.len()
    }

    /// Single-provider view.
    pub fn provider_panel(&self, p: usize) -> Result<SpaceTimePanel<T>, MultilevelError> {
        SpaceTimePanel::new(
            self.location_ids.clone(),
            self.locations.clone(),
            self.times.clone(),
            self.responses[p].clone(),
            self.covariates.clone(),
        )
        .map_err(|e| MultilevelError::GridMismatch(format!("provider {}: {e}", self.providers[p])))
    }
}

/// Orthonormal Helmert contrasts: `P × (P − 1)`, columns sum to zero.
pub fn helmert(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p.saturating_sub(1), |i, j| {
        let k = (j + 1) as f64;
        let norm = (k * (k + 1.0)).sqrt();
        if i <= j {
            1.0 / norm
        } else if i == j + 1 {
            -k / norm
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelOptions {
    pub reml: RemlOptions,
    /// Include the deviation fixed effects (`P − 1` Helmert columns per term).
    pub deviation_fixed: bool,
    /// Design components held at zero.
    pub zero_components: Vec<usize>,
    pub basis: BasisConfig,
}

impl Default for MultilevelOptions {
    fn default() -> Self {
        Self {
            reml: RemlOptions::default(),
            deviation_fixed: true,
            zero_components: Vec::new(),
            basis: BasisConfig::default(),
        }
    }
}

/// Component index of `(predictor, slot)` with slots
/// `[global T, global S, deviation T, deviation S, deviation I]`.
pub fn component_index(r: usize, slot: usize) -> usize {
    COMPONENTS_PER_PREDICTOR * r + slot
}

/// Indices of every deviation variance component.
pub fn deviation_components(r: usize) -> Vec<usize> {
    (0..r)
        .flat_map(|k| (2..5).map(move |s| component_index(k, s)))
        .collect()
}

/// Stacked design over providers; row `i` of provider `p` has stacked cell
/// `p · S·T + cell`.
pub fn assemble_multilevel_design<T: Scalar>(
    panel: &MultilevelPanel<T>,
    knots: &KnotLayout<T>,
    config: &BasisConfig,
    deviation_fixed: bool,
) -> Result<DesignMatrices<T>, MultilevelError> {
    let np = panel.n_providers();
    if knots.providers.len() != np {
        return Err(BasisError::InvalidKnots(format!(
            "layout has {} provider families for {} providers",
            knots.providers.len(),
            np
        ))
        .into());
    }
    let sep = knots.separation();
    if knots.min_temporal_sep.is_none() || knots.min_spatial_sep.is_none() {
        return Err(BasisError::InvalidKnots("provider families need separation distances".into()).into());
    }
    if !sep.is_clear() {
        return Err(BasisError::Identifiability(sep).into());
    }
    let r = panel.n_predictors();
    let (m, n) = (knots.m(), knots.n());
    let s = panel.locations.len();
    let cells = s * panel.times.len();
    let h = helmert(np);
    let hp = np - 1;

    let mut fixed_names: Vec<String> = (0..r)
        .flat_map(|k| FIXED_NAMES.iter().map(move |f| format!("{f}[{}]", k + 1)))
        .collect();
    if deviation_fixed {
        for k in 0..r {
            for f in FIXED_NAMES {
                for j in 0..hp {
                    fixed_names.push(format!("dev_{f}[{}]_h{}", k + 1, j + 1));
                }
            }
        }
    }
    let n_fixed = fixed_names.len();

    let mut blocks = Vec::new();
    let mut components = Vec::new();
    for k in 0..r {
        for slot in [
            "global_temporal",
            "global_spatial",
            "deviation_temporal",
            "deviation_spatial",
            "deviation_interaction",
        ] {
            components.push(format!("{slot}[{}]", k + 1));
        }
    }
    let mut col = 0;
    for k in 0..r {
        for (slot, kind, w) in [(0, BlockKind::Temporal, m), (1, BlockKind::Spatial, n)] {
            blocks.push(RandomBlock {
                predictor: k,
                kind,
                family: 0,
                component: component_index(k, slot),
                columns: col..col + w,
            });
            col += w;
        }
    }
    for k in 0..r {
        for p in 0..np {
            for (slot, kind, w) in [
                (2, BlockKind::Temporal, m),
                (3, BlockKind::Spatial, n),
                (4, BlockKind::Interaction, m * n),
            ] {
                blocks.push(RandomBlock {
                    predictor: k,
                    kind,
                    family: p + 1,
                    component: component_index(k, slot),
                    columns: col..col + w,
                });
                col += w;
            }
        }
    }
    let q = col;

    let kt: Vec<DMatrix<T>> = (0..=np)
        .map(|f| temporal_matrix(&panel.times, knots.family_temporal(f), config.temporal))
        .collect();
    let ks: Vec<DMatrix<T>> = (0..=np)
        .map(|f| spatial_matrix(&panel.locations, knots.family_spatial(f), config.spatial))
        .collect();

    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    for p in 0..np {
        for c in 0..cells {
            match panel.responses[p][c] {
                Some(v) if v.is_finite() => rows.push(p * cells + c),
                _ => dropped.push(p * cells + c),
            }
        }
    }
    if rows.is_empty() {
        return Err(BasisError::NoObservations.into());
    }
    let nrow = rows.len();
    let mut fixed = DMatrix::zeros(nrow, n_fixed);
    let mut z_t = DMatrix::zeros(q, nrow);
    let mut kt_row = vec![T::zero(); m];
    let mut ks_row = vec![T::zero(); n];
    for (row, &stacked) in rows.iter().enumerate() {
        let (p, cell) = (stacked / cells, stacked % cells);
        let (i, j) = (cell / s, cell % s);
        let terms = [T::one(), panel.times[i], panel.locations[j][0], panel.locations[j][1]];
        let zc = z_t.column_mut(row);
        let zc = zc.data.into_slice_mut();
        for k in 0..r {
            let x = panel.covariates[k][cell];
            for (f, term) in terms.iter().enumerate() {
                fixed[(row, k * FIXED_PER_PREDICTOR + f)] = x * *term;
                if deviation_fixed {
                    for jj in 0..hp {
                        let c = r * FIXED_PER_PREDICTOR + (k * FIXED_PER_PREDICTOR + f) * hp + jj;
                        fixed[(row, c)] = x * *term * T::lit(h[(p, jj)]);
                    }
                }
            }
        }
        for b in &blocks {
            if b.family != 0 && b.family != p + 1 {
                continue;
            }
            let x = panel.covariates[b.predictor][cell];
            let f = b.family;
            match b.kind {
                BlockKind::Temporal => {
                    for a in 0..m {
                        zc[b.columns.start + a] = x * kt[f][(i, a)];
                    }
                }
                BlockKind::Spatial => {
                    for a in 0..n {
                        zc[b.columns.start + a] = x * ks[f][(j, a)];
                    }
                }
                BlockKind::Interaction => {
                    for a in 0..m {
                        kt_row[a] = kt[f][(i, a)];
                    }
                    for a in 0..n {
                        ks_row[a] = ks[f][(j, a)];
                    }
                    interaction_row(&kt_row, &ks_row, x, &mut zc[b.columns.clone()]);
                }
            }
        }
    }
    let response = DVector::from_iterator(
        nrow,
        rows.iter().map(|&st| panel.responses[st / cells][st % cells].unwrap()),
    );
    Ok(DesignMatrices {
        fixed,
        random: z_t.transpose(),
        response,
        fixed_names,
        blocks,
        components,
        rows,
        dropped,
        knots: knots.clone(),
        config: *config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultilevelVarianceComponents {
    pub sigma_eps2: f64,
    pub global_t2: Vec<f64>,
    pub global_s2: Vec<f64>,
    pub deviation_t2: Vec<f64>,
    pub deviation_s2: Vec<f64>,
    pub deviation_i2: Vec<f64>,
    pub boundary: Vec<bool>,
}

/// Which coefficient surface a contrast targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "provider", rename_all = "snake_case")]
pub enum Target {
    /// `γ_r`.
    Global,
    /// `η_rp`.
    Deviation(usize),
    /// `γ_rp = γ_r + η_rp`.
    Combined(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MultilevelFit<T: Scalar> {
    pub providers: Vec<String>,
    pub theta: DVector<T>,
    pub u: DVector<T>,
    pub vc: MultilevelVarianceComponents,
    pub knots: KnotLayout<T>,
    pub basis: BasisConfig,
    pub n_predictors: usize,
    pub fixed_names: Vec<String>,
    pub blocks: Vec<RandomBlock>,
    pub deviation_fixed: bool,
    pub loglik_reml: f64,
    pub convergence: Convergence,
    /// Largest `|Σ_p η|` over the deviation fixed effects.
    pub constraints_residual: f64,
    pub n_obs: usize,
    pub covariance: Vec<CoefficientCovariance<T>>,
}

/// Fits the stacked multilevel model by REML.
pub fn fit_multilevel<T: Scalar>(
    panel: &MultilevelPanel<T>,
    knots: &KnotLayout<T>,
    opts: &MultilevelOptions,
) -> Result<MultilevelFit<T>, MultilevelError> {
    let design = assemble_multilevel_design(panel, knots, &opts.basis, opts.deviation_fixed)?;
    let problem = RemlProblem::new(
        &design.fixed,
        &design.random,
        &design.component_columns(),
        &opts.zero_components,
        &design.fixed_names,
    )?;
    let sol = problem.fit(&design.response, &opts.reml)?;
    let r = panel.n_predictors();
    let np = panel.n_providers();
    let p_fixed = design.n_fixed();
    let sets: Vec<Vec<usize>> = (0..r)
        .map(|k| {
            let mut cols: Vec<usize> = (k * FIXED_PER_PREDICTOR..(k + 1) * FIXED_PER_PREDICTOR).collect();
            if opts.deviation_fixed {
                let hp = np - 1;
                let start = r * FIXED_PER_PREDICTOR + k * FIXED_PER_PREDICTOR * hp;
                cols.extend(start..start + FIXED_PER_PREDICTOR * hp);
            }
            for b in design.blocks.iter().filter(|b| b.predictor == k) {
                cols.extend(b.columns.clone().map(|c| p_fixed + c));
            }
            cols
        })
        .collect();
    let covariance = covariance_blocks(&design, &problem, &sol, sets);
    let comp = |k: usize, slot: usize| sol.psi[component_index(k, slot)] * sol.sigma2;
    let vc = MultilevelVarianceComponents {
        sigma_eps2: sol.sigma2,
        global_t2: (0..r).map(|k| comp(k, 0)).collect(),
        global_s2: (0..r).map(|k| comp(k, 1)).collect(),
        deviation_t2: (0..r).map(|k| comp(k, 2)).collect(),
        deviation_s2: (0..r).map(|k| comp(k, 3)).collect(),
        deviation_i2: (0..r).map(|k| comp(k, 4)).collect(),
        boundary: sol.boundary.clone(),
    };
    let mut fit = MultilevelFit {
        providers: panel.providers.clone(),
        theta: sol.theta,
        u: sol.u,
        vc,
        knots: knots.clone(),
        basis: opts.basis,
        n_predictors: r,
        fixed_names: design.fixed_names.clone(),
        blocks: design.blocks.clone(),
        deviation_fixed: opts.deviation_fixed,
        loglik_reml: sol.loglik,
        convergence: Convergence {
            iterations: sol.iterations,
            grad_norm: sol.grad_norm,
            trace: sol.trace,
            status: sol.status,
            start: sol.start,
        },
        constraints_residual: 0.0,
        n_obs: design.n_rows(),
        covariance,
    };
    fit.constraints_residual = fit.constraint_violation();
    if fit.convergence.status == FitStatus::Stalled {
        log::warn!(
            "multilevel REML stopped at rounding level with gradient {}",
            fit.convergence.grad_norm
        );
    }
    Ok(fit)
}

impl<T: Scalar> MultilevelFit<T> {
    pub fn n_providers(&self) -> usize {
        self.providers.len()
    }

    fn check(&self, r: usize, target: Target) -> Result<(), MultilevelError> {
        if r >= self.n_predictors {
            return Err(MixedModelError::PredictorOutOfRange {
                index: r,
                count: self.n_predictors,
            }
            .into());
        }
        if let Target::Deviation(p) | Target::Combined(p) = target {
            if p >= self.n_providers() {
                return Err(MultilevelError::ProviderOutOfRange {
                    index: p,
                    count: self.n_providers(),
                });
            }
        }
        Ok(())
    }

    /// Deviation fixed effects `[τ_0, τ_1, δ_11, δ_12]` of provider `p`.
    pub fn deviation_fixed_effects(&self, r: usize, p: usize) -> [f64; FIXED_PER_PREDICTOR] {
        let mut out = [0.0; FIXED_PER_PREDICTOR];
        if !self.deviation_fixed {
            return out;
        }
        let np = self.n_providers();
        let hp = np - 1;
        let h = helmert(np);
        for (f, o) in out.iter_mut().enumerate() {
            let start = self.n_predictors * FIXED_PER_PREDICTOR + (r * FIXED_PER_PREDICTOR + f) * hp;
            *o = (0..hp).map(|j| h[(p, j)] * self.theta[start + j].as_f64()).sum();
        }
        out
    }

    /// Deviation fixed effects of provider `p` with their covariance.
    pub fn deviation_fixed_moments(&self, r: usize, p: usize) -> Result<(DVector<T>, DMatrix<T>), MultilevelError> {
        self.check(r, Target::Deviation(p))?;
        let cov = &self.covariance[r];
        let mut a = DMatrix::zeros(FIXED_PER_PREDICTOR, cov.columns.len());
        if self.deviation_fixed {
            let hp = self.n_providers() - 1;
            let h = helmert(self.n_providers());
            for f in 0..FIXED_PER_PREDICTOR {
                let start = self.n_predictors * FIXED_PER_PREDICTOR + (r * FIXED_PER_PREDICTOR + f) * hp;
                for j in 0..hp {
                    let at = cov
                        .columns
                        .iter()
                        .position(|&c| c == start + j)
                        .expect("deviation column in block");
                    a[(f, at)] = T::lit(h[(p, j)]);
                }
            }
        }
        let stacked = self.stacked();
        let b = DVector::from_iterator(cov.columns.len(), cov.columns.iter().map(|&c| stacked[c]));
        Ok((&a * b, &a * &cov.matrix * a.transpose()))
    }

    fn constraint_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.n_predictors {
            let mut sums = [0.0; FIXED_PER_PREDICTOR];
            for p in 0..self.n_providers() {
                for (s, v) in sums.iter_mut().zip(self.deviation_fixed_effects(r, p)) {
                    *s += v;
                }
            }
            worst = sums.iter().fold(worst, |w, s| w.max(s.abs()));
        }
        worst
    }

    /// Contrast rows over the stacked `[θ; u]` vector.
    fn contrast_full(&self, r: usize, part: Part, target: Target, grid: &[(T, [T; 2])]) -> DMatrix<T> {
        let np = self.n_providers();
        let hp = np - 1;
        let h = helmert(np);
        let pf = self.theta.len();
        let (m, n) = (self.knots.m(), self.knots.n());
        let terms: &[usize] = match part {
            Part::Temporal => &[0, 1],
            Part::Spatial => &[2, 3],
            Part::Full => &[0, 1, 2, 3],
        };
        let want = |kind: BlockKind| match part {
            Part::Temporal => kind == BlockKind::Temporal,
            Part::Spatial => kind == BlockKind::Spatial,
            Part::Full => true,
        };
        let (global, provider) = match target {
            Target::Global => (true, None),
            Target::Deviation(p) => (false, Some(p)),
            Target::Combined(p) => (true, Some(p)),
        };
        let mut a = DMatrix::zeros(grid.len(), pf + self.u.len());
        let mut kt = vec![T::zero(); m];
        let mut ks = vec![T::zero(); n];
        for (g, (t, s)) in grid.iter().enumerate() {
            let f = [T::one(), *t, s[0], s[1]];
            for &term in terms {
                if global {
                    a[(g, r * FIXED_PER_PREDICTOR + term)] = f[term];
                }
                if let (Some(p), true) = (provider, self.deviation_fixed) {
                    for j in 0..hp {
                        let c = self.n_predictors * FIXED_PER_PREDICTOR + (r * FIXED_PER_PREDICTOR + term) * hp + j;
                        a[(g, c)] = f[term] * T::lit(h[(p, j)]);
                    }
                }
            }
            for b in self.blocks.iter().filter(|b| b.predictor == r && want(b.kind)) {
                let fam = b.family;
                let included = (fam == 0 && global) || provider.is_some_and(|p| fam == p + 1);
                if !included {
                    continue;
                }
                for (v, k) in kt.iter_mut().zip(self.knots.family_temporal(fam)) {
                    *v = self.basis.temporal.eval(*t, *k);
                }
                for (v, k) in ks.iter_mut().zip(self.knots.family_spatial(fam)) {
                    *v = self.basis.spatial.eval(s, k);
                }
                let start = pf + b.columns.start;
                match b.kind {
                    BlockKind::Temporal => (0..m).for_each(|i| a[(g, start + i)] = kt[i]),
                    BlockKind::Spatial => (0..n).for_each(|i| a[(g, start + i)] = ks[i]),
                    BlockKind::Interaction => {
                        let mut row = vec![T::zero(); m * n];
                        interaction_row(&kt, &ks, T::one(), &mut row);
                        (0..m * n).for_each(|i| a[(g, start + i)] = row[i]);
                    }
                }
            }
        }
        a
    }

    fn stacked(&self) -> DVector<T> {
        let mut b = DVector::zeros(self.theta.len() + self.u.len());
        b.rows_mut(0, self.theta.len()).copy_from(&self.theta);
        b.rows_mut(self.theta.len(), self.u.len()).copy_from(&self.u);
        b
    }

    /// Values of the targeted surface (or one of its parts) on `grid`.
    pub fn evaluate(
        &self,
        r: usize,
        part: Part,
        target: Target,
        grid: &[(T, [T; 2])],
    ) -> Result<Vec<T>, MultilevelError> {
        self.check(r, target)?;
        let a = self.contrast_full(r, part, target, grid);
        Ok((a * self.stacked()).iter().copied().collect())
    }

    /// Estimate and covariance of the targeted surface on `grid`.
    pub fn moments(
        &self,
        r: usize,
        part: Part,
        target: Target,
        grid: &[(T, [T; 2])],
    ) -> Result<(DVector<T>, DMatrix<T>), MultilevelError> {
        self.check(r, target)?;
        let full = self.contrast_full(r, part, target, grid);
        let cov = &self.covariance[r];
        let a = DMatrix::from_fn(grid.len(), cov.columns.len(), |g, j| full[(g, cov.columns[j])]);
        let stacked = self.stacked();
        let b = DVector::from_iterator(cov.columns.len(), cov.columns.iter().map(|&c| stacked[c]));
        Ok((&a * b, &a * &cov.matrix * a.transpose()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&MultilevelDocument {
            format: MULTILEVEL_FORMAT.into(),
            version: MULTILEVEL_VERSION,
            fit: self.clone(),
        })
        .expect("fit serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MultilevelError> {
        let head: DocumentHead = serde_json::from_str(text).map_err(|e| MixedModelError::Format(e.to_string()))?;
        if head.format != MULTILEVEL_FORMAT || head.version != MULTILEVEL_VERSION {
            return Err(MixedModelError::Version {
                found: format!("{} v{}", head.format, head.version),
                expected: format!("{MULTILEVEL_FORMAT} v{MULTILEVEL_VERSION}"),
            }
            .into());
        }
        let doc: MultilevelDocument<T> =
            serde_json::from_str(text).map_err(|e| MixedModelError::Format(e.to_string()))?;
        Ok(doc.fit)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct MultilevelDocument<T: Scalar> {
    format: String,
    version: u32,
    fit: MultilevelFit<T>,
}

/// Bands for several estimates, each at level `1 − ρ/K`; estimate `k` draws
/// with seed `derive_seed(seed, k)`.
pub fn bonferroni_bands<T: Scalar>(
    moments: &[(DVector<T>, DMatrix<T>)],
    rho: f64,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<BandParts>, MultilevelError> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(MultilevelError::InvalidLevel(rho));
    }
    let gamma = rho / moments.len() as f64;
    check_gamma(gamma)?;
    moments
        .iter()
        .enumerate()
        .map(|(k, (c, v))| band_from_moments(c, v, gamma, n_draws, derive_seed(seed, k as u64)).map_err(Into::into))
        .collect()
}

/// Simultaneous bands for every provider's deviation (or combined
/// coefficient) at level `1 − ρ/P` each.
#[allow(clippy::too_many_arguments)]
pub fn joint_bands<T: Scalar>(
    fit: &MultilevelFit<T>,
    predictor: usize,
    part: Part,
    combined: bool,
    rho: f64,
    grid: &BandGrid,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<ConfidenceBand>, MultilevelError> {
    crate::inference::band::check_grid(part, grid)?;
    let pts = grid.points::<T>();
    let moments = (0..fit.n_providers())
        .map(|p| {
            fit.moments(
                predictor,
                part,
                if combined {
                    Target::Combined(p)
                } else {
                    Target::Deviation(p)
                },
                &pts,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let np = fit.n_providers();
    Ok(bonferroni_bands(&moments, rho, n_draws, seed)?
        .into_iter()
        .enumerate()
        .map(|(p, (center, lower, upper, se, c))| ConfidenceBand {
            predictor,
            part,
            grid: grid.clone(),
            center,
            lower,
            upper,
            se,
            level: 1.0 - rho / np as f64,
            critical_value: c,
            n_draws,
            seed: derive_seed(seed, p as u64),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn helmert_is_orthonormal_contrast() {
        for p in 2..7 {
            let h = helmert(p);
            let hth = h.transpose() * &h;
            assert!((hth - DMatrix::identity(p - 1, p - 1)).amax() < 1e-14);
            for j in 0..p - 1 {
                assert!(h.column(j).sum().abs() < 1e-14);
            }
        }
    }
}
