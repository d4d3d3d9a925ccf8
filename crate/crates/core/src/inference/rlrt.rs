//! Restricted likelihood ratio test for a zero interaction variance.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::InferenceError;
use crate::basis::{assemble_design, BlockKind, DesignMatrices, KnotLayout};
use crate::mixedmodel::{MixedModelError, RemlOptions, RemlProblem, RemlSolution};
use crate::panel::SpaceTimePanel;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;

pub const MIN_BOOTSTRAP: usize = 500;

/// Statistics below this are reported as zero.
pub const STAT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionTest {
    pub predictor: usize,
    pub rlrt_stat: f64,
    pub p_value: f64,
    pub null_draws: usize,
    /// Bootstrap statistics at least as large as the observed one.
    pub exceedances: usize,
    pub loglik_null: f64,
    pub loglik_full: f64,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTestOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub reml: RemlOptions,
}

/// Test of `σ²_ν = 0` for one predictor, with `n_boot ≥ 500` bootstrap draws.
pub fn test_interaction<T: Scalar>(
    panel: &SpaceTimePanel<T>,
    knots: &KnotLayout<T>,
    predictor: usize,
    n_boot: usize,
    seed: u64,
) -> Result<InteractionTest, InferenceError> {
    if n_boot < MIN_BOOTSTRAP {
        return Err(InferenceError::TooFewBootstrap {
            got: n_boot,
            min: MIN_BOOTSTRAP,
        });
    }
    let design = assemble_design(panel, knots)?;
    test_interaction_design(
        &design,
        predictor,
        &InteractionTestOptions {
            n_boot,
            seed,
            reml: RemlOptions::default(),
        },
    )
}

/// Pair of fits sharing the cached cross-products of one design.
pub struct InteractionFits<T: Scalar> {
    full: RemlProblem<T>,
    null: RemlProblem<T>,
    component: usize,
    n_components: usize,
}

impl<T: Scalar> InteractionFits<T> {
    pub fn new(design: &DesignMatrices<T>, predictor: usize) -> Result<Self, InferenceError> {
        let block = design
            .blocks
            .iter()
            .find(|b| b.predictor == predictor && b.kind == BlockKind::Interaction && b.family == 0)
            .ok_or(InferenceError::Model(MixedModelError::PredictorOutOfRange {
                index: predictor,
                count: design.n_fixed() / 4,
            }))?;
        let groups = design.component_columns();
        let full = RemlProblem::new(&design.fixed, &design.random, &groups, &[], &design.fixed_names)?;
        let null = RemlProblem::new(
            &design.fixed,
            &design.random,
            &groups,
            &[block.component],
            &design.fixed_names,
        )?;
        Ok(Self {
            full,
            null,
            component: block.component,
            n_components: groups.len(),
        })
    }

    /// Null and full fits with the full fit also started from the null optimum.
    pub fn fit_pair(
        &self,
        y: &DVector<T>,
        null_opts: &RemlOptions,
        full_opts: &RemlOptions,
    ) -> Result<(RemlSolution<T>, RemlSolution<T>), InferenceError> {
        let null = self.null.fit(y, null_opts).map_err(InferenceError::NullFit)?;
        let mut opts = full_opts.clone();
        let mut warm = null.psi.clone();
        warm[self.component] = 0.0;
        opts.warm_starts.push(warm);
        let full = self.full.fit(y, &opts)?;
        Ok((null, full))
    }

    pub fn statistic(null: &RemlSolution<T>, full: &RemlSolution<T>) -> f64 {
        let s = 2.0 * (full.loglik - null.loglik);
        if s < STAT_FLOOR {
            0.0
        } else {
            s
        }
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }
}

/// RLRT on an assembled design; the bootstrap draws responses from the null
/// fit (fixed effects, active variance components and residual variance).
pub fn test_interaction_design<T: Scalar>(
    design: &DesignMatrices<T>,
    predictor: usize,
    opts: &InteractionTestOptions,
) -> Result<InteractionTest, InferenceError> {
    if opts.n_boot == 0 {
        return Err(InferenceError::TooFewBootstrap { got: 0, min: 1 });
    }
    let fits = InteractionFits::new(design, predictor)?;
    let y = &design.response;
    let (null, full) = fits.fit_pair(y, &opts.reml, &opts.reml)?;
    let stat = InteractionFits::statistic(&null, &full);

    let groups = design.component_columns();
    let mean = &design.fixed * &null.theta;
    let sigma = null.sigma2.sqrt();
    let sd_u: Vec<f64> = null.psi.iter().map(|p| (p * null.sigma2).sqrt()).collect();
    // bootstrap fits start only from the observed-data optima
    let boot_null = RemlOptions {
        default_starts: Vec::new(),
        warm_starts: vec![null.psi.clone()],
        ..opts.reml.clone()
    };
    let boot_full = RemlOptions {
        default_starts: Vec::new(),
        warm_starts: vec![full.psi.clone()],
        ..opts.reml.clone()
    };

    let n = design.n_rows();
    let draws: Vec<Result<f64, InferenceError>> = (0..opts.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(opts.seed, Domain::Bootstrap, b as u64);
            let mut u = DVector::<T>::zeros(design.n_random());
            for (k, cols) in groups.iter().enumerate() {
                if sd_u[k] > 0.0 {
                    for &c in cols {
                        u[c] =
                            T::lit(sd_u[k] * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
                    }
                }
            }
            let mut ystar = &mean + &design.random * u;
            for i in 0..n {
                ystar[i] += T::lit(sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
            }
            let (n0, n1) = match fits.fit_pair(&ystar, &boot_null, &boot_full) {
                Ok(pair) => pair,
                Err(InferenceError::Model(MixedModelError::NotConverged { .. })) => {
                    // retry from the default starts
                    fits.fit_pair(&ystar, &opts.reml, &opts.reml)?
                }
                Err(e) => return Err(e),
            };
            Ok(InteractionFits::statistic(&n0, &n1))
        })
        .collect();
    let mut exceed = 0;
    for d in draws {
        if d? >= stat {
            exceed += 1;
        }
    }
    Ok(InteractionTest {
        predictor,
        rlrt_stat: stat,
        p_value: (1 + exceed) as f64 / (opts.n_boot + 1) as f64,
        null_draws: opts.n_boot,
        exceedances: exceed,
        loglik_null: null.loglik,
        loglik_full: full.loglik,
        method: "parametric-bootstrap".into(),
        seed: opts.seed,
    })
}
