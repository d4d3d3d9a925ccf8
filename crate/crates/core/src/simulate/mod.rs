//! Synthetic panels with known coefficient surfaces.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mixedmodel::FittedModel;
use crate::multilevel::MultilevelPanel;
use crate::panel::SpaceTimePanel;
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;

pub const SCENARIO_FORMAT: &str = "stvcm.scenario";
pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum SimulationError {
    #[error("scenario needs S, T and R of at least one")]
    EmptyGrid,
    #[error("noise level must be finite and non-negative")]
    InvalidNoise,
    #[error("grid and truth lengths differ")]
    Mismatch,
    #[error("invalid multilevel scenario: {0}")]
    Invalid(String),
    #[error("malformed scenario: {0}")]
    Format(String),
    #[error("scenario version mismatch: found {found}, expected {expected}")]
    Version { found: String, expected: String },
}

/// Closed-form coefficient surface `γ(t, s)`; `horizon` is the number of
/// time points `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surface {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        time: f64,
        s1: f64,
        s2: f64,
    },
    /// `amplitude · sin(frequency · t + phase)`.
    TemporalSine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// `sin(π t / T) cos(2π s1) + t s2 / T`.
    Wave,
    /// `exp(−‖s − (0.5, 0.5)‖) (1 + t / T)`.
    Bump,
    /// `scale · sin(π t / T) · sin(π s1) · sin(π s2)`, zero mean in neither
    /// time nor space: a nonseparable product.
    Product {
        scale: f64,
    },
    /// `scale · (t / T − 1/2)(s1 − 1/2)`, a pure space-time interaction.
    Bilinear {
        scale: f64,
    },
    Scaled {
        factor: f64,
        surface: Box<Surface>,
    },
    Sum {
        terms: Vec<Surface>,
    },
}

impl Surface {
    pub fn eval(&self, t: f64, s: [f64; 2], horizon: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Surface::Constant { value } => *value,
            Surface::Linear {
                intercept,
                time,
                s1,
                s2,
            } => intercept + time * t + s1 * s[0] + s2 * s[1],
            Surface::TemporalSine {
                amplitude,
                frequency,
                phase,
            } => amplitude * (frequency * t + phase).sin(),
            Surface::Wave => (PI * t / horizon).sin() * (2.0 * PI * s[0]).cos() + t * s[1] / horizon,
            Surface::Bump => {
                let d = ((s[0] - 0.5).powi(2) + (s[1] - 0.5).powi(2)).sqrt();
                (-d).exp() * (1.0 + t / horizon)
            }
            Surface::Product { scale } => scale * (PI * t / horizon).sin() * (PI * s[0]).sin() * (PI * s[1]).sin(),
            Surface::Bilinear { scale } => scale * (t / horizon - 0.5) * (s[0] - 0.5),
            Surface::Scaled { factor, surface } => factor * surface.eval(t, s, horizon),
            Surface::Sum { terms } => terms.iter().map(|x| x.eval(t, s, horizon)).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// `X_1 ≡ 1`, the rest independent standard normals.
    #[default]
    InterceptAndNormal,
    StandardNormal,
    Uniform {
        low: f64,
        high: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Noise {
    Sd {
        sd: f64,
    },
    /// Noise variance set to the empirical signal variance divided by `ratio`.
    SignalToNoise {
        ratio: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub s: usize,
    pub t: usize,
    pub surfaces: Vec<Surface>,
    pub noise: Noise,
    #[serde(default)]
    pub covariates: CovariateLaw,
    pub seed: u64,
}

impl SimulationScenario {
    /// Two predictors with the nonseparable default surfaces at signal-to-noise 4.
    pub fn default_two_predictor(s: usize, t: usize, seed: u64) -> Self {
        Self {
            s,
            t,
            surfaces: vec![Surface::Wave, Surface::Bump],
            noise: Noise::SignalToNoise { ratio: 4.0 },
            covariates: CovariateLaw::InterceptAndNormal,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.s == 0 || self.t == 0 || self.surfaces.is_empty() {
            return Err(SimulationError::EmptyGrid);
        }
        let ok = match self.noise {
            Noise::Sd { sd } => sd.is_finite() && sd >= 0.0,
            Noise::SignalToNoise { ratio } => ratio.is_finite() && ratio > 0.0,
        };
        if !ok {
            return Err(SimulationError::InvalidNoise);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "format": SCENARIO_FORMAT,
            "version": SCENARIO_VERSION,
            "scenario": self,
        }))
        .expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SimulationError> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            version: u32,
            scenario: SimulationScenario,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| SimulationError::Format(e.to_string()))?;
        if doc.format != SCENARIO_FORMAT || doc.version != SCENARIO_VERSION {
            return Err(SimulationError::Version {
                found: format!("{} v{}", doc.format, doc.version),
                expected: format!("{SCENARIO_FORMAT} v{SCENARIO_VERSION}"),
            });
        }
        doc.scenario.validate()?;
        Ok(doc.scenario)
    }
}

/// A generated panel with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel<T: Scalar> {
    pub panel: SpaceTimePanel<T>,
    /// `γ_r` at every cell, per predictor.
    pub truth: Vec<Vec<f64>>,
    /// Noise-free mean `Σ_r γ_r X_r` per cell.
    pub signal: Vec<f64>,
    pub noise_sd: f64,
}

/// Uniform locations on the unit square.
pub fn sample_locations(s: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = stream(seed, Domain::Simulation, 0);
    (0..s).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()
}

/// Covariate values per predictor, time-major over `cells`.
pub fn sample_covariates(law: CovariateLaw, r: usize, cells: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Domain::Covariates, 0);
    (0..r)
        .map(|k| {
            (0..cells)
                .map(|_| match law {
                    CovariateLaw::InterceptAndNormal if k == 0 => 1.0,
                    CovariateLaw::InterceptAndNormal | CovariateLaw::StandardNormal => StandardNormal.sample(&mut rng),
                    CovariateLaw::Uniform { low, high } => rng.random_range(low..high),
                })
                .collect()
        })
        .collect()
}

/// Draws `Y = Σ_r γ_r(t, s) X_r + ε` on `S` uniform locations and times `1..=T`.
pub fn generate<T: Scalar>(scenario: &SimulationScenario) -> Result<SimulatedPanel<T>, SimulationError> {
    scenario.validate()?;
    let (s, t, r) = (scenario.s, scenario.t, scenario.surfaces.len());
    let cells = s * t;
    let locations = sample_locations(s, scenario.seed);
    let times: Vec<f64> = (1..=t).map(|v| v as f64).collect();
    let covariates = sample_covariates(scenario.covariates, r, cells, scenario.seed);
    let horizon = t as f64;
    let truth: Vec<Vec<f64>> = scenario
        .surfaces
        .iter()
        .map(|surf| {
            (0..cells)
                .map(|c| surf.eval(times[c / s], locations[c % s], horizon))
                .collect()
        })
        .collect();
    let signal: Vec<f64> = (0..cells)
        .map(|c| (0..r).map(|k| truth[k][c] * covariates[k][c]).sum())
        .collect();
    let noise_sd = match scenario.noise {
        Noise::Sd { sd } => sd,
        Noise::SignalToNoise { ratio } => {
            let mean = signal.iter().sum::<f64>() / cells as f64;
            let var = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cells as f64;
            (var / ratio).sqrt()
        }
    };
    let mut rng = stream(scenario.seed, Domain::Simulation, 1);
    let response: Vec<Option<T>> = if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("valid noise");
        signal
            .iter()
            .map(|m| Some(T::lit(m + normal.sample(&mut rng))))
            .collect()
    } else {
        signal.iter().map(|m| Some(T::lit(*m))).collect()
    };
    let panel = SpaceTimePanel::new(
        (0..s).map(|j| format!("L{}", j + 1)).collect(),
        locations.iter().map(|p| [T::lit(p[0]), T::lit(p[1])]).collect(),
        times.iter().map(|v| T::lit(*v)).collect(),
        response,
        covariates
            .iter()
            .map(|c| c.iter().map(|v| T::lit(*v)).collect())
            .collect(),
    )
    .expect("generated panel is valid");
    Ok(SimulatedPanel {
        panel,
        truth,
        signal,
        noise_sd,
    })
}

/// `‖γ̂ − γ‖ / ‖γ − mean(γ)‖` for two value vectors on the same grid.
/// Multilevel data produced by [`generate_multilevel`].
#[derive(Debug, Clone)]
pub struct SimulatedMultilevel<T: Scalar> {
    pub panel: MultilevelPanel<T>,
    /// Global surfaces per predictor over cells.
    pub global: Vec<Vec<f64>>,
    /// Deviation surfaces per provider and predictor over cells.
    pub deviations: Vec<Vec<Vec<f64>>>,
    pub noise_sd: f64,
}

/// Providers share locations, times and covariates; provider `p` has
/// coefficient `scenario.surfaces[r] + deviations[p][r]` and its own noise
/// stream. `Noise::SignalToNoise` is taken relative to the first provider.
pub fn generate_multilevel<T: Scalar>(
    scenario: &SimulationScenario,
    deviations: &[Vec<Surface>],
) -> Result<SimulatedMultilevel<T>, SimulationError> {
    scenario.validate()?;
    let r = scenario.surfaces.len();
    if deviations.len() < 2 || deviations.iter().any(|d| d.len() != r) {
        return Err(SimulationError::Invalid(format!(
            "need deviation surfaces for at least two providers, {r} per provider"
        )));
    }
    let base = generate::<f64>(scenario)?;
    let (s, t) = (scenario.s, scenario.t);
    let cells = s * t;
    let horizon = t as f64;
    let times: Vec<f64> = (1..=t).map(|v| v as f64).collect();
    let locs: Vec<[f64; 2]> = base.panel.locations.clone();
    let x = &base.panel.covariates;
    let dev: Vec<Vec<Vec<f64>>> = deviations
        .iter()
        .map(|ds| {
            ds.iter()
                .map(|surf| {
                    (0..cells)
                        .map(|c| surf.eval(times[c / s], locs[c % s], horizon))
                        .collect()
                })
                .collect()
        })
        .collect();
    let responses = dev
        .iter()
        .enumerate()
        .map(|(p, dp)| {
            let mut rng = stream(scenario.seed, Domain::Simulation, 1 + p as u64);
            (0..cells)
                .map(|c| {
                    let mean: f64 = (0..r).map(|k| (base.truth[k][c] + dp[k][c]) * x[k][c]).sum();
                    let e = if base.noise_sd > 0.0 {
                        base.noise_sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    } else {
                        0.0
                    };
                    Some(T::lit(mean + e))
                })
                .collect()
        })
        .collect();
    let panel = MultilevelPanel::new(
        (0..deviations.len()).map(|p| format!("P{}", p + 1)).collect(),
        base.panel.location_ids.clone(),
        locs.iter().map(|l| [T::lit(l[0]), T::lit(l[1])]).collect(),
        times.iter().map(|v| T::lit(*v)).collect(),
        responses,
        x.iter().map(|c| c.iter().map(|v| T::lit(*v)).collect()).collect(),
    )
    .map_err(|e| SimulationError::Invalid(e.to_string()))?;
    Ok(SimulatedMultilevel {
        panel,
        global: base.truth,
        deviations: dev,
        noise_sd: base.noise_sd,
    })
}

pub fn relative_rmse(estimate: &[f64], truth: &[f64]) -> Result<f64, SimulationError> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(SimulationError::Mismatch);
    }
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let num: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = truth.iter().map(|b| (b - mean).powi(2)).sum();
    Ok((num / den).sqrt())
}

/// Relative RMSE of each fitted coefficient against its true surface on `grid`.
pub fn score_recovery<T: Scalar>(
    model: &FittedModel<T>,
    surfaces: &[Surface],
    grid: &[(f64, [f64; 2])],
    horizon: f64,
) -> Result<Vec<f64>, SimulationError> {
    if surfaces.len() != model.n_predictors {
        return Err(SimulationError::Mismatch);
    }
    let g: Vec<(T, [T; 2])> = grid
        .iter()
        .map(|(t, s)| (T::lit(*t), [T::lit(s[0]), T::lit(s[1])]))
        .collect();
    surfaces
        .iter()
        .enumerate()
        .map(|(r, surf)| {
            let est: Vec<f64> = model
                .evaluate_coefficient(r, &g)
                .map_err(|_| SimulationError::Mismatch)?
                .total
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let truth: Vec<f64> = grid.iter().map(|(t, s)| surf.eval(*t, *s, horizon)).collect();
            relative_rmse(&est, &truth)
        })
        .collect()
}

/// Every `(t, s)` of a panel's grid, time-major.
pub fn panel_grid<T: Scalar>(panel: &SpaceTimePanel<T>) -> Vec<(f64, [f64; 2])> {
    let s = panel.n_locations();
    (0..panel.n_cells())
        .map(|c| {
            let p = panel.locations[c % s];
            (panel.times[c / s].as_f64(), [p[0].as_f64(), p[1].as_f64()])
        })
        .collect()
}
