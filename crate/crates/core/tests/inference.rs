use nalgebra::{DMatrix, DVector};

use stvcm::basis::{assemble_design, select_spatial_knots, select_temporal_knots, DesignMatrices, KnotLayout};
use stvcm::inference::band::{band_from_moments, critical_value, max_modulus_draws};
use stvcm::inference::{
    classify_shape, significance_map, simultaneous_band, test_interaction, test_interaction_design, BandGrid,
    InferenceError, InteractionFits, InteractionTestOptions, Shape, Significance,
};
use stvcm::mixedmodel::{fit_reml, FitOptions, FittedModel, Part, RemlOptions};
use stvcm::simulate::{generate, Noise, SimulationScenario, Surface};

fn scenario(s: usize, t: usize, seed: u64, interaction: f64) -> SimulationScenario {
    let mut terms = vec![
        Surface::TemporalSine {
            amplitude: 1.0,
            frequency: 0.6,
            phase: 0.0,
        },
        Surface::Linear {
            intercept: 0.0,
            time: 0.0,
            s1: 1.0,
            s2: -0.5,
        },
    ];
    if interaction > 0.0 {
        terms.push(Surface::Bilinear { scale: interaction });
    }
    SimulationScenario {
        s,
        t,
        surfaces: vec![
            Surface::Sum { terms },
            Surface::Linear {
                intercept: 0.3,
                time: 0.02,
                s1: 0.0,
                s2: 0.4,
            },
        ],
        noise: Noise::Sd { sd: 0.5 },
        covariates: Default::default(),
        seed,
    }
}

fn design(s: usize, t: usize, m: usize, n: usize, seed: u64, interaction: f64) -> DesignMatrices<f64> {
    let panel = generate::<f64>(&scenario(s, t, seed, interaction)).unwrap().panel;
    let knots = KnotLayout::new(
        select_temporal_knots(&panel.times, m).unwrap(),
        select_spatial_knots(&panel.locations, n, seed).unwrap(),
    )
    .unwrap();
    assemble_design(&panel, &knots).unwrap()
}

fn model(seed: u64) -> FittedModel<f64> {
    fit_reml(&design(20, 8, 4, 4, seed, 0.0), &FitOptions::default()).unwrap()
}

fn times(t: usize, k: usize) -> BandGrid {
    BandGrid::Times(
        (0..k)
            .map(|i| 1.0 + (t as f64 - 1.0) * i as f64 / (k - 1) as f64)
            .collect(),
    )
}

#[test]
fn lower_level_band_nests_higher_level_band() {
    let m = model(1);
    let grid = times(8, 25);
    let wide = simultaneous_band(&m, 0, Part::Temporal, &grid, 0.05, 4000, 3).unwrap();
    let narrow = simultaneous_band(&m, 0, Part::Temporal, &grid, 0.10, 4000, 3).unwrap();
    assert!(wide.critical_value >= narrow.critical_value);
    for g in 0..grid.len() {
        assert!(wide.lower[g] <= narrow.lower[g] && wide.upper[g] >= narrow.upper[g]);
    }
    let w = significance_map(&wide);
    let n = significance_map(&narrow);
    for (a, b) in w.iter().zip(&n) {
        if *a != Significance::NotSignificant {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn band_is_at_least_pointwise_width() {
    let m = model(2);
    let grid = BandGrid::Locations(vec![[0.1, 0.1], [0.5, 0.5], [0.9, 0.2], [0.3, 0.7], [0.8, 0.9]]);
    let band = simultaneous_band(&m, 1, Part::Spatial, &grid, 0.05, 4000, 5).unwrap();
    for (g, w) in band.width().iter().enumerate() {
        assert!(*w >= 2.0 * 1.959963984540054 * band.se[g] - 1e-12);
    }
}

#[test]
fn critical_value_matches_order_statistic() {
    let cov = DMatrix::<f64>::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 2.0, 0.1, 0.2, 0.1, 0.7]);
    let mut draws = max_modulus_draws(&cov, 1000, 9).unwrap();
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(critical_value(&draws, 0.05), draws[949]);
    assert_eq!(critical_value(&draws, 0.5), draws[499]);
    let (_, lo, hi, _, c) = band_from_moments(&DVector::zeros(3), &cov, 0.05, 1000, 9).unwrap();
    assert_eq!(c, draws[949]);
    for i in 0..3 {
        assert!((hi[i] - c * cov[(i, i)].sqrt()).abs() < 1e-12 && (lo[i] + hi[i]).abs() < 1e-12);
    }
}

#[test]
fn band_argument_errors() {
    let m = model(3);
    let grid = times(8, 5);
    assert!(matches!(
        simultaneous_band(&m, 0, Part::Temporal, &grid, 1.0, 2000, 1),
        Err(InferenceError::InvalidLevel(_))
    ));
    assert!(matches!(
        simultaneous_band(&m, 0, Part::Temporal, &grid, 0.05, 10, 1),
        Err(InferenceError::TooFewDraws { .. })
    ));
    assert!(matches!(
        simultaneous_band(&m, 0, Part::Temporal, &BandGrid::Times(vec![]), 0.05, 2000, 1),
        Err(InferenceError::EmptyGrid)
    ));
    let zero = DMatrix::<f64>::zeros(2, 2);
    assert!(matches!(
        band_from_moments(&DVector::zeros(2), &zero, 0.05, 1000, 1),
        Err(InferenceError::SingularCovariance)
    ));
}

#[test]
fn small_coverage_check() {
    let t = 10;
    let mut covered = 0;
    for seed in 0..30u64 {
        let sc = SimulationScenario {
            s: 20,
            t,
            surfaces: vec![Surface::Sum {
                terms: vec![
                    Surface::TemporalSine {
                        amplitude: 1.0,
                        frequency: 0.6,
                        phase: 0.0,
                    },
                    Surface::Linear {
                        intercept: 0.0,
                        time: 0.0,
                        s1: 0.5,
                        s2: -0.5,
                    },
                ],
            }],
            noise: Noise::Sd { sd: 0.7 },
            covariates: Default::default(),
            seed: 500 + seed,
        };
        let panel = generate::<f64>(&sc).unwrap().panel;
        let knots = KnotLayout::new(
            select_temporal_knots(&panel.times, 5).unwrap(),
            select_spatial_knots(&panel.locations, 4, seed).unwrap(),
        )
        .unwrap();
        let m = fit_reml(&assemble_design(&panel, &knots).unwrap(), &FitOptions::default()).unwrap();
        let grid = times(t, 28);
        let band = simultaneous_band(&m, 0, Part::Temporal, &grid, 0.05, 2000, seed).unwrap();
        let BandGrid::Times(g) = &grid else { unreachable!() };
        let truth: Vec<f64> = g.iter().map(|x| (0.6 * x).sin()).collect();
        if band.contains(&truth) {
            covered += 1;
        }
    }
    // 30 draws at 0.95: P(X ≤ 24) < 0.002
    assert!(covered >= 25, "{covered}/30");
}

#[test]
fn constant_classification_implies_linear_feasibility() {
    let m = model(4);
    for gamma in [0.01, 0.05, 0.2, 0.5] {
        let band = simultaneous_band(&m, 1, Part::Temporal, &times(8, 15), gamma, 2000, 1).unwrap();
        let v = classify_shape(&band).unwrap();
        if v.shape == Shape::Constant {
            let w = v.witness.unwrap();
            let BandGrid::Times(g) = &band.grid else { unreachable!() };
            for (i, x) in g.iter().enumerate() {
                let y = w.eval(&[*x]);
                assert!(band.lower[i] <= y && y <= band.upper[i]);
            }
            assert!(stvcm::inference::shape::line_fit(g, &band.lower, &band.upper).is_some());
        }
    }
}

#[test]
fn rlrt_invariant_to_fixed_effect_shift() {
    let d = design(25, 6, 3, 3, 7, 2.0);
    let fits = InteractionFits::new(&d, 0).unwrap();
    let opts = RemlOptions::default();
    let (n0, f0) = fits.fit_pair(&d.response, &opts, &opts).unwrap();
    let base = InteractionFits::statistic(&n0, &f0);
    let c = DVector::from_fn(d.n_fixed(), |i, _| 0.3 * i as f64 - 1.0);
    let shifted = &d.response + &d.fixed * c;
    let (n1, f1) = fits.fit_pair(&shifted, &opts, &opts).unwrap();
    let moved = InteractionFits::statistic(&n1, &f1);
    assert!(base > 0.0);
    assert!((base - moved).abs() < 1e-6 * base.max(1.0), "{base} vs {moved}");
}

#[test]
fn rlrt_p_value_and_arguments() {
    let d = design(20, 5, 3, 3, 8, 0.0);
    let opts = InteractionTestOptions {
        n_boot: 40,
        seed: 3,
        reml: RemlOptions::default(),
    };
    let t = test_interaction_design(&d, 0, &opts).unwrap();
    assert!(t.p_value > 0.0 && t.p_value <= 1.0);
    assert_eq!(t.p_value, (1 + t.exceedances) as f64 / 41.0);
    assert!(t.rlrt_stat >= 0.0);
    assert!(matches!(
        test_interaction_design(&d, 5, &opts),
        Err(InferenceError::Model(_))
    ));
    let panel = generate::<f64>(&scenario(10, 4, 1, 0.0)).unwrap().panel;
    let knots = KnotLayout::new(vec![1.5, 3.0], select_spatial_knots(&panel.locations, 2, 1).unwrap()).unwrap();
    assert!(matches!(
        test_interaction(&panel, &knots, 0, 100, 1),
        Err(InferenceError::TooFewBootstrap { .. })
    ));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let d = design(20, 5, 3, 3, 9, 1.0);
    let m = fit_reml(&d, &FitOptions::default()).unwrap();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let opts = InteractionTestOptions {
                    n_boot: 24,
                    seed: 11,
                    reml: RemlOptions::default(),
                };
                let test = test_interaction_design(&d, 0, &opts).unwrap();
                let band = simultaneous_band(&m, 0, Part::Temporal, &times(5, 9), 0.05, 3000, 4).unwrap();
                (
                    serde_json::to_string(&test).unwrap(),
                    serde_json::to_string(&band).unwrap(),
                )
            })
    };
    let one = run(1);
    assert_eq!(one, run(2));
    assert_eq!(one, run(8));
}
