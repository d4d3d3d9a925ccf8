use nalgebra::{DMatrix, DVector};

use stvcm::basis::{
    assemble_design, default_separation, select_spatial_knots, select_temporal_knots, separate_knots, BasisConfig,
    BasisError, KnotFamily, KnotLayout,
};
use stvcm::inference::band::{band_from_moments, simultaneous_band};
use stvcm::inference::BandGrid;
use stvcm::mixedmodel::{fit_reml, FitOptions, Part, RemlOptions, RemlProblem};
use stvcm::multilevel::{
    bonferroni_bands, deviation_components, fit_multilevel, joint_bands, MultilevelError, MultilevelFit,
    MultilevelOptions, MultilevelPanel, Target,
};
use stvcm::rng::derive_seed;
use stvcm::simulate::{generate_multilevel, Noise, SimulatedMultilevel, SimulationScenario, Surface};

fn scenario(s: usize, t: usize, r: usize, sd: f64, seed: u64) -> SimulationScenario {
    let mut surfaces = vec![Surface::Sum {
        terms: vec![
            Surface::TemporalSine {
                amplitude: 1.0,
                frequency: 0.6,
                phase: 0.0,
            },
            Surface::Linear {
                intercept: 0.5,
                time: 0.0,
                s1: 1.0,
                s2: -0.5,
            },
        ],
    }];
    if r > 1 {
        surfaces.push(Surface::Linear {
            intercept: 0.3,
            time: 0.05,
            s1: -0.4,
            s2: 0.2,
        });
    }
    SimulationScenario {
        s,
        t,
        surfaces,
        noise: Noise::Sd { sd },
        covariates: Default::default(),
        seed,
    }
}

fn null_deviations(p: usize, r: usize) -> Vec<Vec<Surface>> {
    vec![vec![Surface::Constant { value: 0.0 }; r]; p]
}

fn layout(panel: &MultilevelPanel<f64>, m: usize, n: usize, seed: u64) -> KnotLayout<f64> {
    let base = KnotLayout::new(
        select_temporal_knots(&panel.times, m).unwrap(),
        select_spatial_knots(&panel.locations, n, seed).unwrap(),
    )
    .unwrap();
    let (dt, ds) = default_separation(&base, panel.n_providers());
    separate_knots(&base, panel.n_providers(), dt, ds, seed).unwrap()
}

fn sim(s: usize, t: usize, r: usize, sd: f64, devs: Vec<Vec<Surface>>, seed: u64) -> SimulatedMultilevel<f64> {
    generate_multilevel(&scenario(s, t, r, sd, seed), &devs).unwrap()
}

fn space_time_grid(fit: &MultilevelFit<f64>) -> Vec<(f64, [f64; 2])> {
    let mut g = Vec::new();
    for &t in &[0.5, 1.0, 2.7, 4.0, 6.25] {
        for s in [[0.1, 0.2], [0.5, 0.5], [0.9, 0.35], [0.33, 0.8]] {
            g.push((t, s));
        }
    }
    assert!(fit.n_providers() > 0);
    g
}

#[test]
fn identities_hold_on_every_fit() {
    for (seed, p, r) in [(1u64, 2usize, 1usize), (2, 3, 2), (3, 4, 1)] {
        let mut devs = null_deviations(p, r);
        devs[0][0] = Surface::Linear {
            intercept: 0.4,
            time: 0.1,
            s1: 0.0,
            s2: 0.3,
        };
        let data = sim(15, 6, r, 0.3, devs, seed);
        let knots = layout(&data.panel, 3, 3, seed);
        let sep = knots.separation();
        assert!(sep.is_clear());
        for a in 0..knots.n_families() {
            for b in 0..a {
                for x in knots.family_temporal(a) {
                    for y in knots.family_temporal(b) {
                        assert!((x - y).abs() > knots.min_temporal_sep.unwrap());
                    }
                }
                for x in knots.family_spatial(a) {
                    for y in knots.family_spatial(b) {
                        assert!(
                            ((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2)).sqrt() > knots.min_spatial_sep.unwrap()
                        );
                    }
                }
            }
        }
        let fit = fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()).unwrap();
        assert!(fit.constraints_residual < 1e-8, "residual {}", fit.constraints_residual);
        for k in 0..r {
            for f in 0..4 {
                let mean: f64 = (0..p).map(|q| fit.deviation_fixed_effects(k, q)[f]).sum::<f64>() / p as f64;
                assert!(mean.abs() < 1e-8);
            }
        }
        let grid = space_time_grid(&fit);
        for k in 0..r {
            for part in [Part::Temporal, Part::Spatial, Part::Full] {
                let global = fit.evaluate(k, part, Target::Global, &grid).unwrap();
                for q in 0..p {
                    let dev = fit.evaluate(k, part, Target::Deviation(q), &grid).unwrap();
                    let comb = fit.evaluate(k, part, Target::Combined(q), &grid).unwrap();
                    for g in 0..grid.len() {
                        let scale = 1.0f64.max(global[g].abs()).max(dev[g].abs());
                        assert!((comb[g] - global[g] - dev[g]).abs() <= 1e-12 * scale);
                    }
                }
            }
        }
    }
}

#[test]
fn identical_providers_have_no_fixed_deviation() {
    let data = sim(15, 6, 1, 0.3, null_deviations(2, 1), 11);
    let mut panel = data.panel.clone();
    panel.responses[1] = panel.responses[0].clone();
    let knots = layout(&panel, 3, 3, 11);
    let fit = fit_multilevel(&panel, &knots, &MultilevelOptions::default()).unwrap();
    let (a, b) = (fit.deviation_fixed_effects(0, 0), fit.deviation_fixed_effects(0, 1));
    for f in 0..4 {
        assert!(a[f].abs() < 1e-6, "{a:?}");
        assert!((a[f] + b[f]).abs() < 1e-12);
    }
}

#[test]
fn provider_specific_slope_is_recovered() {
    let (p, b) = (3usize, 0.15);
    let truth = |q: usize| {
        if q == 0 {
            b * (1.0 - 1.0 / p as f64)
        } else {
            -b / p as f64
        }
    };
    let mut within = 0;
    let mut others = Vec::new();
    for rep in 0..20u64 {
        let mut devs = null_deviations(p, 1);
        devs[0][0] = Surface::Linear {
            intercept: 0.0,
            time: b,
            s1: 0.0,
            s2: 0.0,
        };
        let data = sim(20, 8, 1, 0.5, devs, 100 + rep);
        let knots = layout(&data.panel, 3, 3, 100 + rep);
        let fit = fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()).unwrap();
        let (c, v) = fit.deviation_fixed_moments(0, 0).unwrap();
        let est = fit.deviation_fixed_effects(0, 0)[1];
        assert!((c[1] - est).abs() < 1e-12);
        let se = v[(1, 1)].sqrt();
        if (est - truth(0)).abs() <= 3.0 * se {
            within += 1;
        }
        for q in 1..p {
            others.push(fit.deviation_fixed_effects(0, q)[1] - truth(q));
        }
    }
    assert!(within >= 19, "{within}/20 within 3 s.e.");
    let mean = others.iter().sum::<f64>() / others.len() as f64;
    assert!(mean.abs() < 0.02, "mean error {mean}");
}

#[test]
fn pooled_fit_is_reproduced_without_deviations() {
    let data = sim(12, 5, 2, 0.4, null_deviations(2, 2), 21);
    let knots = layout(&data.panel, 3, 3, 21);
    let opts = MultilevelOptions {
        deviation_fixed: false,
        zero_components: deviation_components(2),
        ..Default::default()
    };
    let ml = fit_multilevel(&data.panel, &knots, &opts).unwrap();

    let base = KnotLayout::new(knots.temporal.clone(), knots.spatial.clone()).unwrap();
    let designs: Vec<_> = (0..2)
        .map(|p| assemble_design(&data.panel.provider_panel(p).unwrap(), &base).unwrap())
        .collect();
    let rows: usize = designs.iter().map(|d| d.n_rows()).sum();
    let mut x = DMatrix::zeros(rows, designs[0].n_fixed());
    let mut z = DMatrix::zeros(rows, designs[0].n_random());
    let mut y = DVector::zeros(rows);
    let mut at = 0;
    for d in &designs {
        x.rows_mut(at, d.n_rows()).copy_from(&d.fixed);
        z.rows_mut(at, d.n_rows()).copy_from(&d.random);
        y.rows_mut(at, d.n_rows()).copy_from(&d.response);
        at += d.n_rows();
    }
    let interaction: Vec<usize> = (0..2).map(|k| 3 * k + 2).collect();
    let problem = RemlProblem::new(
        &x,
        &z,
        &designs[0].component_columns(),
        &interaction,
        &designs[0].fixed_names,
    )
    .unwrap();
    let single = problem.fit(&y, &RemlOptions::default()).unwrap();

    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    for i in 0..8 {
        assert!(rel(ml.theta[i], single.theta[i]) < 1e-8 || (ml.theta[i] - single.theta[i]).abs() < 1e-10);
    }
    assert!(rel(ml.vc.sigma_eps2, single.sigma2) < 1e-8);
    assert!((ml.loglik_reml - single.loglik).abs() < 1e-8 * single.loglik.abs().max(1.0));
    for b in ml.blocks.iter().filter(|b| b.family == 0) {
        let cols = designs[0].block_index(b.predictor, b.kind).unwrap();
        for (a, c) in b.columns.clone().zip(cols) {
            assert!((ml.u[a] - single.u[c]).abs() < 1e-8 * (1.0 + single.u[c].abs()));
        }
    }
}

#[test]
fn separation_violation_is_an_identifiability_error() {
    let data = sim(12, 5, 1, 0.4, null_deviations(2, 1), 31);
    let mut knots = layout(&data.panel, 3, 3, 31);
    knots.providers[1] = KnotFamily {
        temporal: knots.temporal.clone(),
        spatial: knots.providers[1].spatial.clone(),
    };
    match fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()) {
        Err(MultilevelError::Basis(BasisError::Identifiability(sep))) => {
            assert_eq!(sep.temporal.len(), knots.m());
            assert!(sep.spatial.is_empty());
        }
        other => panic!("expected identifiability error, got {other:?}"),
    }
}

#[test]
fn mismatched_grids_are_rejected() {
    let data = sim(8, 4, 1, 0.4, null_deviations(2, 1), 41);
    let p = data.panel;
    let mut short = p.responses.clone();
    short[1].pop();
    assert!(matches!(
        MultilevelPanel::new(
            p.providers.clone(),
            p.location_ids.clone(),
            p.locations.clone(),
            p.times.clone(),
            short,
            p.covariates.clone()
        ),
        Err(MultilevelError::GridMismatch(_))
    ));
    assert!(matches!(
        MultilevelPanel::new(
            vec!["A".into()],
            p.location_ids.clone(),
            p.locations.clone(),
            p.times.clone(),
            vec![p.responses[0].clone()],
            p.covariates.clone()
        ),
        Err(MultilevelError::TooFewProviders(1))
    ));
}

#[test]
fn json_round_trip_and_version() {
    let data = sim(10, 4, 1, 0.4, null_deviations(2, 1), 51);
    let knots = layout(&data.panel, 2, 3, 51);
    let fit = fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()).unwrap();
    let text = fit.to_json();
    let back = MultilevelFit::<f64>::from_json(&text).unwrap();
    assert_eq!(back, fit);
    assert_eq!(back.to_json(), text);
    let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(
        MultilevelFit::<f64>::from_json(&bumped),
        Err(MultilevelError::Model(_))
    ));
}

#[test]
fn single_estimate_bonferroni_matches_simultaneous_band() {
    use stvcm::basis::assemble_design as design;
    use stvcm::simulate::generate;
    let sc = scenario(15, 6, 1, 0.4, 61);
    let panel = generate::<f64>(&sc).unwrap().panel;
    let knots = KnotLayout::new(
        select_temporal_knots(&panel.times, 3).unwrap(),
        select_spatial_knots(&panel.locations, 3, 1).unwrap(),
    )
    .unwrap();
    let model = fit_reml(&design(&panel, &knots).unwrap(), &FitOptions::default()).unwrap();
    let grid = BandGrid::Times((0..12).map(|i| 1.0 + i as f64 * 0.5).collect());
    let band = simultaneous_band(&model, 0, Part::Temporal, &grid, 0.05, 2000, 7).unwrap();
    let a = model.contrast(0, Part::Temporal, &grid.points()).unwrap();
    let joint = bonferroni_bands(&[model.contrast_moments(0, &a)], 0.05, 2000, 7).unwrap();
    assert_eq!(joint.len(), 1);
    assert_eq!(joint[0].1, band.lower);
    assert_eq!(joint[0].2, band.upper);
    assert_eq!(joint[0].4, band.critical_value);
}

#[test]
fn five_provider_bands_are_wider_than_marginal() {
    let data = sim(15, 6, 1, 0.4, null_deviations(5, 1), 71);
    let knots = layout(&data.panel, 3, 3, 71);
    let fit = fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()).unwrap();
    let grid = BandGrid::Times((0..11).map(|i| 1.0 + i as f64 * 0.5).collect());
    let bands = joint_bands(&fit, 0, Part::Temporal, false, 0.05, &grid, 2000, 9).unwrap();
    assert_eq!(bands.len(), 5);
    for (p, band) in bands.iter().enumerate() {
        assert!((band.level - 0.99).abs() < 1e-15);
        assert_eq!(band.seed, derive_seed(9, p as u64));
        let (c, v) = fit
            .moments(0, Part::Temporal, Target::Deviation(p), &grid.points())
            .unwrap();
        let (_, lo, hi, _, crit) = band_from_moments(&c, &v, 0.05, 2000, derive_seed(9, p as u64)).unwrap();
        assert!(band.critical_value > crit);
        for g in 0..lo.len() {
            assert!(band.lower[g] <= lo[g] && band.upper[g] >= hi[g]);
        }
    }
    assert!(matches!(
        joint_bands(&fit, 0, Part::Temporal, false, 1.0, &grid, 2000, 9),
        Err(MultilevelError::InvalidLevel(_))
    ));
}

#[test]
fn basis_config_is_recorded() {
    let data = sim(10, 4, 1, 0.4, null_deviations(2, 1), 81);
    let knots = layout(&data.panel, 2, 3, 81);
    let fit = fit_multilevel(&data.panel, &knots, &MultilevelOptions::default()).unwrap();
    assert_eq!(fit.basis, BasisConfig::default());
    assert_eq!(fit.vc.global_t2.len(), 1);
    assert_eq!(fit.vc.boundary.len(), 5);
}
