//! Subcommand bodies.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use stvcm::accessibility::{accessibility_panel, cost_weight_pairs, estimate_beta, HuberOptions, RateField};
use stvcm::basis::{
    assemble_design, default_separation, select_spatial_knots, select_temporal_knots, separate_knots, KnotLayout,
};
use stvcm::inference::io::{band_csv, significance_csv};
use stvcm::inference::rlrt::MIN_BOOTSTRAP;
use stvcm::inference::{
    classify_shape, simultaneous_band, test_interaction_design, BandGrid, ConfidenceBand, InteractionTestOptions,
};
use stvcm::mixedmodel::{
    fit_reml, residual_diagnostics, FitOptions, FitStatus, FittedModel, Part, RemlOptions, MODEL_FORMAT,
};
use stvcm::multilevel::{
    fit_multilevel as fit_ml, joint_bands, MultilevelFit, MultilevelOptions, Target, MULTILEVEL_FORMAT,
};
use stvcm::panel::SpaceTimePanel;
use stvcm::simulate::{generate, generate_multilevel, SimulationScenario, Surface};

use crate::access::{read_communities, read_network, read_rate, read_sites};
use crate::error::{code, CliError, Result};
use crate::io::{
    json_head, meta_header, multilevel_panel_csv, panel_csv, parse_f64, read_multilevel_panel, read_panel, read_text,
    sha256_hex, write_text, Provenance, CSV_VERSION, MULTILEVEL_PANEL_FORMAT, PANEL_FORMAT,
};
use crate::{AccessArgs, BandArgs, FitArgs, GridArgs, MultilevelArgs, PartArg, SimulateArgs, TestArgs};

pub const ACCESS_FORMAT: &str = "stvcm.access";
pub const BANDS_FORMAT: &str = "stvcm.bands";
pub const SIGNIFICANCE_FORMAT: &str = "stvcm.significance";
pub const SHAPE_FORMAT: &str = "stvcm.shape";
pub const TEST_FORMAT: &str = "stvcm.interaction_test";
pub const COEFFICIENTS_FORMAT: &str = "stvcm.coefficients";
pub const TRUTH_FORMAT: &str = "stvcm.truth";
pub const DIAGNOSTICS_FORMAT: &str = "stvcm.diagnostics";
pub const ARTIFACT_VERSION: u32 = 1;

/// Hash of the command name, its settings (output paths and thread count
/// excluded) and the bytes of every input file.
fn config_hash<A: Serialize>(command: &str, args: &A, inputs: &[Option<&Path>]) -> Result<String> {
    let mut text = format!(
        "{command}\n{}\n",
        serde_json::to_string(args).expect("arguments serialize")
    );
    for p in inputs.iter().flatten() {
        let bytes = std::fs::read(p).map_err(|e| CliError::data(format!("cannot read {}: {e}", p.display())))?;
        writeln!(text, "{}", sha256_hex(&bytes)).unwrap();
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn prov(format: &'static str, hash: &str, seed: u64) -> Provenance {
    Provenance {
        format,
        version: ARTIFACT_VERSION,
        config_hash: hash.to_string(),
        seed,
    }
}

fn check_level(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "{name} must lie strictly between 0 and 1, got {v}"
        )))
    }
}

fn predictor_index(r: usize, count: usize) -> Result<usize> {
    if r == 0 || r > count {
        return Err(CliError::usage(format!(
            "--predictor must be between 1 and {count}, got {r}"
        )));
    }
    Ok(r - 1)
}

/// Twelve significant digits, printed in shortest form.
fn sig12(v: f64) -> String {
    let r: f64 = format!("{v:.11e}").parse().unwrap();
    (r + 0.0).to_string()
}

pub fn access(a: &AccessArgs) -> Result<()> {
    let pop_path = a
        .population
        .as_deref()
        .filter(|s| s.parse::<f64>().is_err())
        .map(Path::new);
    let svc_path = a
        .service
        .as_deref()
        .filter(|s| s.parse::<f64>().is_err())
        .map(Path::new);
    let hash = config_hash(
        "access",
        a,
        &[
            Some(&a.sites),
            Some(&a.communities),
            pop_path,
            svc_path,
            a.road_nodes.as_deref(),
            a.road_edges.as_deref(),
        ],
    )?;
    if a.q == 0 {
        return Err(CliError::usage("--q must be at least 1"));
    }
    let network = read_network(read_sites(&a.sites)?, a.road_nodes.as_deref(), a.road_edges.as_deref())?;
    let communities = read_communities(&a.communities)?;
    let rates = RateField {
        population: read_rate(a.population.as_deref(), a.bandwidth)?,
        service: read_rate(a.service.as_deref(), a.bandwidth)?,
    };
    let (beta, estimated) = if a.beta == "estimate" {
        let pairs = cost_weight_pairs(&network, &communities, &rates, a.q)?;
        let costs: Vec<f64> = pairs.iter().map(|p| p.cost).collect();
        let weights: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
        let est = estimate_beta(&costs, &weights, &HuberOptions::default())?;
        if !est.converged {
            log::warn!("robust beta fit stopped after {} iterations", est.iterations);
        }
        (est.beta, true)
    } else {
        let b: f64 = a
            .beta
            .parse()
            .map_err(|_| CliError::usage(format!("--beta must be a number or \"estimate\", got '{}'", a.beta)))?;
        (b, false)
    };
    let panel = accessibility_panel(&network, &communities, &rates, a.q, beta)?;
    let meta = prov(ACCESS_FORMAT, &hash, a.seed).meta(&[
        ("q", a.q.to_string()),
        ("beta", (beta + 0.0).to_string()),
        ("beta_estimated", estimated.to_string()),
    ]);
    let mut out = meta_header(&meta);
    out.push_str("community_id,year,value\n");
    for (s, id) in panel.community_ids.iter().enumerate() {
        for (k, y) in panel.years.iter().enumerate() {
            writeln!(out, "{id},{y},{}", sig12(panel.value(s, k))).unwrap();
        }
    }
    write_text(&a.out, &out)
}

fn default_knots(
    panel_times: &[f64],
    locations: &[[f64; 2]],
    m: Option<usize>,
    n: Option<usize>,
    seed: u64,
) -> Result<KnotLayout<f64>> {
    let t = panel_times.len();
    let m = m.unwrap_or_else(|| 7.min(t.saturating_sub(1)).max(1));
    let n = n.unwrap_or_else(|| 50.min(locations.len().div_ceil(4)).max(1));
    if m == 0 || n == 0 {
        return Err(CliError::usage("knot counts must be positive"));
    }
    Ok(KnotLayout::new(
        select_temporal_knots(panel_times, m)?,
        select_spatial_knots(locations, n, seed)?,
    )?)
}

fn read_knots(path: &Path) -> Result<KnotLayout<f64>> {
    KnotLayout::from_json(&read_text(path)?).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

fn panel_cells(panel_times: &[f64], locations: &[[f64; 2]]) -> Vec<(f64, [f64; 2])> {
    panel_times
        .iter()
        .flat_map(|t| locations.iter().map(move |s| (*t, *s)))
        .collect()
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let hash = config_hash("fit", a, &[Some(&a.panel), a.knots.as_deref()])?;
    let panel = read_panel(&a.panel)?;
    let knots = match &a.knots {
        Some(p) => read_knots(p)?,
        None => default_knots(
            &panel.times,
            &panel.locations,
            a.knots_temporal,
            a.knots_spatial,
            a.seed,
        )?,
    };
    let design = assemble_design(&panel, &knots)?;
    let model = fit_reml(&design, &FitOptions::default())?;
    if model.convergence.status == FitStatus::Stalled {
        log::warn!(
            "REML optimizer stopped at rounding level (gradient {})",
            model.convergence.grad_norm
        );
    }
    let p = prov(MODEL_FORMAT, &hash, a.seed);
    write_text(&a.out, &p.stamp_json(&model.to_json()))?;
    if let Some(path) = &a.knots_out {
        write_text(path, &p.stamp_json(&knots.to_json()))?;
    }
    if let Some(path) = &a.coefficients {
        write_text(path, &coefficient_csv(&model, &panel, &hash, a.seed)?)?;
    }
    if let Some(path) = &a.diagnostics {
        let d = residual_diagnostics(&model, &design, &panel);
        let doc = json!({
            "format": DIAGNOSTICS_FORMAT,
            "version": ARTIFACT_VERSION,
            "diagnostics": d,
            "location_ids": panel.location_ids,
        });
        write_text(path, &p.stamp_json(&serde_json::to_string_pretty(&doc).unwrap()))?;
    }
    log::info!("fit {} rows, REML log-likelihood {}", model.n_obs, model.loglik_reml);
    Ok(())
}

fn coefficient_csv(model: &FittedModel<f64>, panel: &SpaceTimePanel<f64>, hash: &str, seed: u64) -> Result<String> {
    let grid = panel_cells(&panel.times, &panel.locations);
    let mut out = meta_header(&prov(COEFFICIENTS_FORMAT, hash, seed).meta(&[]));
    out.push_str("predictor,location_id,time,temporal,spatial,interaction,total\n");
    for r in 0..model.n_predictors {
        let c = model.evaluate_coefficient(r, &grid)?;
        for (g, (t, _)) in grid.iter().enumerate() {
            let id = &panel.location_ids[g % panel.locations.len()];
            writeln!(
                out,
                "{},{id},{t},{},{},{},{}",
                r + 1,
                c.temporal[g],
                c.spatial[g],
                c.interaction[g],
                c.total[g]
            )
            .unwrap();
        }
    }
    Ok(out)
}

enum Loaded {
    Single(FittedModel<f64>),
    Multi(MultilevelFit<f64>),
}

fn load_model(path: &Path) -> Result<Loaded> {
    let text = read_text(path)?;
    let (format, _) = json_head(&text, path)?;
    let ctx = |e: CliError| e.context(&path.display().to_string());
    if format == MULTILEVEL_FORMAT {
        MultilevelFit::from_json(&text)
            .map(Loaded::Multi)
            .map_err(|e| ctx(e.into()))
    } else if format == MODEL_FORMAT {
        FittedModel::from_json(&text)
            .map(Loaded::Single)
            .map_err(|e| ctx(e.into()))
    } else {
        Err(CliError::new(
            code::VERSION,
            format!("{}: unknown artifact format '{format}'", path.display()),
        ))
    }
}

fn part_of(p: PartArg) -> Part {
    match p {
        PartArg::Temporal => Part::Temporal,
        PartArg::Spatial => Part::Spatial,
        PartArg::Full => Part::Full,
    }
}

/// Times, locations and location ids of either panel format.
fn grid_source(path: &Path) -> Result<(Vec<f64>, Vec<[f64; 2]>, Ids)> {
    let text = read_text(path)?;
    let multilevel = text
        .lines()
        .find(|l| !l.starts_with('#'))
        .is_some_and(|h| h.split(',').next().map(str::trim) == Some("provider"));
    if multilevel {
        let p = read_multilevel_panel(path)?;
        Ok((p.times, p.locations, p.location_ids))
    } else {
        let p = read_panel(path)?;
        Ok((p.times, p.locations, p.location_ids))
    }
}

fn parse_times(spec: &str) -> Result<Vec<f64>> {
    let bad = || CliError::usage(format!("--grid-times expects start:end:count, got '{spec}'"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let k: usize = parts[2].parse().map_err(|_| bad())?;
    if k == 0 || !a.is_finite() || !b.is_finite() || (k == 1 && a != b) {
        return Err(bad());
    }
    Ok((0..k)
        .map(|i| {
            if k == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (k - 1) as f64
            }
        })
        .collect())
}

fn read_grid_file(path: &Path, part: Part) -> Result<(BandGrid, Option<Vec<String>>)> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |n: &str| header.iter().position(|h| h == n);
    let need = |n: &str| col(n).ok_or_else(|| CliError::data(format!("{}: missing column '{n}'", path.display())));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect::<Vec<_>>()));
    }
    let num = |r: &Vec<String>, c: usize, what: &str, line: usize| parse_f64(&r[c], what, path, line);
    match part {
        Part::Temporal => {
            let t = need("t")?;
            Ok((
                BandGrid::Times(rows.iter().map(|(l, r)| num(r, t, "t", *l)).collect::<Result<_>>()?),
                None,
            ))
        }
        Part::Spatial => {
            let (a, b) = (need("s1")?, need("s2")?);
            let pts = rows
                .iter()
                .map(|(l, r)| Ok([num(r, a, "s1", *l)?, num(r, b, "s2", *l)?]))
                .collect::<Result<_>>()?;
            let ids = col("location_id").map(|c| rows.iter().map(|(_, r)| r[c].clone()).collect());
            Ok((BandGrid::Locations(pts), ids))
        }
        Part::Full => {
            let (t, a, b) = (need("t")?, need("s1")?, need("s2")?);
            let pts = rows
                .iter()
                .map(|(l, r)| Ok((num(r, t, "t", *l)?, [num(r, a, "s1", *l)?, num(r, b, "s2", *l)?])))
                .collect::<Result<_>>()?;
            Ok((BandGrid::SpaceTime(pts), None))
        }
    }
}

/// Evaluation grid and, for location grids, location ids.
fn resolve_grid(g: &GridArgs, part: Part) -> Result<(BandGrid, Option<Vec<String>>)> {
    let given = [g.grid.is_some(), g.grid_times.is_some(), g.panel.is_some()]
        .iter()
        .filter(|v| **v)
        .count();
    if given != 1 {
        return Err(CliError::usage("give exactly one of --grid, --grid-times, --panel"));
    }
    if let Some(p) = &g.grid {
        return read_grid_file(p, part);
    }
    if let Some(spec) = &g.grid_times {
        let times = parse_times(spec)?;
        return match part {
            Part::Temporal => Ok((BandGrid::Times(times), None)),
            _ => Err(CliError::usage("--grid-times applies to temporal bands")),
        };
    }
    let (times, locations, ids) = grid_source(g.panel.as_ref().unwrap())?;
    match part {
        Part::Temporal => Ok((BandGrid::Times(times), None)),
        Part::Spatial => Ok((BandGrid::Locations(locations), Some(ids))),
        Part::Full => {
            if let Some(t) = g.at_time {
                Ok((
                    BandGrid::SpaceTime(locations.iter().map(|s| (t, *s)).collect()),
                    Some(ids),
                ))
            } else if let Some(id) = &g.at_location {
                let j = ids
                    .iter()
                    .position(|v| v == id)
                    .ok_or_else(|| CliError::usage(format!("unknown location '{id}'")))?;
                Ok((
                    BandGrid::SpaceTime(times.iter().map(|t| (*t, locations[j])).collect()),
                    None,
                ))
            } else {
                Ok((BandGrid::SpaceTime(panel_cells(&times, &locations)), None))
            }
        }
    }
}

type Ids = Vec<String>;
/// Bands tagged with their provider name, `None` for single-level models.
type NamedBands = Vec<(Option<String>, ConfidenceBand)>;

/// Bands for a single-level model, or one per provider for a multilevel fit.
fn compute_bands(a: &BandArgs) -> Result<(NamedBands, Option<Ids>)> {
    check_level("--level", a.level)?;
    let part = part_of(a.part);
    let (grid, ids) = resolve_grid(&a.grid, part)?;
    match load_model(&a.model)? {
        Loaded::Single(m) => {
            let r = predictor_index(a.predictor, m.n_predictors)?;
            let band = simultaneous_band(&m, r, part, &grid, a.level, a.draws, a.seed)?;
            Ok((vec![(None, band)], ids))
        }
        Loaded::Multi(m) => {
            check_level("--joint-level", a.joint_level)?;
            let r = predictor_index(a.predictor, m.n_predictors)?;
            let bands = joint_bands(&m, r, part, a.combined, a.joint_level, &grid, a.draws, a.seed)?;
            Ok((m.providers.iter().cloned().map(Some).zip(bands).collect(), ids))
        }
    }
}

fn band_inputs(a: &BandArgs) -> [Option<&Path>; 3] {
    [Some(a.model.as_path()), a.grid.grid.as_deref(), a.grid.panel.as_deref()]
}

pub fn bands(a: &BandArgs) -> Result<()> {
    let hash = config_hash("bands", a, &band_inputs(a))?;
    let (bands, ids) = compute_bands(a)?;
    let p = prov(BANDS_FORMAT, &hash, a.seed);
    let extra = |b: &ConfidenceBand| {
        vec![
            ("predictor", a.predictor.to_string()),
            (
                "part",
                serde_json::to_value(a.part).unwrap().as_str().unwrap().to_string(),
            ),
            ("coverage", b.level.to_string()),
            ("critical_value", b.critical_value.to_string()),
            ("draws", b.n_draws.to_string()),
        ]
    };
    let out = if bands.len() == 1 && bands[0].0.is_none() {
        band_csv(&bands[0].1, &p.meta(&extra(&bands[0].1)))
    } else {
        let mut meta = extra(&bands[0].1);
        meta.retain(|(k, _)| *k != "critical_value");
        meta.push(("joint_level", a.joint_level.to_string()));
        meta.push(("target", if a.combined { "combined" } else { "deviation" }.to_string()));
        let mut out = meta_header(&p.meta(&meta));
        for (k, (name, band)) in bands.iter().enumerate() {
            let body = band_csv(band, &[]);
            let mut lines = body.lines();
            let head = lines.next().unwrap();
            if k == 0 {
                writeln!(out, "provider,{head},critical_value").unwrap();
            }
            for l in lines {
                writeln!(out, "{},{l},{}", name.as_deref().unwrap(), band.critical_value).unwrap();
            }
        }
        out
    };
    write_text(&a.out, &out)?;
    if let Some(path) = &a.significance {
        let ids = ids.ok_or_else(|| CliError::usage("--significance needs a location grid with location ids"))?;
        let mut out = String::new();
        for (k, (name, band)) in bands.iter().enumerate() {
            let meta = [
                ("predictor", a.predictor.to_string()),
                ("coverage", band.level.to_string()),
            ];
            let body = significance_csv(&ids, band, &[]);
            if k == 0 {
                out = significance_csv(&ids, band, &prov(SIGNIFICANCE_FORMAT, &hash, a.seed).meta(&meta));
                if name.is_some() {
                    out = prefix_provider(&out, name.as_deref().unwrap(), true);
                }
            } else {
                out.push_str(&prefix_provider(&body, name.as_deref().unwrap(), false));
            }
        }
        write_text(path, &out)?;
    }
    Ok(())
}

fn prefix_provider(csv: &str, provider: &str, keep_header: bool) -> String {
    let mut out = String::new();
    let mut header_seen = false;
    for l in csv.lines() {
        if l.starts_with('#') {
            writeln!(out, "{l}").unwrap();
        } else if !header_seen {
            header_seen = true;
            if keep_header {
                writeln!(out, "provider,{l}").unwrap();
            }
        } else {
            writeln!(out, "{provider},{l}").unwrap();
        }
    }
    out
}

pub fn shape(a: &BandArgs) -> Result<()> {
    let hash = config_hash("shape", a, &band_inputs(a))?;
    let (bands, _) = compute_bands(a)?;
    let verdicts = bands
        .iter()
        .map(|(name, band)| {
            let v = classify_shape(band)?;
            Ok(json!({
                "provider": name,
                "shape": v.shape,
                "witness": v.witness,
                "coverage": v.level,
                "critical_value": band.critical_value,
                "draws": band.n_draws,
                "band_seed": band.seed,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let doc = json!({
        "format": SHAPE_FORMAT,
        "version": ARTIFACT_VERSION,
        "predictor": a.predictor,
        "part": a.part,
        "level": a.level,
        "verdicts": verdicts,
    });
    let p = prov(SHAPE_FORMAT, &hash, a.seed);
    write_text(&a.out, &p.stamp_json(&serde_json::to_string_pretty(&doc).unwrap()))
}

pub fn test_interaction(a: &TestArgs) -> Result<()> {
    let hash = config_hash("test-interaction", a, &[Some(&a.panel), a.model.as_deref()])?;
    if a.boot < MIN_BOOTSTRAP {
        return Err(CliError::usage(format!("--boot must be at least {MIN_BOOTSTRAP}")));
    }
    let panel = read_panel(&a.panel)?;
    let knots = match &a.model {
        Some(p) => match load_model(p)? {
            Loaded::Single(m) => m.knots,
            Loaded::Multi(_) => return Err(CliError::usage("the interaction test needs a single-level model")),
        },
        None => default_knots(
            &panel.times,
            &panel.locations,
            a.knots_temporal,
            a.knots_spatial,
            a.seed,
        )?,
    };
    let r = predictor_index(a.predictor, panel.n_predictors())?;
    let design = assemble_design(&panel, &knots)?;
    let opts = InteractionTestOptions {
        n_boot: a.boot,
        seed: a.seed,
        reml: RemlOptions::default(),
    };
    let test = test_interaction_design(&design, r, &opts)?;
    let doc = json!({
        "format": TEST_FORMAT,
        "version": ARTIFACT_VERSION,
        "predictor": a.predictor,
        "rlrt_stat": test.rlrt_stat,
        "p_value": test.p_value,
        "null_draws": test.null_draws,
        "exceedances": test.exceedances,
        "loglik_null": test.loglik_null,
        "loglik_full": test.loglik_full,
        "method": test.method,
    });
    write_text(
        &a.out,
        &prov(TEST_FORMAT, &hash, a.seed).stamp_json(&serde_json::to_string_pretty(&doc).unwrap()),
    )
}

pub fn fit_multilevel(a: &MultilevelArgs) -> Result<()> {
    let hash = config_hash("fit-multilevel", a, &[Some(&a.panel), a.knots.as_deref()])?;
    let panel = read_multilevel_panel(&a.panel)?;
    let knots = match &a.knots {
        Some(p) => read_knots(p)?,
        None => {
            let base = default_knots(
                &panel.times,
                &panel.locations,
                a.knots_temporal,
                a.knots_spatial,
                a.seed,
            )?;
            let (dt, ds) = default_separation(&base, panel.n_providers());
            let dt = a.sep_temporal.unwrap_or(dt);
            let ds = a.sep_spatial.unwrap_or(ds);
            separate_knots(&base, panel.n_providers(), dt, ds, a.seed)?
        }
    };
    let fit = fit_ml(&panel, &knots, &MultilevelOptions::default())?;
    let p = prov(MULTILEVEL_FORMAT, &hash, a.seed);
    write_text(&a.out, &p.stamp_json(&fit.to_json()))?;
    if let Some(path) = &a.knots_out {
        write_text(path, &p.stamp_json(&knots.to_json()))?;
    }
    if let Some(path) = &a.coefficients {
        let grid = panel_cells(&panel.times, &panel.locations);
        let mut out = meta_header(&prov(COEFFICIENTS_FORMAT, &hash, a.seed).meta(&[]));
        out.push_str("provider,predictor,location_id,time,global,deviation,combined\n");
        for r in 0..fit.n_predictors {
            let global = fit.evaluate(r, Part::Full, Target::Global, &grid)?;
            for (q, name) in fit.providers.iter().enumerate() {
                let dev = fit.evaluate(r, Part::Full, Target::Deviation(q), &grid)?;
                let comb = fit.evaluate(r, Part::Full, Target::Combined(q), &grid)?;
                for (g, (t, _)) in grid.iter().enumerate() {
                    let id = &panel.location_ids[g % panel.locations.len()];
                    writeln!(out, "{name},{},{id},{t},{},{},{}", r + 1, global[g], dev[g], comb[g]).unwrap();
                }
            }
        }
        write_text(path, &out)?;
    }
    log::info!("multilevel fit: constraint residual {}", fit.constraints_residual);
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let hash = config_hash("simulate", a, &[a.scenario.as_deref(), a.deviations.as_deref()])?;
    let mut scenario = match &a.scenario {
        Some(p) => SimulationScenario::from_json(&read_text(p)?)
            .map_err(|e| CliError::from(e).context(&p.display().to_string()))?,
        None => SimulationScenario::default_two_predictor(a.s, a.t, 0),
    };
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    let r = scenario.surfaces.len();
    let deviations: Option<Vec<Vec<Surface>>> = match &a.deviations {
        Some(p) => Some(
            serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::data(format!("{}: deviation surfaces: {e}", p.display())))?,
        ),
        None if a.providers > 1 => Some(vec![vec![Surface::Constant { value: 0.0 }; r]; a.providers]),
        None => None,
    };
    let seed = scenario.seed;
    let (panel_text, truth_text) = match deviations {
        None => {
            let sim = generate::<f64>(&scenario)?;
            let meta = prov(PANEL_FORMAT, &hash, seed).meta(&[("noise_sd", sim.noise_sd.to_string())]);
            let p = &sim.panel;
            let mut truth = meta_header(&prov(TRUTH_FORMAT, &hash, seed).meta(&[]));
            truth.push_str("predictor,location_id,time,value\n");
            for (k, surf) in sim.truth.iter().enumerate() {
                for (c, v) in surf.iter().enumerate() {
                    let (i, j) = p.cell_coords(c);
                    writeln!(truth, "{},{},{},{v}", k + 1, p.location_ids[j], p.times[i]).unwrap();
                }
            }
            (panel_csv(p, &meta), truth)
        }
        Some(devs) => {
            let sim = generate_multilevel::<f64>(&scenario, &devs)?;
            let meta = Provenance {
                format: MULTILEVEL_PANEL_FORMAT,
                version: CSV_VERSION,
                config_hash: hash.clone(),
                seed,
            }
            .meta(&[("noise_sd", sim.noise_sd.to_string())]);
            let p = &sim.panel;
            let s = p.locations.len();
            let mut truth = meta_header(&prov(TRUTH_FORMAT, &hash, seed).meta(&[]));
            truth.push_str("provider,predictor,location_id,time,global,deviation\n");
            for (q, name) in p.providers.iter().enumerate() {
                for k in 0..r {
                    for c in 0..sim.global[k].len() {
                        let (i, j) = (c / s, c % s);
                        writeln!(
                            truth,
                            "{name},{},{},{},{},{}",
                            k + 1,
                            p.location_ids[j],
                            p.times[i],
                            sim.global[k][c],
                            sim.deviations[q][k][c]
                        )
                        .unwrap();
                    }
                }
            }
            (multilevel_panel_csv(p, &meta), truth)
        }
    };
    write_text(&a.out, &panel_text)?;
    if let Some(path) = &a.truth {
        write_text(path, &truth_text)?;
    }
    Ok(())
}
