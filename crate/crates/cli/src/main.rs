//! `stvcm`: accessibility panels, space-time varying coefficient fits,
//! simultaneous bands, shape verdicts and interaction tests from the shell.

mod access;
mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "stvcm", version, about = "Space-time varying coefficient models")]
struct Cli {
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Utilization-adjusted accessibility panel from sites and communities.
    Access(AccessArgs),
    /// Fit the space-time varying coefficient model by REML.
    Fit(FitArgs),
    /// Simultaneous confidence bands for a fitted coefficient.
    Bands(BandArgs),
    /// Constant / linear / nonlinear verdict from a simultaneous band.
    Shape(BandArgs),
    /// Bootstrap restricted likelihood ratio test of no space-time interaction.
    TestInteraction(TestArgs),
    /// Fit global coefficients plus provider deviations.
    FitMultilevel(MultilevelArgs),
    /// Generate a synthetic panel with known coefficient surfaces.
    Simulate(SimulateArgs),
}

#[derive(Args, Serialize)]
pub struct AccessArgs {
    /// Sites CSV: year,x,y.
    #[arg(long)]
    #[serde(skip)]
    pub sites: PathBuf,
    /// Communities CSV: community_id,point_index,x,y.
    #[arg(long)]
    #[serde(skip)]
    pub communities: PathBuf,
    /// Population rate: a constant, a raster CSV (year,x,y,value) or a point CSV (year,x,y[,weight]).
    #[arg(long)]
    pub population: Option<String>,
    /// Service rate, in the same forms as --population.
    #[arg(long)]
    pub service: Option<String>,
    /// Kernel bandwidth for point rates; Silverman's rule when absent.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Road graph nodes CSV (node,x,y); distances are Euclidean without a graph.
    #[arg(long)]
    #[serde(skip)]
    pub road_nodes: Option<PathBuf>,
    /// Road graph edges CSV (from,to,length).
    #[arg(long)]
    #[serde(skip)]
    pub road_edges: Option<PathBuf>,
    /// Number of nearest sites averaged into the travel cost.
    #[arg(long, default_value_t = 3)]
    pub q: usize,
    /// Distance exponent, or "estimate" for a robust log-log fit.
    #[arg(long, default_value = "estimate")]
    pub beta: String,
    /// Seed recorded in the output header; the computation draws no random numbers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accessibility panel CSV.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct FitArgs {
    /// Panel CSV.
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    /// Temporal knots M (default min(7, T − 1)).
    #[arg(long)]
    pub knots_temporal: Option<usize>,
    /// Spatial knots N (default min(50, ⌈S/4⌉)).
    #[arg(long)]
    pub knots_spatial: Option<usize>,
    /// Knot layout JSON; replaces knot selection.
    #[arg(long)]
    #[serde(skip)]
    pub knots: Option<PathBuf>,
    /// Seed for spatial knot selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model JSON.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Coefficient surfaces on the panel grid (CSV).
    #[arg(long)]
    #[serde(skip)]
    pub coefficients: Option<PathBuf>,
    /// Residual diagnostics (JSON).
    #[arg(long)]
    #[serde(skip)]
    pub diagnostics: Option<PathBuf>,
    /// Knot layout used by the fit (JSON).
    #[arg(long)]
    #[serde(skip)]
    pub knots_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartArg {
    Temporal,
    Spatial,
    Full,
}

#[derive(Args, Serialize)]
pub struct GridArgs {
    /// Grid CSV with columns t, or s1,s2 (optional location_id), or t,s1,s2.
    #[arg(long)]
    #[serde(skip)]
    pub grid: Option<PathBuf>,
    /// Evenly spaced times "start:end:count".
    #[arg(long)]
    pub grid_times: Option<String>,
    /// Panel CSV whose times or locations form the grid.
    #[arg(long)]
    #[serde(skip)]
    pub panel: Option<PathBuf>,
    /// Slice a space-time grid at this time.
    #[arg(long)]
    pub at_time: Option<f64>,
    /// Slice a space-time grid at this location id.
    #[arg(long)]
    pub at_location: Option<String>,
}

#[derive(Args, Serialize)]
pub struct BandArgs {
    /// Model JSON from `fit` or `fit-multilevel`.
    #[arg(long)]
    #[serde(skip)]
    pub model: PathBuf,
    /// Predictor, counted from 1.
    #[arg(long, default_value_t = 1)]
    pub predictor: usize,
    #[arg(long, value_enum, default_value_t = PartArg::Temporal)]
    pub part: PartArg,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Significance level γ; bands have coverage 1 − γ.
    #[arg(long, default_value_t = 0.05)]
    pub level: f64,
    /// Joint level ρ for multilevel models; each provider band uses 1 − ρ/P.
    #[arg(long, default_value_t = 0.05)]
    pub joint_level: f64,
    /// Multilevel: band the provider coefficient γ_r + η_rp instead of η_rp.
    #[arg(long)]
    pub combined: bool,
    /// Monte-Carlo draws for the critical value.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Seed for the Monte-Carlo critical value.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Band CSV (`bands`) or verdict JSON (`shape`).
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Significance map CSV for spatial bands over panel locations.
    #[arg(long)]
    #[serde(skip)]
    pub significance: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TestArgs {
    /// Panel CSV.
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    /// Model JSON whose knots are reused.
    #[arg(long)]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    /// Temporal knots M when no model is given.
    #[arg(long)]
    pub knots_temporal: Option<usize>,
    /// Spatial knots N when no model is given.
    #[arg(long)]
    pub knots_spatial: Option<usize>,
    /// Predictor, counted from 1.
    #[arg(long, default_value_t = 1)]
    pub predictor: usize,
    /// Bootstrap replicates (at least 500).
    #[arg(long, default_value_t = 1000)]
    pub boot: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test result JSON.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct MultilevelArgs {
    /// Multilevel panel CSV (provider column first).
    #[arg(long)]
    #[serde(skip)]
    pub panel: PathBuf,
    /// Temporal knots M per family (default min(7, T − 1)).
    #[arg(long)]
    pub knots_temporal: Option<usize>,
    /// Spatial knots N per family (default min(50, ⌈S/4⌉)).
    #[arg(long)]
    pub knots_spatial: Option<usize>,
    /// Knot layout JSON with provider families; replaces knot selection.
    #[arg(long)]
    #[serde(skip)]
    pub knots: Option<PathBuf>,
    /// Minimum temporal gap between knot families.
    #[arg(long)]
    pub sep_temporal: Option<f64>,
    /// Minimum spatial gap between knot families.
    #[arg(long)]
    pub sep_spatial: Option<f64>,
    /// Seed for knot selection and family offsets.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multilevel fit JSON.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Global, deviation and provider coefficients on the panel grid (CSV).
    #[arg(long)]
    #[serde(skip)]
    pub coefficients: Option<PathBuf>,
    /// Knot layout used by the fit (JSON).
    #[arg(long)]
    #[serde(skip)]
    pub knots_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON; a two-predictor default is used without it.
    #[arg(long)]
    #[serde(skip)]
    pub scenario: Option<PathBuf>,
    /// Deviation surfaces JSON (per provider, per predictor) for a multilevel panel.
    #[arg(long)]
    #[serde(skip)]
    pub deviations: Option<PathBuf>,
    /// Providers with zero deviations when --deviations is absent.
    #[arg(long, default_value_t = 1)]
    pub providers: usize,
    /// Locations S for the default scenario.
    #[arg(long, default_value_t = 30)]
    pub s: usize,
    /// Time points T for the default scenario.
    #[arg(long, default_value_t = 10)]
    pub t: usize,
    /// Seed; overrides the scenario file's seed when given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Panel CSV.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// True coefficient surfaces CSV.
    #[arg(long)]
    #[serde(skip)]
    pub truth: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { error::code::USAGE } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STVCM_LOG", "warn")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return ExitCode::from(error::code::USAGE);
        }
    }
    let result = match &cli.command {
        Command::Access(a) => commands::access(a),
        Command::Fit(a) => commands::fit(a),
        Command::Bands(a) => commands::bands(a),
        Command::Shape(a) => commands::shape(a),
        Command::TestInteraction(a) => commands::test_interaction(a),
        Command::FitMultilevel(a) => commands::fit_multilevel(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
