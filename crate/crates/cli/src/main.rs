//! Batch front end: price a scenario over the selected routes, export
//! contraction diagnostics, or run the built-in validation suite.
//!
//! Exit codes: 0 success, 1 validation-suite failure, 2 configuration or
//! scenario rejection (the message names the violated assumption), 3 solver
//! failure (non-contraction, regression breakdown, non-finite values).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use indiff_core::bsde::{self, GridSolution, PricingResult};
use indiff_core::error::{IndiffError, Result};
use indiff_core::fde::{self, PicardOptions, PicardRecord};
use indiff_core::girsanov::{self, BlockRecord, GirsanovOptions};
use indiff_core::grid::TimeGrid;
use indiff_core::market::{self, Scenario};
use indiff_core::oracles;
use indiff_core::paths::{AssetPaths, BrownianBatch};
use indiff_core::presets;
use indiff_core::regression::{BasisContext, BasisSpec, build_contexts};
use indiff_core::report::{self, Meta, OracleEntry, ResultsDoc, RouteEntry};
use indiff_core::validation::{self, SuiteSizes};

const DEFAULT_SEED: u64 = 12345;
const SEED_ENV: &str = "INDIFF_SEED";
const EXIT_OK: i32 = 0;
const EXIT_SUITE_FAILED: i32 = 1;
const EXIT_CONFIG: i32 = 2;
const EXIT_SOLVER: i32 = 3;

#[derive(Parser)]
#[command(
    name = "indiff",
    version,
    about = "Exponential-utility indifference pricing of non-traded claims"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected pricing routes; write results.json and CSV profiles.
    Price(RunArgs),
    /// Run the iterative routes and write their contraction-ratio tables.
    Converge(RunArgs),
    /// Run the built-in validation suite and print a pass/fail table.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides config and environment).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo path count (overrides the config).
    #[arg(long)]
    paths: Option<usize>,
    /// Target number of time steps (overrides the config).
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated subset of bsde,fde,girsanov,oracle.
    #[arg(long, value_delimiter = ',')]
    routes: Option<Vec<String>>,
    /// Claim-split block count for the fde route; 0 selects the
    /// theoretical split size.
    #[arg(long)]
    j_override: Option<usize>,
    /// Run the routes on separate threads instead of sequentially.
    #[arg(long)]
    parallel_routes: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Optional run configuration; only its seed is used by the suite.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated criterion ids to run (1-10; default all).
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<usize>>,
    /// Use reduced sizes (quick plumbing check, not the acceptance run).
    #[arg(long)]
    reduced: bool,
}

/// On-disk run configuration. Unknown fields are rejected so typos cannot
/// silently fall back to defaults.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    schema_version: u32,
    scenario: ScenarioSource,
    #[serde(default = "default_m_paths")]
    m_paths: usize,
    #[serde(default = "default_n_steps")]
    n_steps: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default = "default_routes")]
    routes: Vec<String>,
    #[serde(default = "default_picard_tol")]
    picard_tol: f64,
    #[serde(default = "default_vanish_tol")]
    vanish_tol: f64,
    /// Claim-split block count for the fde route. Absent: a small practical
    /// default (4). Zero: the theoretical split size from the constants
    /// ledger.
    #[serde(default)]
    j_override: Option<usize>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

/// Scenario reference inside the config: an inline object, a preset name
/// (`capped-two-assets`, `capped-orthogonal`), or a path to a scenario JSON
/// file (relative paths resolve against the config file's directory).
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScenarioSource {
    Inline(Box<Scenario>),
    Named(String),
}

fn default_m_paths() -> usize {
    20_000
}

fn default_n_steps() -> usize {
    24
}

fn default_routes() -> Vec<String> {
    vec!["bsde".into(), "fde".into(), "girsanov".into(), "oracle".into()]
}

fn default_picard_tol() -> f64 {
    1e-3
}

fn default_vanish_tol() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Bsde,
    Fde,
    Girsanov,
    Oracle,
}

impl Route {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "bsde" => Ok(Route::Bsde),
            "fde" => Ok(Route::Fde),
            "girsanov" => Ok(Route::Girsanov),
            "oracle" => Ok(Route::Oracle),
            other => Err(IndiffError::InvalidInput(format!(
                "unknown route '{other}' (expected bsde, fde, girsanov, or oracle)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Route::Bsde => "bsde",
            Route::Fde => "fde",
            Route::Girsanov => "girsanov",
            Route::Oracle => "oracle",
        }
    }
}

/// Fully resolved run settings after merging config, flags, and environment.
struct Settings {
    scenario: Scenario,
    routes: Vec<Route>,
    m_paths: usize,
    n_steps: usize,
    seed: u64,
    picard_tol: f64,
    vanish_tol: f64,
    /// `None` selects the theoretical claim-split size.
    j_override: Option<usize>,
    out_dir: PathBuf,
    parallel: bool,
}

fn parse_routes(names: &[String]) -> Result<Vec<Route>> {
    if names.is_empty() {
        return Err(IndiffError::InvalidInput(
            "at least one route must be selected".into(),
        ));
    }
    let mut routes = Vec::new();
    for name in names {
        let r = Route::parse(name.trim())?;
        if !routes.contains(&r) {
            routes.push(r);
        }
    }
    Ok(routes)
}

/// Seed precedence: command line, then config, then environment, then a
/// fixed default.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = config {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(raw) => raw.parse::<u64>().map_err(|_| {
            IndiffError::InvalidInput(format!("{SEED_ENV} must be an unsigned integer, got '{raw}'"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Map the absent/zero/positive config value to the split actually used.
fn resolve_j_override(value: Option<usize>) -> Option<usize> {
    match value {
        None => Some(4),
        Some(0) => None,
        Some(j) => Some(j),
    }
}

fn load_scenario(source: ScenarioSource, config_dir: &Path) -> Result<Scenario> {
    match source {
        ScenarioSource::Inline(sc) => Ok(*sc),
        ScenarioSource::Named(name) => match name.as_str() {
            "capped-two-assets" => Ok(presets::capped_claim_two_assets()),
            "capped-orthogonal" => Ok(presets::capped_claim_with_correlation(0.0)),
            path => {
                let full = config_dir.join(path);
                let body = std::fs::read_to_string(&full).map_err(|e| {
                    IndiffError::InvalidInput(format!(
                        "cannot read scenario file {}: {e}",
                        full.display()
                    ))
                })?;
                Ok(serde_json::from_str(&body)?)
            }
        },
    }
}

fn resolve_settings(args: &RunArgs) -> Result<Settings> {
    let body = std::fs::read_to_string(&args.config).map_err(|e| {
        IndiffError::InvalidInput(format!(
            "cannot read config {}: {e}",
            args.config.display()
        ))
    })?;
    let config: RunConfig = serde_json::from_str(&body)?;
    if config.schema_version != 1 {
        return Err(IndiffError::InvalidInput(format!(
            "unsupported schema_version {} (expected 1)",
            config.schema_version
        )));
    }
    let config_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let scenario = load_scenario(config.scenario, &config_dir)?;
    let route_names = args.routes.clone().unwrap_or(config.routes);
    let routes = parse_routes(&route_names)?;
    let m_paths = args.paths.unwrap_or(config.m_paths);
    let n_steps = args.steps.unwrap_or(config.n_steps);
    if m_paths < 1000 {
        return Err(IndiffError::InvalidInput(format!(
            "m_paths = {m_paths} is below the minimum of 1000"
        )));
    }
    if n_steps < 10 {
        return Err(IndiffError::InvalidInput(format!(
            "n_steps = {n_steps} is below the minimum of 10"
        )));
    }
    if !(config.picard_tol.is_finite() && config.picard_tol > 0.0) {
        return Err(IndiffError::InvalidInput(
            "picard_tol must be positive and finite".into(),
        ));
    }
    if !(config.vanish_tol.is_finite() && config.vanish_tol > 0.0) {
        return Err(IndiffError::InvalidInput(
            "vanish_tol must be positive and finite".into(),
        ));
    }
    let seed = resolve_seed(args.seed, config.seed)?;
    let out_dir = args
        .out
        .clone()
        .or(config.out_dir)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(Settings {
        scenario,
        routes,
        m_paths,
        n_steps,
        seed,
        picard_tol: config.picard_tol,
        vanish_tol: config.vanish_tol,
        j_override: resolve_j_override(args.j_override.or(config.j_override)),
        out_dir,
        parallel: args.parallel_routes,
    })
}

/// Shared per-run artifacts: one grid, one Brownian cloud, one set of base
/// paths and frozen bases, used read-only by every route.
struct RunContext {
    grid: TimeGrid,
    brownian: BrownianBatch,
    paths: AssetPaths,
    ctxs: Arc<Vec<BasisContext>>,
    setup_seconds: f64,
}

fn build_run_context(settings: &Settings, needs_blocks: bool) -> Result<RunContext> {
    let start = Instant::now();
    let sc = &settings.scenario;
    let grid = if needs_blocks {
        let ledger = market::validate_scenario(sc)?;
        let partition = girsanov::build_partition(&ledger)?;
        TimeGrid::with_boundaries(sc.t_horizon, settings.n_steps, partition.interior())?
    } else {
        TimeGrid::uniform(sc.t_horizon, settings.n_steps)?
    };
    let brownian = BrownianBatch::generate(&grid, settings.m_paths, sc.d, settings.seed)?;
    let paths = AssetPaths::evolve(sc, &grid, &brownian)?;
    let ctxs = build_contexts(BasisSpec::default(), &paths)?;
    Ok(RunContext {
        grid,
        brownian,
        paths,
        ctxs,
        setup_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything one route hands back to the orchestrator.
struct RouteOutput {
    name: &'static str,
    entry: Option<RouteEntry>,
    oracle: Option<OracleEntry>,
    pricing: Option<PricingResult>,
    bsde_sols: Option<(GridSolution, GridSolution)>,
    fde_history: Vec<PicardRecord>,
    gir_records: Vec<BlockRecord>,
    runtime: f64,
}

impl RouteOutput {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            entry: None,
            oracle: None,
            pricing: None,
            bsde_sols: None,
            fde_history: Vec::new(),
            gir_records: Vec::new(),
            runtime: 0.0,
        }
    }
}

fn entry_from(result: &PricingResult, converged: bool) -> RouteEntry {
    RouteEntry {
        route: result.diagnostics.route.clone(),
        price: result.price,
        price_stderr: result.price_stderr,
        converged,
        diagnostics: result.diagnostics.clone(),
    }
}

fn run_route(route: Route, settings: &Settings, ctx: &RunContext) -> Result<RouteOutput> {
    let sc = &settings.scenario;
    let lambda = sc.lambda;
    let start = Instant::now();
    let mut out = RouteOutput::new(route.name());
    match route {
        Route::Bsde => {
            let sol_l = bsde::solve_bsde(sc, &ctx.grid, &ctx.paths, &ctx.brownian, &ctx.ctxs, lambda)?;
            let sol_0 = bsde::solve_bsde(sc, &ctx.grid, &ctx.paths, &ctx.brownian, &ctx.ctxs, 0.0)?;
            let result = bsde::hedge_and_strategy(sc, &sol_l, &sol_0)?;
            out.entry = Some(entry_from(&result, true));
            out.pricing = Some(result);
            out.bsde_sols = Some((sol_l, sol_0));
        }
        Route::Fde => {
            let opts = PicardOptions {
                tol: settings.picard_tol,
                ..Default::default()
            };
            let split = fde::solve_split_fde(
                sc,
                &ctx.grid,
                &ctx.paths,
                &ctx.brownian,
                &ctx.ctxs,
                lambda,
                settings.j_override,
                &opts,
            )?;
            let sol_0 = fde::picard_solve_fde(
                sc,
                &ctx.grid,
                &ctx.paths,
                &ctx.brownian,
                &ctx.ctxs,
                0.0,
                &opts,
            )?;
            let converged = split.blocks_converged && sol_0.converged;
            let result =
                fde::price_pseudo_linear(sc, &ctx.grid, &ctx.paths, &split.outcome, &sol_0, lambda)?;
            out.entry = Some(entry_from(&result, converged));
            out.pricing = Some(result);
            out.fde_history = split.outcome.history.clone();
        }
        Route::Girsanov => {
            let opts = GirsanovOptions {
                tol: settings.picard_tol,
                vanish_tol: settings.vanish_tol,
                ..Default::default()
            };
            let sol = girsanov::solve_nonlinear_girsanov(sc, &ctx.grid, &ctx.brownian, lambda, &opts)?;
            out.entry = Some(entry_from(&sol.result, sol.converged));
            out.gir_records = sol.records.clone();
            out.pricing = Some(sol.result);
        }
        Route::Oracle => {
            let spec = oracles::project_scenario(sc)?;
            let price = if spec.rho.abs() == 1.0 {
                oracles::complete_market_price(&spec, oracles::DEFAULT_NODES)?
            } else {
                oracles::distortion_price(&spec, oracles::DEFAULT_NODES)?
            };
            out.oracle = Some(OracleEntry {
                price,
                nodes: oracles::DEFAULT_NODES,
            });
        }
    }
    out.runtime = start.elapsed().as_secs_f64();
    Ok(out)
}

fn run_routes(settings: &Settings, ctx: &RunContext) -> Result<Vec<RouteOutput>> {
    if settings.parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = settings
                .routes
                .iter()
                .map(|&route| scope.spawn(move || run_route(route, settings, ctx)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(IndiffError::InvalidInput("a route worker panicked".into()))
                    })
                })
                .collect()
        })
    } else {
        settings
            .routes
            .iter()
            .map(|&route| run_route(route, settings, ctx))
            .collect()
    }
}

fn unix_time_seconds() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_price(args: &RunArgs) -> Result<i32> {
    let settings = resolve_settings(args)?;
    let ledger = market::validate_scenario(&settings.scenario)?;
    let needs_blocks = settings.routes.contains(&Route::Girsanov);
    let ctx = build_run_context(&settings, needs_blocks)?;
    let outputs = run_routes(&settings, &ctx)?;

    let mut runtimes = BTreeMap::new();
    runtimes.insert("setup".to_string(), ctx.setup_seconds);
    let mut routes = Vec::new();
    let mut oracle = None;
    let mut prices: Vec<(&str, f64)> = Vec::new();
    for o in &outputs {
        runtimes.insert(o.name.to_string(), o.runtime);
        if let Some(entry) = &o.entry {
            prices.push((o.name, entry.price));
            routes.push(entry.clone());
        }
        if let Some(orc) = &o.oracle {
            prices.push((o.name, orc.price));
            oracle = Some(orc.clone());
        }
    }
    let gaps = report::compute_gaps(&prices);
    let doc = ResultsDoc {
        schema_version: 1,
        scenario: settings.scenario.clone(),
        lambda: settings.scenario.lambda,
        m_paths: settings.m_paths,
        // The realized step count; block-aligned grids may slightly exceed
        // the requested target to keep every block at the target density.
        n_steps: ctx.grid.n_steps(),
        seed: settings.seed,
        constants: ledger,
        routes,
        oracle,
        gaps,
        meta: Meta {
            unix_time_seconds: unix_time_seconds(),
            runtime_seconds: runtimes,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };

    std::fs::create_dir_all(&settings.out_dir)?;
    let results_path = settings.out_dir.join("results.json");
    doc.write(&results_path)?;
    println!("wrote {}", results_path.display());
    for o in &outputs {
        if let Some(result) = &o.pricing {
            let path = settings.out_dir.join(format!("route_{}.csv", o.name));
            report::write_route_profile(&path, &ctx.grid, result)?;
            println!("wrote {}", path.display());
        }
        if let Some((sol_l, sol_0)) = &o.bsde_sols {
            let path = settings.out_dir.join("bsde_grid.csv");
            report::write_bsde_grid(&path, &ctx.grid, sol_l, sol_0)?;
            println!("wrote {}", path.display());
        }
    }
    for entry in &doc.routes {
        println!(
            "{:<9} price {:.6} stderr {:.2e}{}",
            entry.route,
            entry.price,
            entry.price_stderr,
            if entry.converged { "" } else { "  [not converged]" }
        );
    }
    if let Some(orc) = &doc.oracle {
        println!("{:<9} price {:.6} ({} nodes)", "oracle", orc.price, orc.nodes);
    }

    let unconverged: Vec<&str> = doc
        .routes
        .iter()
        .filter(|r| !r.converged)
        .map(|r| r.route.as_str())
        .collect();
    if unconverged.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("routes did not converge: {}", unconverged.join(", "));
        Ok(EXIT_SOLVER)
    }
}

fn run_converge(args: &RunArgs) -> Result<i32> {
    let mut settings = resolve_settings(args)?;
    settings.routes = vec![Route::Fde, Route::Girsanov];
    let ctx = build_run_context(&settings, true)?;
    let outputs = run_routes(&settings, &ctx)?;
    std::fs::create_dir_all(&settings.out_dir)?;

    let mut worst: (f64, &str) = (0.0, "none");
    let mut all_converged = true;
    for o in &outputs {
        if let Some(entry) = &o.entry {
            all_converged &= entry.converged;
        }
        let (path, ratios): (PathBuf, Vec<f64>) = match o.name {
            "fde" => {
                let p = settings.out_dir.join("convergence_fde.csv");
                report::write_fde_convergence(&p, &o.fde_history)?;
                (p, o.fde_history.iter().filter_map(|r| r.ratio).collect())
            }
            _ => {
                let p = settings.out_dir.join("convergence_girsanov.csv");
                report::write_girsanov_convergence(&p, &o.gir_records)?;
                (p, o.gir_records.iter().filter_map(|r| r.ratio).collect())
            }
        };
        let route_worst = ratios.iter().fold(0.0_f64, |a, &r| a.max(r));
        println!(
            "wrote {} (worst contraction ratio {:.4})",
            path.display(),
            route_worst
        );
        if route_worst > worst.0 {
            worst = (route_worst, o.name);
        }
    }
    if worst.0 > 0.9 {
        eprintln!(
            "contraction ratio {:.4} on the {} route exceeds 0.9: \
             the iteration is not reliably contracting at this size",
            worst.0, worst.1
        );
        return Ok(EXIT_SOLVER);
    }
    if !all_converged {
        eprintln!("an iterative route stopped before reaching tolerance");
        return Ok(EXIT_SOLVER);
    }
    Ok(EXIT_OK)
}

fn run_validate(args: &ValidateArgs) -> Result<i32> {
    let mut sizes = if args.reduced {
        SuiteSizes::reduced()
    } else {
        SuiteSizes::default()
    };
    if let Some(config_path) = &args.config {
        let body = std::fs::read_to_string(config_path).map_err(|e| {
            IndiffError::InvalidInput(format!("cannot read config {}: {e}", config_path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&body)?;
        if let Some(seed) = config.seed {
            sizes.seed = seed;
        }
    }
    let ids: Vec<usize> = match &args.only {
        Some(list) => {
            if list.is_empty() || list.iter().any(|&id| !(1..=10).contains(&id)) {
                return Err(IndiffError::InvalidInput(
                    "--only takes criterion ids between 1 and 10".into(),
                ));
            }
            list.clone()
        }
        None => (1..=10).collect(),
    };
    let outcomes = validation::run_selected(&sizes, &ids);
    let mut passed = 0;
    for o in &outcomes {
        println!("{}", o.line());
        if o.passed {
            passed += 1;
        }
    }
    println!("{passed}/{} criteria passed", outcomes.len());
    if passed == outcomes.len() {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_SUITE_FAILED)
    }
}

fn exit_code_for(err: &IndiffError) -> i32 {
    match err {
        IndiffError::Assumption { .. }
        | IndiffError::InvalidInput(_)
        | IndiffError::Io(_)
        | IndiffError::Json(_) => EXIT_CONFIG,
        IndiffError::NonContraction { .. }
        | IndiffError::Regression { .. }
        | IndiffError::Quadrature(_)
        | IndiffError::NonFinite(_) => EXIT_SOLVER,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Price(args) => run_price(args),
        Command::Converge(args) => run_converge(args),
        Command::Validate(args) => run_validate(args),
    };
    let code = match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    };
    std::process::exit(code);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j_override_mapping() {
        assert_eq!(resolve_j_override(None), Some(4));
        assert_eq!(resolve_j_override(Some(0)), None);
        assert_eq!(resolve_j_override(Some(7)), Some(7));
    }

    #[test]
    fn route_parsing_rejects_unknown_and_dedups() {
        let routes = parse_routes(&["bsde".into(), "bsde".into(), "oracle".into()]).unwrap();
        assert_eq!(routes, vec![Route::Bsde, Route::Oracle]);
        assert!(parse_routes(&[]).is_err());
        assert!(parse_routes(&["pde".into()]).is_err());
    }

    #[test]
    fn config_defaults_apply() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"schema_version": 1, "scenario": "capped-two-assets"}"#,
        )
        .unwrap();
        assert_eq!(cfg.m_paths, 20_000);
        assert_eq!(cfg.n_steps, 24);
        assert_eq!(cfg.routes.len(), 4);
        assert!(cfg.seed.is_none());
        assert!(matches!(cfg.scenario, ScenarioSource::Named(_)));
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"schema_version": 1, "scenario": "capped-two-assets", "m_path": 5}"#,
        );
        assert!(err.is_err());
    }
}
