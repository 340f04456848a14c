//! The built-in acceptance suite: ten fixed-seed checks covering oracle
//! agreement, cross-route consistency, degenerate-claim exactness,
//! hedging behaviour, contraction rates, measure invariance, and analytic
//! micro-identities, each at desk scale.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

use crate::bsde;
use crate::error::Result;
use crate::fde;
use crate::girsanov;
use crate::grid::TimeGrid;
use crate::market::{self, Payoff, Scenario};
use crate::oracles;
use crate::paths::{AssetPaths, BrownianBatch, doleans_weights};
use crate::presets;
use crate::regression::{BasisSpec, build_contexts};
use crate::stats;

/// Path counts and grid sizes of each criterion, tuned so the whole suite
/// runs in a couple of minutes on one core while leaving comfortable
/// statistical margins.
#[derive(Debug, Clone)]
pub struct SuiteSizes {
    pub seed: u64,
    pub oracle_m: usize,
    pub oracle_n: usize,
    pub agreement_m: usize,
    pub agreement_n: usize,
    pub zero_m: usize,
    pub zero_n: usize,
    pub cash_m: usize,
    pub cash_n: usize,
    pub orthogonal_m: usize,
    pub orthogonal_n: usize,
    pub contraction_fde_m: usize,
    pub contraction_fde_n: usize,
    pub contraction_gir_m: usize,
    pub contraction_gir_n: usize,
    pub n_strategies: usize,
    pub invariance_m: usize,
    pub invariance_n: usize,
    pub doleans_m: usize,
    pub merton_m: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            seed: 90_210,
            oracle_m: 200_000,
            oracle_n: 50,
            agreement_m: 50_000,
            agreement_n: 48,
            zero_m: 20_000,
            zero_n: 20,
            cash_m: 20_000,
            cash_n: 16,
            orthogonal_m: 60_000,
            orthogonal_n: 50,
            contraction_fde_m: 2_000,
            contraction_fde_n: 8,
            contraction_gir_m: 10_000,
            contraction_gir_n: 30,
            n_strategies: 20,
            invariance_m: 30_000,
            invariance_n: 30,
            doleans_m: 100_000,
            merton_m: 10_000,
        }
    }
}

impl SuiteSizes {
    /// A much smaller configuration for smoke tests; statistical criteria
    /// keep their thresholds, so this is only meant for plumbing checks on
    /// the cheap criteria.
    pub fn reduced() -> Self {
        Self {
            oracle_m: 20_000,
            oracle_n: 25,
            agreement_m: 10_000,
            agreement_n: 24,
            zero_m: 4_000,
            zero_n: 10,
            cash_m: 4_000,
            cash_n: 10,
            orthogonal_m: 20_000,
            orthogonal_n: 25,
            contraction_fde_m: 1_000,
            contraction_fde_n: 6,
            contraction_gir_m: 4_000,
            contraction_gir_n: 15,
            n_strategies: 5,
            invariance_m: 10_000,
            invariance_n: 15,
            doleans_m: 20_000,
            merton_m: 2_000,
            ..Self::default()
        }
    }
}

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "criterion {:02} {} — {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

const NAMES: [(usize, &str); 10] = [
    (1, "oracle match"),
    (2, "three-route agreement"),
    (3, "zero claim"),
    (4, "cash invariance"),
    (5, "orthogonal claim"),
    (6, "contraction rates"),
    (7, "strategy suboptimality"),
    (8, "vanish identity"),
    (9, "integrand measure-invariance"),
    (10, "analytic micro-checks"),
];

fn name_of(id: usize) -> &'static str {
    NAMES[id - 1].1
}

/// Run the whole suite; criteria that abort (solver errors) are reported as
/// failures rather than propagating.
pub fn run_all(sizes: &SuiteSizes) -> Vec<CriterionOutcome> {
    run_selected(sizes, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10])
}

/// Run the criteria with the given ids (paired criteria share their heavy
/// computation, so asking for one member of a pair runs the shared work but
/// reports only what was asked for).
pub fn run_selected(sizes: &SuiteSizes, ids: &[usize]) -> Vec<CriterionOutcome> {
    let mut out: Vec<CriterionOutcome> = Vec::new();
    let mut run = |group: &[usize], res: Result<Vec<CriterionOutcome>>| match res {
        Ok(v) => out.extend(v),
        Err(e) => out.extend(group.iter().map(|&id| CriterionOutcome {
            id,
            name: name_of(id),
            passed: false,
            detail: format!("aborted: {e}"),
        })),
    };
    let want = |group: &[usize]| group.iter().any(|id| ids.contains(id));
    if want(&[1, 7]) {
        run(&[1, 7], oracle_and_suboptimality(sizes));
    }
    if want(&[2, 8]) {
        run(&[2, 8], agreement_and_vanish(sizes));
    }
    if want(&[3]) {
        run(&[3], zero_claim(sizes));
    }
    if want(&[4]) {
        run(&[4], cash_invariance(sizes));
    }
    if want(&[5]) {
        run(&[5], orthogonal_claim(sizes));
    }
    if want(&[6]) {
        run(&[6], contraction_rates(sizes));
    }
    if want(&[9]) {
        run(&[9], measure_invariance(sizes));
    }
    if want(&[10]) {
        run(&[10], micro_checks(sizes));
    }
    out.retain(|c| ids.contains(&c.id));
    out.sort_by_key(|c| c.id);
    out
}

struct Cloud {
    grid: TimeGrid,
    brownian: BrownianBatch,
    paths: AssetPaths,
    ctxs: Arc<Vec<crate::regression::BasisContext>>,
}

fn make_cloud(scenario: &Scenario, n: usize, m: usize, seed: u64) -> Result<Cloud> {
    let grid = TimeGrid::uniform(scenario.t_horizon, n)?;
    make_cloud_on(scenario, grid, m, seed)
}

fn make_cloud_on(scenario: &Scenario, grid: TimeGrid, m: usize, seed: u64) -> Result<Cloud> {
    let brownian = BrownianBatch::generate(&grid, m, scenario.d, seed)?;
    let paths = AssetPaths::evolve(scenario, &grid, &brownian)?;
    let ctxs = build_contexts(BasisSpec::default(), &paths)?;
    Ok(Cloud {
        grid,
        brownian,
        paths,
        ctxs,
    })
}

fn outcome(id: usize, passed: bool, detail: String) -> CriterionOutcome {
    CriterionOutcome {
        id,
        name: name_of(id),
        passed,
        detail,
    }
}

fn oracle_and_suboptimality(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_two_assets();
    let start = Instant::now();
    let cloud = make_cloud(&sc, sizes.oracle_n, sizes.oracle_m, sizes.seed ^ 0x01)?;
    let sol_l = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 1.0)?;
    let sol_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let result = bsde::hedge_and_strategy(&sc, &sol_l, &sol_0)?;
    let runtime = start.elapsed().as_secs_f64();
    let oracle =
        oracles::distortion_price(&oracles::project_scenario(&sc)?, oracles::DEFAULT_NODES)?;
    let rel = (result.price - oracle).abs() / oracle;
    let c1 = outcome(
        1,
        rel < 0.03 && runtime <= 60.0,
        format!(
            "price {:.6} vs oracle {:.6} (relative gap {:.2}%), runtime {:.1}s (limit 60s)",
            result.price,
            oracle,
            100.0 * rel,
            runtime
        ),
    );

    // Criterion 7 reuses the converged solution: the solver's own strategy
    // must attain its value, and bounded random strategies must not beat it.
    let optimum = sol_l.y0();
    let y0_se = sol_l.y0_stderr();
    let (u_star, se_star) = bsde::strategy_utility(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        result.optimal_strategy.view(),
        1.0,
    )?;
    let own_gap = (u_star - optimum).abs();
    let own_tol = 3.0 * (se_star + y0_se);
    let mut rng = ChaCha8Rng::seed_from_u64(sizes.seed ^ 0x07);
    let m = cloud.paths.m_paths();
    let n = cloud.grid.n_steps();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut beaten = 0_usize;
    for _ in 0..sizes.n_strategies {
        let consts: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pi = Array2::from_shape_fn((m, n), |(_, k)| consts[k]);
        let (u_i, se_i) =
            bsde::strategy_utility(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, pi.view(), 1.0)?;
        let excess = u_i - (optimum + 3.0 * (se_i + y0_se));
        worst_excess = worst_excess.max(excess);
        if excess > 0.0 {
            beaten += 1;
        }
    }
    let c7 = outcome(
        7,
        beaten == 0 && own_gap <= own_tol,
        format!(
            "{} random strategies, worst margin below optimum+3se: {:.4}; own strategy gap {:.5} (tol {:.5})",
            sizes.n_strategies, -worst_excess, own_gap, own_tol
        ),
    );
    Ok(vec![c1, c7])
}

fn agreement_and_vanish(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_two_assets();
    let ledger = market::validate_scenario(&sc)?;
    let partition = girsanov::build_partition(&ledger)?;
    let grid = TimeGrid::with_boundaries(sc.t_horizon, sizes.agreement_n, partition.interior())?;
    let cloud = make_cloud_on(&sc, grid, sizes.agreement_m, sizes.seed ^ 0x02)?;

    let b_l = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 1.0)?;
    let b_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let b = bsde::indifference_price(&b_l, &b_0)?;

    let opts = fde::PicardOptions::default();
    let split = fde::solve_split_fde(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        &cloud.ctxs,
        1.0,
        Some(4),
        &opts,
    )?;
    let f_0 = fde::picard_solve_fde(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        &cloud.ctxs,
        0.0,
        &opts,
    )?;
    let f = fde::price_pseudo_linear(&sc, &cloud.grid, &cloud.paths, &split.outcome, &f_0, 1.0)?;

    let g = girsanov::solve_nonlinear_girsanov(
        &sc,
        &cloud.grid,
        &cloud.brownian,
        1.0,
        &girsanov::GirsanovOptions::default(),
    )?;

    let entries = [
        ("bsde", b.price, b.price_stderr),
        ("fde", f.price, f.price_stderr),
        ("girsanov", g.result.price, g.result.price_stderr),
    ];
    let mut worst = String::new();
    let mut all_ok = true;
    for i in 0..3 {
        for j in i + 1..3 {
            let gap = (entries[i].1 - entries[j].1).abs();
            let tol = (2.0 * (entries[i].2 + entries[j].2)).max(0.02);
            if gap > tol {
                all_ok = false;
            }
            if worst.is_empty() || gap > tol {
                worst = format!(
                    "{} {:.5} vs {} {:.5} (gap {:.5}, tol {:.5})",
                    entries[i].0, entries[i].1, entries[j].0, entries[j].1, gap, tol
                );
            }
        }
    }
    let c2 = outcome(2, all_ok, worst);

    let scale = 1.0 * ledger.g_max;
    let c8 = outcome(
        8,
        g.vanish_residual <= 1e-8 * scale,
        format!(
            "mean |F(Z) + <Z, n>| dt = {:.3e} (limit {:.3e})",
            g.vanish_residual,
            1e-8 * scale
        ),
    );
    Ok(vec![c2, c8])
}

fn zero_claim(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let mut sc = presets::capped_claim_two_assets();
    sc.lambda = 0.0;
    let cloud = make_cloud(&sc, sizes.zero_n, sizes.zero_m, sizes.seed ^ 0x03)?;

    let b_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let b = bsde::hedge_and_strategy(&sc, &b_0, &b_0)?;
    let f_0 = fde::picard_solve_fde(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        &cloud.ctxs,
        0.0,
        &fde::PicardOptions::default(),
    )?;
    let f = fde::price_pseudo_linear(&sc, &cloud.grid, &cloud.paths, &f_0, &f_0, 0.0)?;
    let g = girsanov::solve_nonlinear_girsanov(
        &sc,
        &cloud.grid,
        &cloud.brownian,
        0.0,
        &girsanov::GirsanovOptions::default(),
    )?;
    let prices = [b.price, f.price, g.result.price];
    let exact = prices.iter().all(|&p| p == 0.0);
    let max_hedge = b
        .hedge
        .iter()
        .chain(f.hedge.iter())
        .chain(g.result.hedge.iter())
        .fold(0.0_f64, |acc, &h| acc.max(h.abs()));
    let c3 = outcome(
        3,
        exact && max_hedge == 0.0,
        format!(
            "prices {:?} (all exactly zero: {exact}), largest |hedge| = {max_hedge:.1e}",
            prices
        ),
    );
    Ok(vec![c3])
}

fn cash_invariance(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let mut sc = presets::capped_claim_two_assets();
    sc.payoff = Payoff::Constant { value: 2.0 };
    let cloud = make_cloud(&sc, sizes.cash_n, sizes.cash_m, sizes.seed ^ 0x04)?;

    let b_l = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 1.0)?;
    let b_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let b = bsde::indifference_price(&b_l, &b_0)?;
    let opts = fde::PicardOptions::default();
    let f_l = fde::picard_solve_fde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 1.0, &opts)?;
    let f_0 = fde::picard_solve_fde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0, &opts)?;
    let f = fde::price_pseudo_linear(&sc, &cloud.grid, &cloud.paths, &f_l, &f_0, 1.0)?;
    let g = girsanov::solve_nonlinear_girsanov(
        &sc,
        &cloud.grid,
        &cloud.brownian,
        1.0,
        &girsanov::GirsanovOptions::default(),
    )?;
    let prices = [b.price, f.price, g.result.price];
    let worst = prices
        .iter()
        .map(|p| (p - 2.0).abs() / 2.0)
        .fold(0.0_f64, f64::max);
    let c4 = outcome(
        4,
        worst <= 0.005,
        format!("prices {:?} vs 2, worst relative deviation {:.2e}", prices, worst),
    );
    Ok(vec![c4])
}

fn orthogonal_claim(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_with_correlation(0.0);
    let cloud = make_cloud(&sc, sizes.orthogonal_n, sizes.orthogonal_m, sizes.seed ^ 0x05)?;
    let sol_l = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 1.0)?;
    let sol_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let price = bsde::indifference_price(&sol_l, &sol_0)?;
    let oracle =
        oracles::distortion_price(&oracles::project_scenario(&sc)?, oracles::DEFAULT_NODES)?;
    let rel = (price.price - oracle).abs() / oracle;
    let hedge_stats = bsde::hedge_mean_stats(&sc, &sol_l, &sol_0, &cloud.brownian)?;
    let mut worst_sigma = 0.0_f64;
    let mut violations = 0_usize;
    for (mean, se) in &hedge_stats {
        let sigmas = if *se > 0.0 { mean.abs() / se } else { 0.0 };
        worst_sigma = worst_sigma.max(sigmas);
        if mean.abs() > 4.0 * se {
            violations += 1;
        }
    }
    let c5 = outcome(
        5,
        rel < 0.03 && violations == 0,
        format!(
            "price {:.6} vs oracle {:.6} (relative gap {:.2}%); hedge at most {:.2} stderr from zero across {} grid times",
            price.price,
            oracle,
            100.0 * rel,
            worst_sigma,
            hedge_stats.len()
        ),
    );
    Ok(vec![c5])
}

fn contraction_rates(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_two_assets();

    // Claim-split iteration at the theoretical split size.
    let cloud = make_cloud(
        &sc,
        sizes.contraction_fde_n,
        sizes.contraction_fde_m,
        sizes.seed ^ 0x06,
    )?;
    let opts = fde::PicardOptions {
        min_iter: 2,
        ..Default::default()
    };
    let split = fde::solve_split_fde(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        &cloud.ctxs,
        1.0,
        None,
        &opts,
    )?;
    let fde_ratios: Vec<f64> = split.outcome.history.iter().filter_map(|r| r.ratio).collect();
    let fde_worst = fde_ratios.iter().fold(0.0_f64, |a, &r| a.max(r));
    let j_blocks = split.lambdas.len();

    // Forward-block iteration at the theoretical partition.
    let ledger = market::validate_scenario(&sc)?;
    let partition = girsanov::build_partition(&ledger)?;
    let grid = TimeGrid::with_boundaries(
        sc.t_horizon,
        sizes.contraction_gir_n,
        partition.interior(),
    )?;
    let brownian = BrownianBatch::generate(&grid, sizes.contraction_gir_m, sc.d, sizes.seed ^ 0x16)?;
    let gopts = girsanov::GirsanovOptions {
        tol: 1e-5,
        min_iter: 3,
        ..Default::default()
    };
    let g = girsanov::solve_nonlinear_girsanov(&sc, &grid, &brownian, 1.0, &gopts)?;
    let gir_ratios: Vec<f64> = g.records.iter().filter_map(|r| r.ratio).collect();
    let gir_worst = gir_ratios.iter().fold(0.0_f64, |a, &r| a.max(r));

    let passed = !fde_ratios.is_empty()
        && !gir_ratios.is_empty()
        && fde_worst <= 0.6
        && gir_worst <= 0.6;
    let c6 = outcome(
        6,
        passed,
        format!(
            "claim-split worst ratio {:.3} over {} blocks ({} ratios); block-measure worst ratio {:.3} over {} blocks ({} ratios); bound 0.6",
            fde_worst,
            j_blocks,
            fde_ratios.len(),
            gir_worst,
            partition.n_blocks(),
            gir_ratios.len()
        ),
    );
    Ok(vec![c6])
}

fn measure_invariance(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_two_assets();
    let cloud = make_cloud(&sc, sizes.invariance_n, sizes.invariance_m, sizes.seed ^ 0x09)?;
    let opts = fde::PicardOptions::default();
    let sol_p = fde::picard_solve_fde(
        &sc,
        &cloud.grid,
        &cloud.paths,
        &cloud.brownian,
        &cloud.ctxs,
        1.0,
        &opts,
    )?;
    let n = cloud.grid.n_steps();
    let d = sc.d;
    let mut shift = Array2::<f64>::zeros((n, d));
    let origin = vec![0.0_f64; d];
    let mut g0 = vec![0.0_f64; d];
    for k in 0..n {
        sc.driver_at(cloud.grid.t(k)).grad(&origin, &mut g0);
        for j in 0..d {
            shift[(k, j)] = -g0[j];
        }
    }
    let (sol_q, _, _) = fde::solve_fde_under_shift(
        &sc,
        &cloud.grid,
        &cloud.brownian,
        &cloud.ctxs,
        shift.view(),
        "Q-mm",
        1.0,
        &opts,
    )?;
    let m = cloud.paths.m_paths();
    let mut acc = 0.0;
    let mut zp = vec![0.0_f64; d];
    let mut zq = vec![0.0_f64; d];
    let mut x = vec![0.0_f64; d];
    for k in 0..n {
        let logs = crate::regression::log_states_at(&cloud.paths, k);
        let dt = cloud.grid.dt(k);
        for p in 0..m {
            for j in 0..d {
                x[j] = logs[(p, j)];
            }
            sol_p.z_table.eval_into(k, &x, &mut zp);
            sol_q.z_table.eval_into(k, &x, &mut zq);
            for j in 0..d {
                let diff = zp[j] - zq[j];
                acc += diff * diff * dt;
            }
        }
    }
    let l2 = (acc / m as f64).sqrt();
    let ledger = market::validate_scenario(&sc)?;
    let scale = 1.0 * ledger.g_max;
    let c9 = outcome(
        9,
        l2 <= 0.05 * scale,
        format!(
            "L2 distance between base- and shifted-measure integrands {:.4} (limit {:.4})",
            l2,
            0.05 * scale
        ),
    );
    Ok(vec![c9])
}

fn micro_checks(sizes: &SuiteSizes) -> Result<Vec<CriterionOutcome>> {
    let sc = presets::capped_claim_two_assets();

    // (a) The driver vanishes at the origin to the last bit.
    let origin_ok = [0.0, 0.37, 0.93]
        .iter()
        .all(|&t| sc.driver_at(t).f(&[0.0, 0.0]) == 0.0);

    // (b) Analytic gradient against central differences.
    let mut rng = ChaCha8Rng::seed_from_u64(sizes.seed ^ 0x0a);
    let drv = sc.driver_at(0.5);
    let mut grad_ok = true;
    let mut worst_grad = 0.0_f64;
    let h = 1e-5;
    for _ in 0..25 {
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut grad = vec![0.0; 2];
        drv.grad(&z, &mut grad);
        for j in 0..2 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fd = (drv.f(&zp) - drv.f(&zm)) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(1.0);
            worst_grad = worst_grad.max(rel);
            if rel > 1e-6 {
                grad_ok = false;
            }
        }
    }

    // (c) The exponential weight of a constant integrand has unit mean.
    let grid = TimeGrid::uniform(1.0, 20)?;
    let brownian = BrownianBatch::generate(&grid, sizes.doleans_m, 2, sizes.seed ^ 0x1a)?;
    let integrand = Array2::from_shape_fn((20, 2), |(_, j)| if j == 0 { 0.5 } else { -0.3 });
    let mc = doleans_weights(integrand.view(), &grid, &brownian)?;
    let terminal: Vec<f64> = mc.weights.column(20).iter().copied().collect();
    let (w_mean, w_se) = stats::mean_and_stderr(&terminal);
    let doleans_ok = (w_mean - 1.0).abs() <= 3.0 * w_se;

    // (d) With no claim the optimal position is the constant risk-premium
    // ratio, recovered exactly by the solver.
    let cloud = make_cloud(&sc, 10, sizes.merton_m, sizes.seed ^ 0x2a)?;
    let sol_0 = bsde::solve_bsde(&sc, &cloud.grid, &cloud.paths, &cloud.brownian, &cloud.ctxs, 0.0)?;
    let merton = bsde::hedge_and_strategy(&sc, &sol_0, &sol_0)?;
    let mut merton_worst = 0.0_f64;
    for k in 0..cloud.grid.n_steps() {
        let col: Vec<f64> = merton.optimal_strategy.column(k).iter().copied().collect();
        let (mean, se) = stats::mean_and_stderr(&col);
        let tol = (4.0 * se).max(1e-12);
        let dev = (mean - 2.0).abs();
        merton_worst = merton_worst.max(dev - tol);
    }
    let merton_ok = merton_worst <= 0.0;

    let passed = origin_ok && grad_ok && doleans_ok && merton_ok;
    let c10 = outcome(
        10,
        passed,
        format!(
            "driver at origin exactly zero: {origin_ok}; gradient vs finite differences worst {:.1e}: {grad_ok}; exponential weight mean {:.5} +/- {:.5}: {doleans_ok}; risk-premium ratio recovered: {merton_ok}",
            worst_grad, w_mean, w_se
        ),
    );
    Ok(vec![c10])
}
