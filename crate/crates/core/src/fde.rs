//! The pseudo linear pricing rule: Picard iteration on the functional
//! differential equation for the finite-variation part `V`, the claim-split
//! perturbation scheme solved under drift-shifted measures, and the
//! transport of each block's solution back to the pricing measure.

use ndarray::{Array2, Array3, ArrayView2, s};
use serde::Serialize;
use std::sync::Arc;

use crate::bsde::{PricingResult, RouteDiagnostics};
use crate::error::{IndiffError, Result};
use crate::grid::TimeGrid;
use crate::market::{self, DriverAt, Scenario};
use crate::paths::{AssetPaths, BrownianBatch};
use crate::regression::{BasisContext, MAX_DIM, StepRegressor, ZTable, log_states_at};
use crate::stats;

/// Finite-variation process on a path cloud, together with its sampled
/// norm: the maximum over grid times of the mean absolute remaining
/// variation `|V_T - V_k|` (grid times stand in for the stopping-time
/// family of the continuous-time norm).
#[derive(Debug, Clone)]
pub struct VProcess {
    /// Shape `(M, N+1)`; the first column is zero.
    pub v: Array2<f64>,
    pub norm_v: f64,
}

impl VProcess {
    pub fn new(v: Array2<f64>) -> Self {
        let norm_v = v_norm(v.view());
        Self { v, norm_v }
    }
}

/// Sampled remaining-variation norm of a process realized on paths.
pub fn v_norm(v: ArrayView2<'_, f64>) -> f64 {
    let (m, n1) = (v.nrows(), v.ncols());
    let mut worst = 0.0_f64;
    for k in 0..n1 {
        let mut acc = 0.0;
        for p in 0..m {
            acc += (v[(p, n1 - 1)] - v[(p, k)]).abs();
        }
        worst = worst.max(acc / m as f64);
    }
    worst
}

fn diff_norm(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let (m, n1) = (a.nrows(), a.ncols());
    let mut worst = 0.0_f64;
    for k in 0..n1 {
        let mut acc = 0.0;
        for p in 0..m {
            let d_t = a[(p, n1 - 1)] - b[(p, n1 - 1)];
            let d_k = a[(p, k)] - b[(p, k)];
            acc += (d_t - d_k).abs();
        }
        worst = worst.max(acc / m as f64);
    }
    worst
}

/// One Picard sweep's convergence record.
#[derive(Debug, Clone, Serialize)]
pub struct PicardRecord {
    pub block: usize,
    pub iteration: usize,
    pub norm_diff: f64,
    /// Successive-difference ratio; absent on the first sweep.
    pub ratio: Option<f64>,
}

/// Stopping policy of the Picard iteration.
#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    /// Convergence threshold on the sampled norm of successive differences.
    pub tol: f64,
    pub max_iter: usize,
    /// Run at least this many sweeps so at least `min_iter - 1` ratios are
    /// observable even when the first sweep already meets `tol`.
    pub min_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 25,
            min_iter: 1,
        }
    }
}

/// Fixed point of one Picard solve: the finite-variation process, the
/// integrand realized on the solve's paths and as a coefficient table, and
/// the iteration history.
#[derive(Debug, Clone)]
pub struct FdeOutcome {
    pub v: VProcess,
    /// Integrand of the last sweep, shape `(M, N, d)`.
    pub z: Array3<f64>,
    pub z_table: ZTable,
    pub history: Vec<PicardRecord>,
    pub converged: bool,
    /// Paths truncated in the final sweep's integrand estimates.
    pub clip_z: usize,
    pub lambda_used: f64,
    pub measure_tag: String,
}

/// Conditional-value cascade and integrand estimation for a fixed target:
/// per grid time the target is projected directly onto that time's basis,
/// and the step-`k` integrand is estimated from the time-`k+1` projection
/// (the raw target at the last step).
fn z_pass(
    regs: &[StepRegressor],
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    h: &[f64],
    z_clip: f64,
) -> Result<(Array3<f64>, ZTable, usize)> {
    let n = grid.n_steps();
    let m = h.len();
    let d = brownian.dim();
    let mut z = Array3::<f64>::zeros((m, n, d));
    let mut table = ZTable::zeros(Arc::clone(ctxs), n, d, z_clip);
    let mut clipped = 0_usize;
    let mut cond_next: Vec<f64> = h.to_vec();
    for k in (0..n).rev() {
        let est = regs[k].estimate_z(
            &cond_next,
            brownian.dw.slice(s![.., k, ..]),
            grid.dt(k),
            z_clip,
        )?;
        clipped += est.clipped;
        z.slice_mut(s![.., k, ..]).assign(&est.z);
        table.set_step(k, &est);
        if k > 0 {
            cond_next = regs[k].fit(h)?.fitted;
        }
    }
    Ok((z, table, clipped))
}

/// The affine integrand functional: given a finite-variation process `V`,
/// estimate the integrand of the conditional-value martingale of
/// `terminal_scale (lambda g + integral theta) + V_T`. Constant shifts of
/// `V_T` are annihilated by the conditional centering.
pub fn z_functional(
    scenario: &Scenario,
    grid: &TimeGrid,
    paths: &AssetPaths,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    v: ArrayView2<'_, f64>,
    lambda_value: f64,
    terminal_scale: f64,
) -> Result<(Array3<f64>, ZTable)> {
    let ledger = market::validate_scenario(scenario)?;
    let n = grid.n_steps();
    let m = paths.m_paths();
    if v.nrows() != m || v.ncols() != n + 1 {
        return Err(IndiffError::InvalidInput(format!(
            "V shape {:?} does not match (M, N+1) = ({m}, {})",
            v.shape(),
            n + 1
        )));
    }
    let i_theta = market::theta_integral(scenario, grid);
    let mut h = vec![0.0_f64; m];
    for p in 0..m {
        let g = scenario.payoff.eval_path(paths.s.slice(s![p, .., ..]));
        h[p] = terminal_scale * (lambda_value * g + i_theta) + v[(p, n)];
    }
    let z_clip = z_clip_radius(&ledger, lambda_value, scenario.t_horizon);
    let mut regs = Vec::with_capacity(n);
    for k in 0..n {
        let logs = log_states_at(paths, k);
        regs.push(StepRegressor::new(&ctxs[k], logs.view(), k)?);
    }
    let (z, table, _) = z_pass(&regs, grid, brownian, ctxs, &h, z_clip)?;
    Ok((z, table))
}

pub(crate) fn z_clip_radius(
    ledger: &market::ConstantsLedger,
    lambda_value: f64,
    horizon: f64,
) -> f64 {
    let bound = lambda_value.abs() * ledger.g_max + horizon * ledger.theta_max;
    10.0 * ledger.k2.max(bound).max(1.0)
}

/// Core Picard loop, generic over the (possibly state-dependent) driver
/// `driver(k, log_state, z)`. Aborts when successive-difference ratios stay
/// at or above one for three consecutive sweeps.
pub(crate) fn picard_iterate<Dr>(
    grid: &TimeGrid,
    paths: &AssetPaths,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    terminal: &[f64],
    driver: Dr,
    z_clip: f64,
    block: usize,
    opts: &PicardOptions,
    lambda_used: f64,
) -> Result<FdeOutcome>
where
    Dr: Fn(usize, &[f64], &[f64]) -> f64,
{
    let n = grid.n_steps();
    let m = paths.m_paths();
    let d = paths.dim();
    let mut regs = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    for k in 0..n {
        let lg = log_states_at(paths, k);
        regs.push(StepRegressor::new(&ctxs[k], lg.view(), k)?);
        logs.push(lg);
    }

    let mut v = Array2::<f64>::zeros((m, n + 1));
    let mut v_new = Array2::<f64>::zeros((m, n + 1));
    let mut z = Array3::<f64>::zeros((m, n, d));
    let mut table = ZTable::zeros(Arc::clone(ctxs), n, d, z_clip);
    let mut clip_z = 0_usize;
    let mut history: Vec<PicardRecord> = Vec::new();
    let mut prev_diff: Option<f64> = None;
    let mut bad_streak = 0_usize;
    let mut converged = false;
    let mut h = vec![0.0_f64; m];
    let mut x = [0.0_f64; MAX_DIM];
    let mut z_row = vec![0.0_f64; d];

    for iteration in 1..=opts.max_iter {
        for p in 0..m {
            h[p] = terminal[p] + v[(p, n)];
        }
        let (z_i, table_i, clip_i) = z_pass(&regs, grid, brownian, ctxs, &h, z_clip)?;
        for k in 0..n {
            let dt = grid.dt(k);
            let lg = &logs[k];
            for p in 0..m {
                for j in 0..d {
                    x[j] = lg[(p, j)];
                    z_row[j] = z_i[(p, k, j)];
                }
                let f = driver(k, &x[..d], &z_row);
                v_new[(p, k + 1)] = v_new[(p, k)] + f * dt;
            }
        }
        if v_new.iter().any(|x| !x.is_finite()) {
            return Err(IndiffError::NonFinite(format!(
                "finite-variation sweep {iteration} of block {block}"
            )));
        }
        let norm = diff_norm(&v_new, &v);
        let ratio = prev_diff.filter(|pd| *pd > 0.0).map(|pd| norm / pd);
        history.push(PicardRecord {
            block,
            iteration,
            norm_diff: norm,
            ratio,
        });
        if let Some(r) = ratio {
            if r >= 1.0 {
                bad_streak += 1;
            } else {
                bad_streak = 0;
            }
            if bad_streak >= 3 {
                return Err(IndiffError::NonContraction {
                    context: if block == 0 {
                        "the unsplit fixed-point iteration".to_string()
                    } else {
                        format!("claim block {block}")
                    },
                    iterations: iteration,
                    last_diff: norm,
                    ratios: history.iter().filter_map(|r| r.ratio).collect(),
                });
            }
        }
        std::mem::swap(&mut v, &mut v_new);
        z = z_i;
        table = table_i;
        clip_z = clip_i;
        prev_diff = Some(norm);
        if iteration >= opts.min_iter && norm <= opts.tol {
            converged = true;
            break;
        }
    }

    Ok(FdeOutcome {
        v: VProcess::new(v),
        z,
        z_table: table,
        history,
        converged,
        clip_z,
        lambda_used,
        measure_tag: paths.measure_tag.clone(),
    })
}

/// Unsplit fixed point of the functional differential equation
/// `V_t = sum_{k < t} F(Z(V)) dt` on the given (base-measure) path cloud.
pub fn picard_solve_fde(
    scenario: &Scenario,
    grid: &TimeGrid,
    paths: &AssetPaths,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    lambda_value: f64,
    opts: &PicardOptions,
) -> Result<FdeOutcome> {
    let ledger = market::validate_scenario(scenario)?;
    let n = grid.n_steps();
    let m = paths.m_paths();
    let i_theta = market::theta_integral(scenario, grid);
    let mut terminal = vec![0.0_f64; m];
    for p in 0..m {
        let g = scenario.payoff.eval_path(paths.s.slice(s![p, .., ..]));
        terminal[p] = lambda_value * g + i_theta;
    }
    let drivers: Vec<DriverAt> = (0..n).map(|k| scenario.driver_at(grid.t(k))).collect();
    let z_clip = z_clip_radius(&ledger, lambda_value, scenario.t_horizon);
    picard_iterate(
        grid,
        paths,
        brownian,
        ctxs,
        &terminal,
        |k, _x, z| drivers[k].f(z),
        z_clip,
        0,
        opts,
        lambda_value,
    )
}

/// Same fixed point solved under a deterministic drift shift `s` (shape
/// `(N, d)`): paths are re-evolved with the shifted drift, the driver gains
/// `<z, s>`, and the returned integrand table refers to the same frozen
/// contexts, so it can be compared function-to-function with the base-measure
/// table. Also returns the recovered finite-variation process under the base
/// measure and the shifted paths.
pub fn solve_fde_under_shift(
    scenario: &Scenario,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    shift: ArrayView2<'_, f64>,
    measure_tag: &str,
    lambda_value: f64,
    opts: &PicardOptions,
) -> Result<(FdeOutcome, VProcess, AssetPaths)> {
    let ledger = market::validate_scenario(scenario)?;
    let n = grid.n_steps();
    let d = scenario.d;
    if shift.shape() != [n, d] {
        return Err(IndiffError::InvalidInput(format!(
            "shift shape {:?} does not match (N, d) = ({n}, {d})",
            shift.shape()
        )));
    }
    let shift_arr = shift.to_owned();
    let (q_paths, shifts) = AssetPaths::evolve_shifted(
        scenario,
        grid,
        brownian,
        measure_tag,
        |k, _x, out| {
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = shift_arr[(k, j)];
            }
        },
    )?;
    let i_theta = market::theta_integral(scenario, grid);
    let m = q_paths.m_paths();
    let mut terminal = vec![0.0_f64; m];
    for p in 0..m {
        let g = scenario.payoff.eval_path(q_paths.s.slice(s![p, .., ..]));
        terminal[p] = lambda_value * g + i_theta;
    }
    let drivers: Vec<DriverAt> = (0..n).map(|k| scenario.driver_at(grid.t(k))).collect();
    let z_clip = z_clip_radius(&ledger, lambda_value, scenario.t_horizon);
    let outcome = picard_iterate(
        grid,
        &q_paths,
        brownian,
        ctxs,
        &terminal,
        |k, _x, z| {
            let mut extra = 0.0;
            for (j, zj) in z.iter().enumerate() {
                extra += zj * shift_arr[(k, j)];
            }
            drivers[k].f(z) + extra
        },
        z_clip,
        0,
        opts,
        lambda_value,
    )?;
    let v_p = recover_v_under_p(&outcome.v, &outcome.z, &shifts, grid);
    Ok((outcome, v_p, q_paths))
}

/// Transport a finite-variation process solved under a shifted measure back
/// to the base measure: `V^base_t = V^shifted_t - sum_{l < t} <Z_l, s_l> dt`.
pub fn recover_v_under_p(
    v_q: &VProcess,
    z: &Array3<f64>,
    shifts: &Array3<f64>,
    grid: &TimeGrid,
) -> VProcess {
    let (m, n1) = (v_q.v.nrows(), v_q.v.ncols());
    let n = n1 - 1;
    let d = z.shape()[2];
    let mut v_p = Array2::<f64>::zeros((m, n1));
    for p in 0..m {
        let mut corr = 0.0;
        v_p[(p, 0)] = v_q.v[(p, 0)];
        for k in 0..n {
            let mut dot = 0.0;
            for j in 0..d {
                dot += z[(p, k, j)] * shifts[(p, k, j)];
            }
            corr += dot * grid.dt(k);
            v_p[(p, k + 1)] = v_q.v[(p, k + 1)] - corr;
        }
    }
    VProcess::new(v_p)
}

/// One perturbation block's solution.
#[derive(Debug, Clone)]
pub struct PerturbedBlock {
    /// Fixed point under the block's shifted measure.
    pub v_q: VProcess,
    /// The same process transported back to the base measure.
    pub v_p: VProcess,
    /// Block integrand as a function of the state (frozen contexts).
    pub z_table: ZTable,
    pub history: Vec<PicardRecord>,
    pub converged: bool,
    pub clip_z: usize,
    pub lambda_j: f64,
}

/// Solve block `j` of the claim split: the prior blocks' summed integrand
/// defines the drift shift `s = -grad F(prior)`, paths are re-evolved under
/// it, and the block driver is the Taylor remainder
/// `F(prior + z) - F(prior) - <grad F(prior), z>` (zero at `z = 0` to the
/// last bit). The terminal is the block's share `(lambda_j / lambda)` of the
/// full terminal. The fixed point is transported back to the base measure
/// before being returned.
#[allow(clippy::too_many_arguments)]
pub fn solve_perturbed_fde(
    scenario: &Scenario,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    prior: &ZTable,
    lambda_j: f64,
    lambda_total: f64,
    block: usize,
    opts: &PicardOptions,
) -> Result<PerturbedBlock> {
    let ledger = market::validate_scenario(scenario)?;
    if lambda_total == 0.0 {
        return Err(IndiffError::InvalidInput(
            "perturbation blocks need a nonzero total claim size".into(),
        ));
    }
    let n = grid.n_steps();
    let d = scenario.d;
    let drivers: Vec<DriverAt> = (0..n).map(|k| scenario.driver_at(grid.t(k))).collect();
    let tag = format!("Q{block}");
    let (q_paths, shifts) =
        AssetPaths::evolve_shifted(scenario, grid, brownian, &tag, |k, x, out| {
            let mut pz = [0.0_f64; MAX_DIM];
            prior.eval_into(k, x, &mut pz[..d]);
            let mut grad = [0.0_f64; MAX_DIM];
            drivers[k].grad(&pz[..d], &mut grad[..d]);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = -grad[j];
            }
        })?;
    let i_theta = market::theta_integral(scenario, grid);
    let m = q_paths.m_paths();
    let scale = lambda_j / lambda_total;
    let mut terminal = vec![0.0_f64; m];
    for p in 0..m {
        let g = scenario.payoff.eval_path(q_paths.s.slice(s![p, .., ..]));
        terminal[p] = scale * (lambda_total * g + i_theta);
    }
    let z_clip = z_clip_radius(&ledger, lambda_total, scenario.t_horizon);
    let outcome = picard_iterate(
        grid,
        &q_paths,
        brownian,
        ctxs,
        &terminal,
        |k, x, z| {
            let mut pz = [0.0_f64; MAX_DIM];
            prior.eval_into(k, x, &mut pz[..d]);
            let mut sum = [0.0_f64; MAX_DIM];
            for j in 0..d {
                sum[j] = pz[j] + z[j];
            }
            let mut grad = [0.0_f64; MAX_DIM];
            drivers[k].grad(&pz[..d], &mut grad[..d]);
            let mut lin = 0.0;
            for j in 0..d {
                lin += grad[j] * z[j];
            }
            drivers[k].f(&sum[..d]) - drivers[k].f(&pz[..d]) - lin
        },
        z_clip,
        block,
        opts,
        lambda_j,
    )?;
    let v_p = recover_v_under_p(&outcome.v, &outcome.z, &shifts, grid);
    Ok(PerturbedBlock {
        v_q: outcome.v,
        v_p,
        z_table: outcome.z_table,
        history: outcome.history,
        converged: outcome.converged,
        clip_z: outcome.clip_z,
        lambda_j,
    })
}

/// Split-scheme solution assembled on the base-measure paths.
#[derive(Debug, Clone)]
pub struct SplitFdeOutcome {
    /// Totals realized on the base paths via the summed integrand table.
    pub outcome: FdeOutcome,
    pub lambdas: Vec<f64>,
    pub blocks_converged: bool,
}

/// Orchestrate the claim split: blocks are solved sequentially (each under
/// the measure its predecessors define), block integrands accumulate as
/// coefficient tables, and the total is realized on the base paths through
/// the summed table. Each block is solved to `tol / J` so the accumulated
/// stopping error stays within the caller's tolerance.
#[allow(clippy::too_many_arguments)]
pub fn solve_split_fde(
    scenario: &Scenario,
    grid: &TimeGrid,
    paths: &AssetPaths,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    lambda_value: f64,
    j_override: Option<usize>,
    opts: &PicardOptions,
) -> Result<SplitFdeOutcome> {
    let ledger = market::validate_scenario(scenario)?;
    let n = grid.n_steps();
    let m = paths.m_paths();
    let d = scenario.d;
    let z_clip = z_clip_radius(&ledger, lambda_value, scenario.t_horizon);
    if lambda_value == 0.0 {
        // The zero claim is its own (exact) fixed point in a single block.
        return Ok(SplitFdeOutcome {
            outcome: FdeOutcome {
                v: VProcess::new(Array2::zeros((m, n + 1))),
                z: Array3::zeros((m, n, d)),
                z_table: ZTable::zeros(Arc::clone(ctxs), n, d, z_clip),
                history: vec![PicardRecord {
                    block: 1,
                    iteration: 1,
                    norm_diff: 0.0,
                    ratio: None,
                }],
                converged: true,
                clip_z: 0,
                lambda_used: 0.0,
                measure_tag: paths.measure_tag.clone(),
            },
            lambdas: vec![0.0],
            blocks_converged: true,
        });
    }
    let lambdas = match j_override {
        Some(j) => market::split_lambda_into(lambda_value, j),
        None => market::split_lambda(lambda_value, ledger.k1, ledger.k2),
    };
    let j_total = lambdas.len();
    let block_opts = PicardOptions {
        tol: opts.tol / j_total as f64,
        ..*opts
    };
    let mut prior = ZTable::zeros(Arc::clone(ctxs), n, d, z_clip);
    let mut history = Vec::new();
    let mut blocks_converged = true;
    let mut clip_z = 0_usize;
    for (idx, &lambda_j) in lambdas.iter().enumerate() {
        let block = solve_perturbed_fde(
            scenario,
            grid,
            brownian,
            ctxs,
            &prior,
            lambda_j,
            lambda_value,
            idx + 1,
            &block_opts,
        )?;
        blocks_converged &= block.converged;
        history.extend(block.history.iter().cloned());
        prior = prior.add(&block.z_table)?;
        clip_z += block.clip_z;
    }

    // Realize the total on the base paths: the telescoped driver sum of the
    // blocks is exactly the full driver at the summed integrand.
    let drivers: Vec<DriverAt> = (0..n).map(|k| scenario.driver_at(grid.t(k))).collect();
    let mut z_total = Array3::<f64>::zeros((m, n, d));
    let mut v_total = Array2::<f64>::zeros((m, n + 1));
    let mut x = [0.0_f64; MAX_DIM];
    let mut z_row = vec![0.0_f64; d];
    for k in 0..n {
        let logs = log_states_at(paths, k);
        let dt = grid.dt(k);
        for p in 0..m {
            for j in 0..d {
                x[j] = logs[(p, j)];
            }
            prior.eval_into(k, &x[..d], &mut z_row);
            for j in 0..d {
                z_total[(p, k, j)] = z_row[j];
            }
            v_total[(p, k + 1)] = v_total[(p, k)] + drivers[k].f(&z_row) * dt;
        }
    }
    Ok(SplitFdeOutcome {
        outcome: FdeOutcome {
            v: VProcess::new(v_total),
            z: z_total,
            z_table: prior,
            history,
            converged: blocks_converged,
            clip_z,
            lambda_used: lambda_value,
            measure_tag: paths.measure_tag.clone(),
        },
        lambdas,
        blocks_converged,
    })
}

/// Price by the pseudo linear rule on common paths:
/// `mean[lambda g + (V_T^lambda - V_0^lambda) - (V_T^0 - V_0^0)]`, with the
/// error bar from the per-path combination. The hedge and optimal position
/// are filled from the two integrands.
pub fn price_pseudo_linear(
    scenario: &Scenario,
    grid: &TimeGrid,
    paths: &AssetPaths,
    sol_lambda: &FdeOutcome,
    sol_zero: &FdeOutcome,
    lambda_value: f64,
) -> Result<PricingResult> {
    let m = paths.m_paths();
    let n = paths.n_steps();
    let d = paths.dim();
    if sol_lambda.v.v.dim() != (m, n + 1) || sol_zero.v.v.dim() != (m, n + 1) {
        return Err(IndiffError::InvalidInput(
            "fixed points do not match the path cloud".into(),
        ));
    }
    let mut combo = vec![0.0_f64; m];
    for p in 0..m {
        let g = scenario.payoff.eval_path(paths.s.slice(s![p, .., ..]));
        let dv_l = sol_lambda.v.v[(p, n)] - sol_lambda.v.v[(p, 0)];
        let dv_0 = sol_zero.v.v[(p, n)] - sol_zero.v.v[(p, 0)];
        combo[p] = lambda_value * g + dv_l - dv_0;
    }
    let (price, price_stderr) = stats::mean_and_stderr(&combo);
    let mut hedge = Array2::<f64>::zeros((m, n));
    let mut strategy = Array2::<f64>::zeros((m, n));
    let mut z_row = vec![0.0_f64; d];
    for k in 0..n {
        let drv = scenario.driver_at(grid.t(k));
        for p in 0..m {
            let mut diff_proj = 0.0;
            for j in 0..d {
                let zl = sol_lambda.z[(p, k, j)];
                diff_proj += drv.sigma_p[j] * (zl - sol_zero.z[(p, k, j)]);
                z_row[j] = zl;
            }
            hedge[(p, k)] = -diff_proj / drv.sigma_p_sq;
            strategy[(p, k)] = drv.optimal_position(&z_row);
        }
    }
    let iterations = sol_lambda.history.len() + sol_zero.history.len();
    Ok(PricingResult {
        price,
        price_stderr,
        hedge,
        optimal_strategy: strategy,
        diagnostics: RouteDiagnostics {
            route: "fde".to_string(),
            clip_y: 0,
            clip_z: sol_lambda.clip_z + sol_zero.clip_z,
            notes: vec![
                format!("picard sweeps = {iterations}"),
                format!(
                    "converged = {}",
                    sol_lambda.converged && sol_zero.converged
                ),
            ],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde;
    use crate::market::Payoff;
    use crate::oracles;
    use crate::presets;
    use crate::regression::{BasisSpec, build_contexts};

    struct Setup {
        scenario: Scenario,
        grid: TimeGrid,
        paths: AssetPaths,
        brownian: BrownianBatch,
        ctxs: Arc<Vec<BasisContext>>,
    }

    fn setup(scenario: Scenario, m: usize, n: usize, seed: u64) -> Setup {
        let grid = TimeGrid::uniform(scenario.t_horizon, n).unwrap();
        let brownian = BrownianBatch::generate(&grid, m, scenario.d, seed).unwrap();
        let paths = AssetPaths::evolve(&scenario, &grid, &brownian).unwrap();
        let ctxs = build_contexts(BasisSpec::default(), &paths).unwrap();
        Setup {
            scenario,
            grid,
            paths,
            brownian,
            ctxs,
        }
    }

    fn solve(su: &Setup, lambda: f64, opts: &PicardOptions) -> FdeOutcome {
        picard_solve_fde(
            &su.scenario,
            &su.grid,
            &su.paths,
            &su.brownian,
            &su.ctxs,
            lambda,
            opts,
        )
        .unwrap()
    }

    #[test]
    fn zero_claim_fixed_point_is_immediate() {
        let su = setup(presets::capped_claim_two_assets(), 2_000, 8, 71);
        let sol = solve(&su, 0.0, &PicardOptions::default());
        assert!(sol.converged);
        assert_eq!(sol.history.len(), 1);
        assert_eq!(sol.history[0].norm_diff, 0.0);
        assert!(sol.v.v.iter().all(|&v| v == 0.0));
        assert!(sol.z.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn constant_claim_keeps_v_at_zero() {
        let mut sc = presets::capped_claim_two_assets();
        sc.payoff = Payoff::Constant { value: 2.0 };
        let su = setup(sc, 2_000, 8, 72);
        let sol_l = solve(&su, 1.0, &PicardOptions::default());
        let sol_0 = solve(&su, 0.0, &PicardOptions::default());
        assert!(sol_l.converged && sol_l.history.len() == 1);
        assert!(sol_l.v.v.iter().all(|&v| v == 0.0));
        let result =
            price_pseudo_linear(&su.scenario, &su.grid, &su.paths, &sol_l, &sol_0, 1.0).unwrap();
        assert_eq!(result.price, 2.0);
        assert!(result.price_stderr < 1e-12);
    }

    #[test]
    fn zero_claim_prices_at_exactly_zero() {
        let su = setup(presets::capped_claim_two_assets(), 2_000, 8, 73);
        let sol_0 = solve(&su, 0.0, &PicardOptions::default());
        let result =
            price_pseudo_linear(&su.scenario, &su.grid, &su.paths, &sol_0, &sol_0, 0.0).unwrap();
        assert_eq!(result.price, 0.0);
        assert_eq!(result.price_stderr, 0.0);
    }

    #[test]
    fn z_functional_kills_constant_shifts() {
        let su = setup(presets::capped_claim_two_assets(), 5_000, 10, 74);
        let m = 5_000;
        let v0 = Array2::<f64>::zeros((m, 11));
        let vc = Array2::<f64>::from_elem((m, 11), 0.3);
        let (z0, _) = z_functional(
            &su.scenario, &su.grid, &su.paths, &su.brownian, &su.ctxs, v0.view(), 1.0, 1.0,
        )
        .unwrap();
        let (zc, _) = z_functional(
            &su.scenario, &su.grid, &su.paths, &su.brownian, &su.ctxs, vc.view(), 1.0, 1.0,
        )
        .unwrap();
        let sup = z0
            .iter()
            .zip(zc.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        assert!(sup <= 1e-10, "constant shift changed the integrand by {sup}");
    }

    #[test]
    fn z_functional_matches_iterated_linear_pass() {
        let su = setup(presets::capped_claim_two_assets(), 20_000, 20, 75);
        let m = 20_000;
        let n = 20;
        let v0 = Array2::<f64>::zeros((m, n + 1));
        let (z_direct, _) = z_functional(
            &su.scenario, &su.grid, &su.paths, &su.brownian, &su.ctxs, v0.view(), 1.0, 1.0,
        )
        .unwrap();
        // Iterated linear backward pass (projection of the projection).
        let i_theta = market::theta_integral(&su.scenario, &su.grid);
        let mut y: Vec<f64> = (0..m)
            .map(|p| {
                su.scenario
                    .payoff
                    .eval_path(su.paths.s.slice(s![p, .., ..]))
                    + i_theta
            })
            .collect();
        let mut z_lin = Array3::<f64>::zeros((m, n, 2));
        for k in (0..n).rev() {
            let logs = log_states_at(&su.paths, k);
            let reg = StepRegressor::new(&su.ctxs[k], logs.view(), k).unwrap();
            let est = reg
                .estimate_z(&y, su.brownian.dw.slice(s![.., k, ..]), su.grid.dt(k), 1e6)
                .unwrap();
            z_lin.slice_mut(s![.., k, ..]).assign(&est.z);
            y = reg.fit(&y).unwrap().fitted;
        }
        let mut acc = 0.0;
        for p in 0..m {
            for k in 0..n {
                let dt = su.grid.dt(k);
                for j in 0..2 {
                    let diff = z_direct[(p, k, j)] - z_lin[(p, k, j)];
                    acc += diff * diff * dt;
                }
            }
        }
        let l2 = (acc / m as f64).sqrt();
        assert!(l2 <= 0.05, "direct vs iterated integrand L2 gap {l2}");
    }

    #[test]
    fn unsplit_price_agrees_with_bsde_and_oracle() {
        let su = setup(presets::capped_claim_two_assets(), 30_000, 40, 76);
        let opts = PicardOptions::default();
        let sol_l = solve(&su, 1.0, &opts);
        let sol_0 = solve(&su, 0.0, &opts);
        assert!(sol_l.converged);
        let fde_result =
            price_pseudo_linear(&su.scenario, &su.grid, &su.paths, &sol_l, &sol_0, 1.0).unwrap();
        let b_l =
            bsde::solve_bsde(&su.scenario, &su.grid, &su.paths, &su.brownian, &su.ctxs, 1.0)
                .unwrap();
        let b_0 =
            bsde::solve_bsde(&su.scenario, &su.grid, &su.paths, &su.brownian, &su.ctxs, 0.0)
                .unwrap();
        let bsde_result = bsde::indifference_price(&b_l, &b_0).unwrap();
        let tol = (2.0 * (fde_result.price_stderr + bsde_result.price_stderr)).max(0.02);
        assert!(
            (fde_result.price - bsde_result.price).abs() <= tol,
            "fde {} vs bsde {} (tol {tol})",
            fde_result.price,
            bsde_result.price
        );
        let oracle = oracles::distortion_price(
            &oracles::project_scenario(&su.scenario).unwrap(),
            oracles::DEFAULT_NODES,
        )
        .unwrap();
        let rel = (fde_result.price - oracle).abs() / oracle;
        assert!(rel < 0.03, "fde price {} vs oracle {oracle}", fde_result.price);
    }

    #[test]
    fn recovery_is_identity_for_zero_shift_or_integrand() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let mut v = Array2::<f64>::zeros((3, 5));
        for p in 0..3 {
            for k in 0..5 {
                v[(p, k)] = 0.1 * k as f64 + p as f64;
            }
        }
        let vq = VProcess::new(v.clone());
        let z = Array3::<f64>::from_elem((3, 4, 2), 0.7);
        let zero = Array3::<f64>::zeros((3, 4, 2));
        let same = recover_v_under_p(&vq, &z, &zero, &grid);
        assert_eq!(same.v, v);
        let same2 = recover_v_under_p(&vq, &zero, &z, &grid);
        assert_eq!(same2.v, v);
        // A constant product drains linearly in time.
        let shifted = recover_v_under_p(&vq, &z, &z, &grid);
        let expected = v[(1, 4)] - 2.0 * 0.49 * 1.0;
        assert!((shifted.v[(1, 4)] - expected).abs() < 1e-12);
    }

    #[test]
    fn first_block_runs_on_the_taylor_remainder() {
        let su = setup(presets::capped_claim_two_assets(), 5_000, 10, 77);
        let ledger = market::validate_scenario(&su.scenario).unwrap();
        let z_clip = 10.0 * ledger.k2;
        let prior = ZTable::zeros(Arc::clone(&su.ctxs), 10, 2, z_clip);
        let block = solve_perturbed_fde(
            &su.scenario,
            &su.grid,
            &su.brownian,
            &su.ctxs,
            &prior,
            0.25,
            1.0,
            1,
            &PicardOptions::default(),
        )
        .unwrap();
        assert!(block.converged);
        assert!(!block.history.is_empty());
        // Transported process starts at zero and stays modest: the block
        // carries only a quarter of the claim and the quadratic remainder.
        for p in 0..5_000 {
            assert_eq!(block.v_p.v[(p, 0)], 0.0);
        }
        assert!(block.v_p.norm_v < 0.05, "norm {}", block.v_p.norm_v);
    }

    #[test]
    fn split_solve_reproduces_the_unsplit_fixed_point() {
        let su = setup(presets::capped_claim_two_assets(), 20_000, 20, 78);
        let opts = PicardOptions::default();
        let split = solve_split_fde(
            &su.scenario,
            &su.grid,
            &su.paths,
            &su.brownian,
            &su.ctxs,
            1.0,
            Some(4),
            &opts,
        )
        .unwrap();
        assert!(split.blocks_converged);
        assert_eq!(split.lambdas.len(), 4);
        assert!((split.lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let unsplit = solve(&su, 1.0, &opts);
        let gap = diff_norm(&split.outcome.v.v, &unsplit.v.v);
        assert!(
            gap <= 2.0 * (opts.tol + opts.tol),
            "split vs unsplit process gap {gap}"
        );
        // Prices agree to the same accuracy.
        let sol_0 = solve(&su, 0.0, &opts);
        let p_split =
            price_pseudo_linear(&su.scenario, &su.grid, &su.paths, &split.outcome, &sol_0, 1.0)
                .unwrap();
        let p_unsplit =
            price_pseudo_linear(&su.scenario, &su.grid, &su.paths, &unsplit, &sol_0, 1.0).unwrap();
        assert!(
            (p_split.price - p_unsplit.price).abs() <= 0.01,
            "split {} vs unsplit {}",
            p_split.price,
            p_unsplit.price
        );
    }

    #[test]
    fn divergent_driver_aborts_with_history() {
        let su = setup(presets::capped_claim_two_assets(), 2_000, 8, 79);
        let i_theta = market::theta_integral(&su.scenario, &su.grid);
        let terminal: Vec<f64> = (0..2_000)
            .map(|p| {
                su.scenario
                    .payoff
                    .eval_path(su.paths.s.slice(s![p, .., ..]))
                    + i_theta
            })
            .collect();
        let err = picard_iterate(
            &su.grid,
            &su.paths,
            &su.brownian,
            &su.ctxs,
            &terminal,
            |_k, _x, z| 40.0 * z[0],
            1e6,
            0,
            &PicardOptions {
                tol: 1e-9,
                max_iter: 25,
                min_iter: 1,
            },
            1.0,
        )
        .unwrap_err();
        match err {
            IndiffError::NonContraction {
                iterations, ratios, ..
            } => {
                assert!(iterations >= 4);
                assert!(ratios.iter().filter(|&&r| r >= 1.0).count() >= 3);
            }
            other => panic!("expected a contraction failure, got {other:?}"),
        }
    }

    #[test]
    fn integrand_is_invariant_under_the_measure_shift() {
        let su = setup(presets::capped_claim_two_assets(), 20_000, 20, 80);
        let opts = PicardOptions::default();
        let sol_p = solve(&su, 1.0, &opts);
        // Constant shift: the zero-integrand vanishing drift, i.e. the
        // minimal-entropy direction -grad F(0) = (mu_P/|sigma_P|^2) sigma_P.
        let n = su.grid.n_steps();
        let mut shift = Array2::<f64>::zeros((n, 2));
        for k in 0..n {
            let drv = su.scenario.driver_at(su.grid.t(k));
            let mut g0 = [0.0_f64; 2];
            drv.grad(&[0.0, 0.0], &mut g0);
            shift[(k, 0)] = -g0[0];
            shift[(k, 1)] = -g0[1];
        }
        assert!((shift[(0, 0)] - 0.4).abs() < 1e-12);
        let (sol_q, _vp, _qpaths) = solve_fde_under_shift(
            &su.scenario,
            &su.grid,
            &su.brownian,
            &su.ctxs,
            shift.view(),
            "Q-mm",
            1.0,
            &opts,
        )
        .unwrap();
        // Compare the two integrand functions on the common base cloud.
        let mut acc = 0.0;
        let mut zp = [0.0_f64; 2];
        let mut zq = [0.0_f64; 2];
        let mut x = [0.0_f64; 2];
        for k in 0..n {
            let logs = log_states_at(&su.paths, k);
            let dt = su.grid.dt(k);
            for p in 0..20_000 {
                x[0] = logs[(p, 0)];
                x[1] = logs[(p, 1)];
                sol_p.z_table.eval_into(k, &x, &mut zp);
                sol_q.z_table.eval_into(k, &x, &mut zq);
                for j in 0..2 {
                    let diff = zp[j] - zq[j];
                    acc += diff * diff * dt;
                }
            }
        }
        let l2 = (acc / 20_000.0).sqrt();
        let scale = 1.0 * 2.0; // lambda x claim bound
        assert!(
            l2 <= 0.05 * scale,
            "integrand across measures differs in L2 by {l2}"
        );
    }
}
