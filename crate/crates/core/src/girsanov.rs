//! The nonlinear measure route: construct the drift integrand that makes
//! the finite-variation driver vanish, so the conditional value process
//! becomes a martingale under the new measure, and solve the resulting
//! coupled forward system by blockwise Picard iteration — backward over
//! time blocks, forward within each block. Pricing happens afterwards on
//! the base-measure paths through the fitted integrand functions.
//!
//! One display of the shift integrand in the source material carries
//! `|sigma_P|` in a denominator where the companion equation has
//! `|sigma_P|^2`; this module uses the squared norm — the cancellation
//! identity `F(z) + <z, n(z)> = 0` holds only with the square, and that
//! identity is asserted on every solve.

use ndarray::{Array2, Array3, ArrayView2, s};
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;

use crate::bsde::{PricingResult, RouteDiagnostics};
use crate::error::{IndiffError, Result};
use crate::fde::z_clip_radius;
use crate::grid::TimeGrid;
use crate::market::{self, ConstantsLedger, DriverAt, Payoff, Scenario};
use crate::paths::{AssetPaths, BrownianBatch};
use crate::regression::{
    BasisContext, BasisSpec, MAX_BASIS, MAX_DIM, StepRegressor, ZTable, build_contexts,
    log_states_at,
};
use crate::stats;

/// Time partition of the blockwise scheme.
#[derive(Debug, Clone)]
pub struct BlockPartition {
    /// Boundaries `0 = t_0 < ... < t_J = T`.
    pub boundaries: Vec<f64>,
    /// Upper bound on admissible block width, `1 / (8 K3^2 K4)`.
    pub max_delta: f64,
}

impl BlockPartition {
    pub fn n_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn interior(&self) -> &[f64] {
        &self.boundaries[1..self.boundaries.len() - 1]
    }
}

/// Derive the partition from the constants ledger. Payoffs without a
/// log-Lipschitz bound (path-dependent claims) are rejected by the
/// assumption that requires it; they remain priceable by the other routes.
pub fn build_partition(ledger: &ConstantsLedger) -> Result<BlockPartition> {
    let k3 = ledger.k3.ok_or_else(|| {
        IndiffError::assumption(
            "A4",
            "the block-measure route needs a log-Lipschitz payoff bound, \
             which this payoff does not provide",
        )
    })?;
    let boundaries = ledger
        .partition
        .clone()
        .expect("a partition always accompanies a Lipschitz bound");
    let denom = 8.0 * k3 * k3 * ledger.k4;
    let max_delta = if denom <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / denom
    };
    for w in boundaries.windows(2) {
        if w[1] - w[0] > max_delta * (1.0 + 1e-12) {
            return Err(IndiffError::InvalidInput(format!(
                "block [{}, {}] exceeds the admissible width {max_delta:.6}",
                w[0], w[1]
            )));
        }
    }
    Ok(BlockPartition {
        boundaries,
        max_delta,
    })
}

/// The conditional value at a block boundary as a function of the log
/// state: exact at the horizon, fitted on the basis at interior boundaries.
#[derive(Debug, Clone)]
pub enum ValueFunctionTable {
    Exact {
        payoff: Payoff,
        lambda_value: f64,
        i_theta: f64,
        lipschitz: f64,
    },
    Fitted {
        ctx: BasisContext,
        coefficients: Vec<f64>,
        lipschitz: f64,
    },
}

impl ValueFunctionTable {
    pub fn eval(&self, log_state: &[f64]) -> f64 {
        match self {
            ValueFunctionTable::Exact {
                payoff,
                lambda_value,
                i_theta,
                ..
            } => lambda_value * payoff.eval_terminal_log(log_state) + i_theta,
            ValueFunctionTable::Fitted {
                ctx, coefficients, ..
            } => {
                let b = ctx.n_terms();
                let mut row = [0.0_f64; MAX_BASIS];
                ctx.eval_row(log_state, &mut row[..b]);
                row[..b]
                    .iter()
                    .zip(coefficients)
                    .map(|(r, c)| r * c)
                    .sum()
            }
        }
    }

    pub fn lipschitz_estimate(&self) -> f64 {
        match self {
            ValueFunctionTable::Exact { lipschitz, .. } => *lipschitz,
            ValueFunctionTable::Fitted { lipschitz, .. } => *lipschitz,
        }
    }
}

/// Tail-trimmed sup of the fitted polynomial's gradient norm over a sample
/// cloud (99th percentile), as an estimate of its Lipschitz constant on the
/// region the paths actually visit.
fn fitted_lipschitz(
    ctx: &BasisContext,
    coefficients: &[f64],
    states: ArrayView2<'_, f64>,
) -> f64 {
    let m = states.nrows();
    let d = ctx.dim();
    let mut norms = Vec::with_capacity(m);
    let mut u = [0.0_f64; MAX_DIM];
    let mut grad = [0.0_f64; MAX_DIM];
    for p in 0..m {
        for j in 0..d {
            u[j] = if ctx.active_features[j] {
                (states[(p, j)] - ctx.means[j]) / ctx.stds[j]
            } else {
                0.0
            };
        }
        grad[..d].fill(0.0);
        for (b, alpha) in ctx.terms.iter().enumerate() {
            if !ctx.active_terms[b] || coefficients[b] == 0.0 {
                continue;
            }
            for j in 0..d {
                let pj = alpha[j];
                if pj == 0 || !ctx.active_features[j] {
                    continue;
                }
                let mut v = pj as f64 / ctx.stds[j];
                if pj > 1 {
                    v *= u[j].powi(pj as i32 - 1);
                }
                for (l, &pl) in alpha.iter().enumerate() {
                    if l != j && pl > 0 {
                        v *= u[l].powi(pl as i32);
                    }
                }
                grad[j] += coefficients[b] * v;
            }
        }
        norms.push(grad[..d].iter().map(|g| g * g).sum::<f64>().sqrt());
    }
    norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    norms[(((m as f64) * 0.99) as usize).min(m - 1)]
}

/// Stopping policy of the blockwise iteration.
#[derive(Debug, Clone, Copy)]
pub struct GirsanovOptions {
    /// Threshold on the sampled sup-over-time L2 norm of successive path
    /// differences (price scale).
    pub tol: f64,
    pub max_iter: usize,
    pub min_iter: usize,
    /// Acceptable sampled norm of the finite-variation process under the
    /// constructed measure (it vanishes identically in exact arithmetic).
    pub vanish_tol: f64,
}

impl Default for GirsanovOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 25,
            min_iter: 1,
            vanish_tol: 1e-3,
        }
    }
}

/// One sweep's convergence record inside a time block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockRecord {
    pub block: usize,
    pub iteration: usize,
    pub s_norm_diff: f64,
    pub ratio: Option<f64>,
    /// Mean over paths and steps of `|F(Z) + <Z, n(Z)>| dt` on the sweep's
    /// realized integrand — the cancellation identity, so zero up to
    /// floating point.
    pub vanish_residual: f64,
}

/// Converged solution of one time block.
#[derive(Debug)]
pub struct BlockOutcome {
    /// Log-state paths of the final sweep, shape `(M, L+1, d)`.
    pub x: Array3<f64>,
    /// Integrand realized on those paths, shape `(M, L, d)`.
    pub z: Array3<f64>,
    /// Conditional value fitted at the block's left boundary.
    pub start_table: ValueFunctionTable,
    pub records: Vec<BlockRecord>,
    /// Sampled norm of the finite-variation process under the block measure.
    pub v_q_norm: f64,
    pub converged: bool,
    pub clip_z: usize,
}

/// Evolve asset log states forward across steps `k_start..k_end` from
/// per-path start states under the drift shift `shift(k, x, out)`.
fn evolve_block<F>(
    scenario: &Scenario,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    start_logs: &Array2<f64>,
    k_start: usize,
    k_end: usize,
    shift: F,
) -> Array3<f64>
where
    F: Fn(usize, &[f64], &mut [f64]) + Sync,
{
    let d = scenario.d;
    let m = start_logs.nrows();
    let l_steps = k_end - k_start;
    let coeffs: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (k_start..k_end)
        .map(|k| {
            let t = grid.t(k);
            (
                scenario.mu_s.iter().map(|c| c.eval(t)).collect(),
                scenario
                    .sigma_s
                    .iter()
                    .map(|c| c.eval(t).to_vec())
                    .collect(),
            )
        })
        .collect();
    let dw = &brownian.dw;
    let mut buf = vec![0.0_f64; m * (l_steps + 1) * d];
    buf.par_chunks_mut((l_steps + 1) * d)
        .enumerate()
        .for_each(|(p, chunk)| {
            let mut x: Vec<f64> = start_logs.row(p).iter().copied().collect();
            let mut n_vec = vec![0.0_f64; d];
            chunk[..d].copy_from_slice(&x);
            for l in 0..l_steps {
                let k = k_start + l;
                let dt = grid.dt(k);
                let (mu, sigma) = &coeffs[l];
                let dw_row = dw.slice(s![p, k, ..]);
                let dw_row = dw_row.as_slice().expect("contiguous increments");
                shift(k, &x, &mut n_vec);
                for i in 0..d {
                    let sig = &sigma[i];
                    let vol_sq: f64 = sig.iter().map(|v| v * v).sum();
                    let drift_shift: f64 = sig.iter().zip(&n_vec).map(|(a, b)| a * b).sum();
                    let diffusion: f64 = sig.iter().zip(dw_row).map(|(a, b)| a * b).sum();
                    x[i] += (mu[i] - 0.5 * vol_sq - drift_shift) * dt + diffusion;
                    chunk[(l + 1) * d + i] = x[i];
                }
            }
        });
    Array3::from_shape_vec((m, l_steps + 1, d), buf).expect("shape consistent by construction")
}

/// Sampled sup-over-time L2 distance between two path clouds, measured on
/// price levels.
fn s_norm_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (m, l1, d) = a.dim();
    let mut acc = 0.0;
    for p in 0..m {
        let mut sup = 0.0_f64;
        for l in 0..l1 {
            let mut sq = 0.0;
            for i in 0..d {
                let diff = a[(p, l, i)].exp() - b[(p, l, i)].exp();
                sq += diff * diff;
            }
            sup = sup.max(sq);
        }
        acc += sup;
    }
    (acc / m as f64).sqrt()
}

/// Solve one time block: alternate between (a) regressing the block-end
/// conditional value onto the basis along the current paths to estimate the
/// integrand and (b) re-evolving the paths under the induced vanishing
/// shift, until the sampled path norm of successive sweeps stops moving.
/// The integrand coefficients land in `z_work` at the block's global step
/// indices.
#[allow(clippy::too_many_arguments)]
pub fn iterate_forward_block(
    scenario: &Scenario,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    ctxs: &Arc<Vec<BasisContext>>,
    drivers: &[DriverAt],
    block: usize,
    start_logs: &Array2<f64>,
    value_next: &ValueFunctionTable,
    z_work: &mut ZTable,
    opts: &GirsanovOptions,
) -> Result<BlockOutcome> {
    let (k_start, k_end) = grid.block(block - 1);
    let l_steps = k_end - k_start;
    let m = start_logs.nrows();
    let d = scenario.d;

    let evolve = |table: &ZTable| -> Array3<f64> {
        evolve_block(
            scenario,
            grid,
            brownian,
            start_logs,
            k_start,
            k_end,
            |k, x, out| {
                let mut z = [0.0_f64; MAX_DIM];
                table.eval_into(k, x, &mut z[..d]);
                drivers[k].vanishing_shift(&z[..d], out);
            },
        )
    };

    let mut x = evolve(z_work);
    let mut records: Vec<BlockRecord> = Vec::new();
    let mut prev_diff: Option<f64> = None;
    let mut bad_streak = 0_usize;
    let mut converged = false;
    let mut clip_z = 0_usize;
    let mut target = vec![0.0_f64; m];
    let mut state = vec![0.0_f64; d];

    for iteration in 1..=opts.max_iter {
        // (a) regression pass along the current paths.
        let mut regs = Vec::with_capacity(l_steps);
        for l in 0..l_steps {
            regs.push(StepRegressor::new(
                &ctxs[k_start + l],
                x.slice(s![.., l, ..]),
                k_start + l,
            )?);
        }
        for p in 0..m {
            for j in 0..d {
                state[j] = x[(p, l_steps, j)];
            }
            target[p] = value_next.eval(&state[..d]);
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(IndiffError::NonFinite(format!(
                "block {block} conditional value at sweep {iteration}"
            )));
        }
        let mut sweep_clip = 0_usize;
        let mut vanish_acc = 0.0_f64;
        let mut n_vec = vec![0.0_f64; d];
        let mut cond_next = target.clone();
        for l in (0..l_steps).rev() {
            let k = k_start + l;
            let dt = grid.dt(k);
            let est = regs[l].estimate_z(
                &cond_next,
                brownian.dw.slice(s![.., k, ..]),
                dt,
                z_work.clip,
            )?;
            sweep_clip += est.clipped;
            for p in 0..m {
                let zp: Vec<f64> = (0..d).map(|j| est.z[(p, j)]).collect();
                drivers[k].vanishing_shift(&zp, &mut n_vec);
                let lin: f64 = zp.iter().zip(&n_vec).map(|(a, b)| a * b).sum();
                vanish_acc += (drivers[k].f(&zp) + lin).abs() * dt;
            }
            z_work.set_step(k, &est);
            if l > 0 {
                cond_next = regs[l].fit(&target)?.fitted;
            }
        }
        // (b) re-evolve under the updated shift.
        let x_new = evolve(z_work);
        let diff = s_norm_diff(&x_new, &x);
        if !diff.is_finite() {
            return Err(IndiffError::NonFinite(format!(
                "block {block} path distance at sweep {iteration}"
            )));
        }
        let ratio = prev_diff.filter(|pd| *pd > 0.0).map(|pd| diff / pd);
        records.push(BlockRecord {
            block,
            iteration,
            s_norm_diff: diff,
            ratio,
            vanish_residual: vanish_acc / (m * l_steps) as f64,
        });
        if let Some(r) = ratio {
            if r >= 1.0 {
                bad_streak += 1;
            } else {
                bad_streak = 0;
            }
            if bad_streak >= 3 {
                return Err(IndiffError::NonContraction {
                    context: format!("time block {block}"),
                    iterations: iteration,
                    last_diff: diff,
                    ratios: records.iter().filter_map(|r| r.ratio).collect(),
                });
            }
        }
        x = x_new;
        clip_z = sweep_clip;
        prev_diff = Some(diff);
        if iteration >= opts.min_iter && diff <= opts.tol {
            converged = true;
            break;
        }
    }

    // Realize the converged integrand on the final paths and check that the
    // finite-variation process vanishes under the block measure.
    let mut z = Array3::<f64>::zeros((m, l_steps, d));
    let mut v_q = Array2::<f64>::zeros((m, l_steps + 1));
    let mut z_row = vec![0.0_f64; d];
    let mut n_vec = vec![0.0_f64; d];
    for l in 0..l_steps {
        let k = k_start + l;
        let dt = grid.dt(k);
        for p in 0..m {
            for j in 0..d {
                state[j] = x[(p, l, j)];
            }
            z_work.eval_into(k, &state[..d], &mut z_row);
            for j in 0..d {
                z[(p, l, j)] = z_row[j];
            }
            drivers[k].vanishing_shift(&z_row, &mut n_vec);
            let lin: f64 = z_row.iter().zip(&n_vec).map(|(a, b)| a * b).sum();
            v_q[(p, l + 1)] = v_q[(p, l)] + (drivers[k].f(&z_row) + lin) * dt;
        }
    }
    let v_q_norm = crate::fde::v_norm(v_q.view());

    // Conditional value at the block's left boundary, fitted on the fixed
    // start states (the first regressor's design is built on exactly them).
    for p in 0..m {
        for j in 0..d {
            state[j] = x[(p, l_steps, j)];
        }
        target[p] = value_next.eval(&state[..d]);
    }
    let start_reg = StepRegressor::new(&ctxs[k_start], start_logs.view(), k_start)?;
    let start_fit = start_reg.fit(&target)?;
    let lipschitz = fitted_lipschitz(&ctxs[k_start], &start_fit.coefficients, start_logs.view());
    let start_table = ValueFunctionTable::Fitted {
        ctx: ctxs[k_start].clone(),
        coefficients: start_fit.coefficients,
        lipschitz,
    };

    Ok(BlockOutcome {
        x,
        z,
        start_table,
        records,
        v_q_norm,
        converged,
        clip_z,
    })
}

/// Full solution of the nonlinear measure route.
#[derive(Debug)]
pub struct GirsanovSolution {
    pub result: PricingResult,
    /// Integrand as a function of the state, all blocks assembled.
    pub z_table: ZTable,
    /// Conditional-value tables at `t_0, ..., t_J`.
    pub value_tables: Vec<ValueFunctionTable>,
    pub records: Vec<BlockRecord>,
    /// Mean `|F(Z) + <Z, n(Z)>| dt` over base paths and steps.
    pub vanish_residual: f64,
    /// Largest sampled norm of the block-measure finite-variation process.
    pub v_q_norm: f64,
    /// `|` fitted value at the origin `-` mean terminal value under the
    /// converged shifted dynamics `|`, with the stderr of that mean.
    pub value_consistency_gap: f64,
    pub value_consistency_stderr: f64,
    pub converged: bool,
    pub lambda_used: f64,
}

/// Run the route end to end: derive the partition, check the grid aligns
/// with it, iterate the blocks backward, then price on the base paths
/// through the assembled integrand functions.
pub fn solve_nonlinear_girsanov(
    scenario: &Scenario,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
    lambda_value: f64,
    opts: &GirsanovOptions,
) -> Result<GirsanovSolution> {
    let ledger = market::validate_scenario(scenario)?;
    let partition = build_partition(&ledger)?;
    let j_total = partition.n_blocks();
    if grid.n_blocks() != j_total {
        return Err(IndiffError::InvalidInput(format!(
            "grid has {} blocks but the partition needs {j_total}; build the grid \
             with the partition's interior boundaries",
            grid.n_blocks()
        )));
    }
    for (j, &kb) in grid.block_bounds().iter().enumerate() {
        if (grid.t(kb) - partition.boundaries[j]).abs() > 1e-9 * scenario.t_horizon.max(1.0) {
            return Err(IndiffError::InvalidInput(format!(
                "grid block boundary {} differs from partition boundary {}",
                grid.t(kb),
                partition.boundaries[j]
            )));
        }
    }

    let n = grid.n_steps();
    let d = scenario.d;
    let paths = AssetPaths::evolve(scenario, grid, brownian)?;
    let m = paths.m_paths();
    let ctxs = build_contexts(BasisSpec::default(), &paths)?;
    let drivers: Vec<DriverAt> = (0..n).map(|k| scenario.driver_at(grid.t(k))).collect();
    let i_theta = market::theta_integral(scenario, grid);
    let z_clip = z_clip_radius(&ledger, lambda_value, scenario.t_horizon);
    let k3 = ledger.k3.expect("partition construction requires it");

    let terminal_lipschitz = lambda_value.abs()
        * scenario
            .payoff
            .lipschitz_log()
            .expect("partition construction requires it");
    let mut value_tables: Vec<Option<ValueFunctionTable>> = vec![None; j_total + 1];
    value_tables[j_total] = Some(ValueFunctionTable::Exact {
        payoff: scenario.payoff.clone(),
        lambda_value,
        i_theta,
        lipschitz: terminal_lipschitz,
    });

    let mut z_table = ZTable::zeros(Arc::clone(&ctxs), n, d, z_clip);
    let mut records = Vec::new();
    let mut v_q_norm = 0.0_f64;
    let mut clip_z = 0_usize;
    let mut converged = true;
    for block in (1..=j_total).rev() {
        let (k_start, _) = grid.block(block - 1);
        let start_logs = log_states_at(&paths, k_start);
        let value_next = value_tables[block]
            .as_ref()
            .expect("right boundary solved first");
        let out = iterate_forward_block(
            scenario,
            grid,
            brownian,
            &ctxs,
            &drivers,
            block,
            &start_logs,
            value_next,
            &mut z_table,
            opts,
        )?;
        converged &= out.converged;
        v_q_norm = v_q_norm.max(out.v_q_norm);
        clip_z += out.clip_z;
        records.extend(out.records);
        value_tables[block - 1] = Some(out.start_table);
    }
    let value_tables: Vec<ValueFunctionTable> =
        value_tables.into_iter().map(|t| t.unwrap()).collect();

    // Assembly on the base paths: V accumulates F(Z) dt, and the price is
    // the mean of the per-path combination (the zero-claim leg vanishes
    // identically: a constant conditional value has an exactly zero
    // integrand, and F(0) = 0 to the last bit).
    let mut combo = vec![0.0_f64; m];
    let mut hedge = Array2::<f64>::zeros((m, n));
    let mut strategy = Array2::<f64>::zeros((m, n));
    let mut vanish_acc = 0.0_f64;
    let mut z_row = vec![0.0_f64; d];
    let mut n_vec = vec![0.0_f64; d];
    let mut state = vec![0.0_f64; d];
    for p in 0..m {
        let g = scenario.payoff.eval_path(paths.s.slice(s![p, .., ..]));
        let mut acc = 0.0;
        for k in 0..n {
            let dt = grid.dt(k);
            for j in 0..d {
                state[j] = paths.s[(p, k, j)].ln();
            }
            z_table.eval_into(k, &state[..d], &mut z_row);
            let drv = &drivers[k];
            acc += drv.f(&z_row) * dt;
            drv.vanishing_shift(&z_row, &mut n_vec);
            let lin: f64 = z_row.iter().zip(&n_vec).map(|(a, b)| a * b).sum();
            vanish_acc += (drv.f(&z_row) + lin).abs() * dt;
            let proj: f64 = drv.sigma_p.iter().zip(&z_row).map(|(a, b)| a * b).sum();
            hedge[(p, k)] = -proj / drv.sigma_p_sq;
            strategy[(p, k)] = drv.optimal_position(&z_row);
        }
        combo[p] = lambda_value * g + acc;
    }
    let (price, price_stderr) = stats::mean_and_stderr(&combo);
    let vanish_residual = vanish_acc / (m * n) as f64;

    // Consistency: under the converged shifted dynamics the conditional
    // value is a martingale, so the fitted value at the origin must match
    // the mean terminal value of a full shifted evolution.
    let (q_paths, _) = AssetPaths::evolve_shifted(scenario, grid, brownian, "Q-vanish", {
        let z_table = &z_table;
        let drivers = &drivers;
        move |k, x, out| {
            let mut z = [0.0_f64; MAX_DIM];
            z_table.eval_into(k, x, &mut z[..d]);
            drivers[k].vanishing_shift(&z[..d], out);
        }
    })?;
    let q_terminal: Vec<f64> = (0..m)
        .map(|p| {
            lambda_value * scenario.payoff.eval_path(q_paths.s.slice(s![p, .., ..])) + i_theta
        })
        .collect();
    let (q_mean, q_se) = stats::mean_and_stderr(&q_terminal);
    let x0: Vec<f64> = scenario.s0.iter().map(|s| s.ln()).collect();
    let value_at_origin = value_tables[0].eval(&x0);
    let value_consistency_gap = (value_at_origin - q_mean).abs();

    let mut notes = vec![
        format!("blocks = {j_total}"),
        format!("converged = {converged}"),
        format!("vanish residual = {vanish_residual:.3e}"),
        format!("value consistency gap = {value_consistency_gap:.3e} (se {q_se:.3e})"),
    ];
    let alarm = 1.5 * k3;
    for (j, table) in value_tables.iter().enumerate() {
        let lip = table.lipschitz_estimate();
        if k3 > 0.0 && lip > alarm {
            notes.push(format!(
                "lipschitz alarm at boundary {j}: estimate {lip:.3} exceeds {alarm:.3}"
            ));
        }
    }

    Ok(GirsanovSolution {
        result: PricingResult {
            price,
            price_stderr,
            hedge,
            optimal_strategy: strategy,
            diagnostics: RouteDiagnostics {
                route: "girsanov".to_string(),
                clip_y: 0,
                clip_z,
                notes,
            },
        },
        z_table,
        value_tables,
        records,
        vanish_residual,
        v_q_norm,
        value_consistency_gap,
        value_consistency_stderr: q_se,
        converged,
        lambda_used: lambda_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::presets;
    use crate::{bsde, fde};
    use approx::assert_relative_eq;

    fn ref_scenario() -> Scenario {
        presets::capped_claim_two_assets()
    }

    fn block_grid(scenario: &Scenario, target_steps: usize) -> TimeGrid {
        let ledger = market::validate_scenario(scenario).unwrap();
        let partition = build_partition(&ledger).unwrap();
        TimeGrid::with_boundaries(scenario.t_horizon, target_steps, partition.interior()).unwrap()
    }

    #[test]
    fn partition_matches_the_documented_bound() {
        let ledger = market::validate_scenario(&ref_scenario()).unwrap();
        let partition = build_partition(&ledger).unwrap();
        assert_eq!(partition.n_blocks(), 3);
        assert_relative_eq!(partition.max_delta, 1.0 / (8.0 * 4.0 * ledger.k4));
        assert_relative_eq!(partition.boundaries[1], 1.0 / 3.0, max_relative = 1e-12);

        // Doubling the Lipschitz constant quadruples the block count.
        let mut doubled = ref_scenario();
        doubled.lambda = 2.0;
        let ledger2 = market::validate_scenario(&doubled).unwrap();
        assert_eq!(build_partition(&ledger2).unwrap().n_blocks(), 12);

        // A short horizon fits in one block.
        let mut short = ref_scenario();
        short.t_horizon = 0.3;
        let ledger3 = market::validate_scenario(&short).unwrap();
        assert_eq!(build_partition(&ledger3).unwrap().n_blocks(), 1);
    }

    #[test]
    fn path_dependent_payoff_is_rejected_by_name() {
        let mut sc = ref_scenario();
        sc.payoff = Payoff::MinCapAverage {
            asset: 0,
            cap: 2.0,
            offset: 0.0,
        };
        let ledger = market::validate_scenario(&sc).unwrap();
        match build_partition(&ledger).unwrap_err() {
            IndiffError::Assumption { assumption, .. } => assert_eq!(assumption, "A4"),
            other => panic!("expected an assumption rejection, got {other:?}"),
        }
    }

    #[test]
    fn flat_payoff_needs_a_single_block() {
        let mut sc = ref_scenario();
        sc.payoff = Payoff::Constant { value: 2.0 };
        let ledger = market::validate_scenario(&sc).unwrap();
        assert_eq!(ledger.k3, Some(0.0));
        let partition = build_partition(&ledger).unwrap();
        assert_eq!(partition.n_blocks(), 1);
        assert!(partition.max_delta.is_infinite());
    }

    #[test]
    fn misaligned_grid_is_rejected() {
        let sc = ref_scenario();
        let grid = TimeGrid::uniform(1.0, 12).unwrap();
        let brownian = BrownianBatch::generate(&grid, 2_000, sc.d, 5).unwrap();
        let err = solve_nonlinear_girsanov(&sc, &grid, &brownian, 1.0, &Default::default())
            .unwrap_err();
        assert!(matches!(err, IndiffError::InvalidInput(_)), "{err:?}");
    }

    #[test]
    fn deterministic_continuation_converges_in_one_sweep() {
        let sc = ref_scenario();
        let grid = block_grid(&sc, 9);
        let brownian = BrownianBatch::generate(&grid, 2_000, sc.d, 6).unwrap();
        let paths = AssetPaths::evolve(&sc, &grid, &brownian).unwrap();
        let ctxs = build_contexts(BasisSpec::default(), &paths).unwrap();
        let n = grid.n_steps();
        let drivers: Vec<DriverAt> = (0..n).map(|k| sc.driver_at(grid.t(k))).collect();
        let value_next = ValueFunctionTable::Exact {
            payoff: Payoff::Constant { value: 2.0 },
            lambda_value: 1.0,
            i_theta: 0.08,
            lipschitz: 0.0,
        };
        let mut z_work = ZTable::zeros(Arc::clone(&ctxs), n, sc.d, 10.0);
        let (k_start, _) = grid.block(2);
        let start_logs = log_states_at(&paths, k_start);
        let out = iterate_forward_block(
            &sc,
            &grid,
            &brownian,
            &ctxs,
            &drivers,
            3,
            &start_logs,
            &value_next,
            &mut z_work,
            &GirsanovOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].s_norm_diff, 0.0);
        assert!(out.z.iter().all(|&z| z == 0.0));
        assert_eq!(out.v_q_norm, 0.0);
        // The fitted boundary value is the constant itself.
        assert_eq!(out.start_table.eval(&[0.3, -0.1]), 2.08);
        assert_eq!(out.start_table.lipschitz_estimate(), 0.0);
    }

    #[test]
    fn zero_claim_prices_at_exactly_zero() {
        let sc = ref_scenario();
        let grid = block_grid(&sc, 9);
        let brownian = BrownianBatch::generate(&grid, 2_000, sc.d, 7).unwrap();
        let sol =
            solve_nonlinear_girsanov(&sc, &grid, &brownian, 0.0, &Default::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.result.price, 0.0);
        assert_eq!(sol.result.price_stderr, 0.0);
        assert_eq!(sol.vanish_residual, 0.0);
        assert_eq!(sol.v_q_norm, 0.0);
        assert!(sol.records.iter().all(|r| r.s_norm_diff == 0.0));
        assert!(sol.result.optimal_strategy[(0, 0)] != 0.0); // pure investment remains
    }

    #[test]
    fn cash_claim_prices_exactly() {
        let mut sc = ref_scenario();
        sc.payoff = Payoff::Constant { value: 2.0 };
        let grid = TimeGrid::uniform(1.0, 9).unwrap();
        let brownian = BrownianBatch::generate(&grid, 2_000, sc.d, 8).unwrap();
        let sol =
            solve_nonlinear_girsanov(&sc, &grid, &brownian, 1.0, &Default::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.result.price, 2.0);
        assert!(sol.result.price_stderr < 1e-12);
    }

    #[test]
    fn ref_price_matches_oracle_and_other_routes() {
        let sc = ref_scenario();
        let grid = block_grid(&sc, 30);
        let m = 20_000;
        let brownian = BrownianBatch::generate(&grid, m, sc.d, 9).unwrap();
        let opts = GirsanovOptions::default();
        let sol = solve_nonlinear_girsanov(&sc, &grid, &brownian, 1.0, &opts).unwrap();
        assert!(sol.converged, "records: {:?}", sol.records);

        // Identity and consistency diagnostics.
        let scale = 2.0_f64; // lambda x claim bound
        assert!(
            sol.vanish_residual <= 1e-8 * scale,
            "vanish residual {}",
            sol.vanish_residual
        );
        assert!(sol.v_q_norm <= opts.vanish_tol, "V^Q norm {}", sol.v_q_norm);
        assert!(
            sol.value_consistency_gap <= 3.0 * sol.value_consistency_stderr,
            "value gap {} vs se {}",
            sol.value_consistency_gap,
            sol.value_consistency_stderr
        );
        let k3 = 2.0;
        for table in &sol.value_tables {
            assert!(
                table.lipschitz_estimate() <= 1.5 * k3,
                "lipschitz estimate {}",
                table.lipschitz_estimate()
            );
        }

        // Oracle agreement.
        let oracle = oracles::distortion_price(
            &oracles::project_scenario(&sc).unwrap(),
            oracles::DEFAULT_NODES,
        )
        .unwrap();
        let rel = (sol.result.price - oracle).abs() / oracle;
        assert!(rel < 0.03, "price {} vs oracle {oracle}", sol.result.price);

        // Cross-route agreement on the identical grid and noise.
        let paths = AssetPaths::evolve(&sc, &grid, &brownian).unwrap();
        let ctxs = build_contexts(BasisSpec::default(), &paths).unwrap();
        let b_l = bsde::solve_bsde(&sc, &grid, &paths, &brownian, &ctxs, 1.0).unwrap();
        let b_0 = bsde::solve_bsde(&sc, &grid, &paths, &brownian, &ctxs, 0.0).unwrap();
        let b_price = bsde::indifference_price(&b_l, &b_0).unwrap();
        let tol = (2.0 * (sol.result.price_stderr + b_price.price_stderr)).max(0.02);
        assert!(
            (sol.result.price - b_price.price).abs() <= tol,
            "girsanov {} vs bsde {} (tol {tol})",
            sol.result.price,
            b_price.price
        );
        let f_l = fde::picard_solve_fde(
            &sc,
            &grid,
            &paths,
            &brownian,
            &ctxs,
            1.0,
            &Default::default(),
        )
        .unwrap();
        let f_0 = fde::picard_solve_fde(
            &sc,
            &grid,
            &paths,
            &brownian,
            &ctxs,
            0.0,
            &Default::default(),
        )
        .unwrap();
        let f_price = fde::price_pseudo_linear(&sc, &grid, &paths, &f_l, &f_0, 1.0).unwrap();
        let tol_f = (2.0 * (sol.result.price_stderr + f_price.price_stderr)).max(0.02);
        assert!(
            (sol.result.price - f_price.price).abs() <= tol_f,
            "girsanov {} vs fde {} (tol {tol_f})",
            sol.result.price,
            f_price.price
        );
    }

    #[test]
    fn terminal_block_contracts_fast() {
        let sc = ref_scenario();
        let grid = block_grid(&sc, 30);
        let brownian = BrownianBatch::generate(&grid, 10_000, sc.d, 10).unwrap();
        let opts = GirsanovOptions {
            tol: 1e-5,
            min_iter: 3,
            ..Default::default()
        };
        let sol = solve_nonlinear_girsanov(&sc, &grid, &brownian, 1.0, &opts).unwrap();
        let terminal: Vec<&BlockRecord> =
            sol.records.iter().filter(|r| r.block == 3).collect();
        assert!(terminal.len() >= 3);
        let ratios: Vec<f64> = terminal.iter().filter_map(|r| r.ratio).collect();
        assert!(!ratios.is_empty());
        for r in &ratios {
            assert!(*r <= 0.6, "contraction ratio {r} above 0.6 ({ratios:?})");
        }
    }
}
