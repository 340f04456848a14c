//! Least-squares Monte Carlo primitives: per-grid-time polynomial bases in
//! log-prices, conditional-expectation fits, and regression estimates of the
//! Brownian integrand of a conditional martingale.
//!
//! Basis contexts are frozen from a reference path cloud (standardization
//! constants and active-term sets), so coefficient vectors produced on
//! different path clouds — for example on differently drifted measures —
//! refer to the same functions and can be added term by term.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, s};
use std::sync::Arc;

use crate::error::{IndiffError, Result};
use crate::paths::AssetPaths;
use crate::stats;

/// Hard cap on basis size; keeps per-evaluation scratch on the stack.
pub const MAX_BASIS: usize = 64;
/// Hard cap on the number of regression features (non-traded assets).
pub const MAX_DIM: usize = 16;
/// A feature whose sample deviation falls below this relative floor is
/// treated as constant and excluded from the basis.
const INACTIVE_STD_FLOOR: f64 = 1e-12;
/// Cholesky pivot guard, relative to the largest diagonal entry of the
/// normal matrix.
const PIVOT_REL_TOL: f64 = 1e-10;
/// Normal-equation residual guard, relative to the right-hand side.
const NORMAL_EQ_RTOL: f64 = 1e-8;
/// Minimum paths per retained basis function.
const PATHS_PER_BASIS: usize = 50;

/// Shape of the polynomial basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BasisSpec {
    /// Maximal total degree of the monomials.
    pub degree: usize,
    /// Whether mixed monomials (more than one feature) are included.
    pub include_cross: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self {
            degree: 2,
            include_cross: true,
        }
    }
}

/// Multi-indices with total degree up to `degree`, ordered by total degree
/// and, within a degree, by descending leading powers.
fn enumerate_terms(d: usize, degree: usize, include_cross: bool) -> Vec<Vec<u8>> {
    fn rec(
        d: usize,
        remaining: usize,
        pos: usize,
        alpha: &mut Vec<u8>,
        include_cross: bool,
        out: &mut Vec<Vec<u8>>,
    ) {
        if pos == d {
            if remaining == 0
                && (include_cross || alpha.iter().filter(|&&p| p > 0).count() <= 1)
            {
                out.push(alpha.clone());
            }
            return;
        }
        let mut p = remaining;
        loop {
            alpha[pos] = p as u8;
            rec(d, remaining - p, pos + 1, alpha, include_cross, out);
            if p == 0 {
                break;
            }
            p -= 1;
        }
        alpha[pos] = 0;
    }
    let mut terms = Vec::new();
    let mut alpha = vec![0u8; d];
    for deg in 0..=degree {
        rec(d, deg, 0, &mut alpha, include_cross, &mut terms);
    }
    terms
}

/// Standardization constants and active-term bookkeeping for one grid time,
/// frozen from a reference cloud of log-price states.
#[derive(Debug, Clone)]
pub struct BasisContext {
    pub spec: BasisSpec,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub active_features: Vec<bool>,
    /// Monomial multi-indices in the standardized features.
    pub terms: Vec<Vec<u8>>,
    /// A term is active iff every feature it touches is active.
    pub active_terms: Vec<bool>,
}

impl BasisContext {
    /// Freeze a context from log-price states of shape `(M, d)`.
    pub fn from_log_states(spec: BasisSpec, log_states: ArrayView2<'_, f64>) -> Result<Self> {
        let d = log_states.ncols();
        if d == 0 || d > MAX_DIM {
            return Err(IndiffError::InvalidInput(format!(
                "basis supports 1..={MAX_DIM} features, got {d}"
            )));
        }
        let mut means = Vec::with_capacity(d);
        let mut stds = Vec::with_capacity(d);
        let mut active_features = Vec::with_capacity(d);
        for j in 0..d {
            let col: Vec<f64> = log_states.column(j).iter().copied().collect();
            let mean = stats::mean(&col);
            let std = stats::sample_std(&col);
            active_features.push(std >= INACTIVE_STD_FLOOR * (1.0 + mean.abs()));
            means.push(mean);
            stds.push(std);
        }
        let terms = enumerate_terms(d, spec.degree, spec.include_cross);
        if terms.len() > MAX_BASIS {
            return Err(IndiffError::InvalidInput(format!(
                "basis of {} terms exceeds the supported maximum {MAX_BASIS}",
                terms.len()
            )));
        }
        let active_terms = terms
            .iter()
            .map(|alpha| {
                alpha
                    .iter()
                    .enumerate()
                    .all(|(j, &p)| p == 0 || active_features[j])
            })
            .collect();
        Ok(Self {
            spec,
            means,
            stds,
            active_features,
            terms,
            active_terms,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Evaluate every basis monomial at one log-price state. Inactive terms
    /// evaluate to zero so that full-length coefficient vectors can be used
    /// unchanged.
    pub fn eval_row(&self, log_state: &[f64], out: &mut [f64]) {
        debug_assert_eq!(log_state.len(), self.dim());
        debug_assert_eq!(out.len(), self.n_terms());
        let mut u = [0.0_f64; MAX_DIM];
        for (j, uj) in u.iter_mut().take(self.dim()).enumerate() {
            *uj = if self.active_features[j] {
                (log_state[j] - self.means[j]) / self.stds[j]
            } else {
                0.0
            };
        }
        for (b, alpha) in self.terms.iter().enumerate() {
            if !self.active_terms[b] {
                out[b] = 0.0;
                continue;
            }
            let mut v = 1.0;
            for (j, &p) in alpha.iter().enumerate() {
                match p {
                    0 => {}
                    1 => v *= u[j],
                    _ => v *= u[j].powi(p as i32),
                }
            }
            out[b] = v;
        }
    }
}

/// Log-price states of all paths at grid time `k`, shape `(M, d)`.
pub fn log_states_at(paths: &AssetPaths, k: usize) -> Array2<f64> {
    paths.s.slice(s![.., k, ..]).mapv(f64::ln)
}

/// Freeze one basis context per grid time (`0..=N`) from a reference cloud.
pub fn build_contexts(spec: BasisSpec, paths: &AssetPaths) -> Result<Arc<Vec<BasisContext>>> {
    let mut ctxs = Vec::with_capacity(paths.n_steps() + 1);
    for k in 0..=paths.n_steps() {
        let logs = log_states_at(paths, k);
        ctxs.push(BasisContext::from_log_states(spec, logs.view())?);
    }
    Ok(Arc::new(ctxs))
}

fn cholesky_with_guard(a: &DMatrix<f64>, rel_tol: f64) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let tol = rel_tol * max_diag.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)];
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > tol) {
            return Err(j);
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

fn solve_cholesky(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut w = b.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            w[i] -= lik * w[k];
        }
        w[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[(k, i)];
            w[i] -= lki * w[k];
        }
        w[i] /= l[(i, i)];
    }
    w
}

/// Result of one conditional-expectation fit.
#[derive(Debug, Clone)]
pub struct CondexpFit {
    /// Full-length coefficient vector (zeros at inactive or dropped terms).
    pub coefficients: Vec<f64>,
    /// Fitted values per path.
    pub fitted: Vec<f64>,
    /// Root-mean-square residual of the fit.
    pub residual_norm: f64,
}

/// Regression estimate of the Brownian integrand at one step.
#[derive(Debug, Clone)]
pub struct ZEstimate {
    /// Per-path integrand values, shape `(M, d)`, after truncation.
    pub z: Array2<f64>,
    /// Full-length coefficient rows, shape `(d, B)` (before truncation —
    /// the truncation radius travels with the coefficients).
    pub coefficients: DMatrix<f64>,
    /// Number of paths whose integrand was scaled back to the radius.
    pub clipped: usize,
}

/// Cross-sectional least squares at one grid time: the design is built once
/// and reused for every target fitted at this time.
#[derive(Debug)]
pub struct StepRegressor {
    ctx: BasisContext,
    /// Standardized monomial rows over the *active* terms, shape `(M, A)`.
    rows: DMatrix<f64>,
    /// Active-term list as indices into the full basis.
    active: Vec<usize>,
    /// Retained columns as indices into `active`.
    kept: Vec<usize>,
    /// Full-basis indices dropped by the rank fallback.
    dropped: Vec<usize>,
    /// Normal matrix restricted to the retained columns.
    xtx_kept: DMatrix<f64>,
    chol: DMatrix<f64>,
    step: usize,
}

impl StepRegressor {
    /// Build the design at grid time `step` from log-price states `(M, d)`.
    ///
    /// Rank deficiency is repaired greedily: when a Cholesky pivot of the
    /// normal matrix falls below the guard, the offending column — the
    /// latest one in degree-then-lexicographic order among the dependent
    /// set — is dropped and the factorization restarts.
    pub fn new(ctx: &BasisContext, log_states: ArrayView2<'_, f64>, step: usize) -> Result<Self> {
        let m = log_states.nrows();
        let d = log_states.ncols();
        if d != ctx.dim() {
            return Err(IndiffError::InvalidInput(format!(
                "states have {d} features, context expects {}",
                ctx.dim()
            )));
        }
        let active: Vec<usize> = ctx
            .active_terms
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect();
        if m < PATHS_PER_BASIS * active.len() {
            return Err(IndiffError::Regression {
                step,
                detail: format!(
                    "{m} paths cannot support {} basis functions (need at least {})",
                    active.len(),
                    PATHS_PER_BASIS * active.len()
                ),
            });
        }
        let b_full = ctx.n_terms();
        let mut rows = DMatrix::<f64>::zeros(m, active.len());
        let mut full_row = vec![0.0_f64; b_full];
        let mut state = vec![0.0_f64; d];
        for mi in 0..m {
            for (j, slot) in state.iter_mut().enumerate() {
                *slot = log_states[(mi, j)];
            }
            ctx.eval_row(&state, &mut full_row);
            for (c, &fi) in active.iter().enumerate() {
                rows[(mi, c)] = full_row[fi];
            }
        }
        let xtx_active = rows.tr_mul(&rows);
        let mut kept: Vec<usize> = (0..active.len()).collect();
        let mut dropped = Vec::new();
        let (chol, xtx_kept) = loop {
            let k = kept.len();
            let sub = DMatrix::from_fn(k, k, |i, j| xtx_active[(kept[i], kept[j])]);
            match cholesky_with_guard(&sub, PIVOT_REL_TOL) {
                Ok(l) => break (l, sub),
                Err(j) => {
                    dropped.push(active[kept[j]]);
                    kept.remove(j);
                    if kept.is_empty() {
                        return Err(IndiffError::Regression {
                            step,
                            detail: "normal matrix degenerate even on the constant term".into(),
                        });
                    }
                }
            }
        };
        Ok(Self {
            ctx: ctx.clone(),
            rows,
            active,
            kept,
            dropped,
            xtx_kept,
            chol,
            step,
        })
    }

    /// Full-basis indices the rank fallback removed.
    pub fn dropped_terms(&self) -> &[usize] {
        &self.dropped
    }

    /// Number of columns actually used.
    pub fn n_kept(&self) -> usize {
        self.kept.len()
    }

    pub fn m_paths(&self) -> usize {
        self.rows.nrows()
    }

    /// Least-squares projection of `target` onto the basis: the Monte Carlo
    /// conditional expectation given the time-`step` states.
    pub fn fit(&self, target: &[f64]) -> Result<CondexpFit> {
        let m = self.rows.nrows();
        if target.len() != m {
            return Err(IndiffError::InvalidInput(format!(
                "target has {} entries, design has {m} paths",
                target.len()
            )));
        }
        if target.iter().any(|x| !x.is_finite()) {
            return Err(IndiffError::NonFinite(format!(
                "regression target at step {}",
                self.step
            )));
        }
        // A constant target is its own conditional expectation; short-circuit
        // so the projection (and any centered residual built from it) is
        // exact to the last bit rather than to summation rounding.
        let first = target[0];
        if target.iter().all(|&y| y == first) {
            let mut coefficients = vec![0.0_f64; self.ctx.n_terms()];
            coefficients[0] = first;
            return Ok(CondexpFit {
                coefficients,
                fitted: vec![first; m],
                residual_norm: 0.0,
            });
        }
        let k = self.kept.len();
        let mut b = DVector::<f64>::zeros(k);
        for mi in 0..m {
            let y = target[mi];
            for (c, &ka) in self.kept.iter().enumerate() {
                b[c] += self.rows[(mi, ka)] * y;
            }
        }
        let beta = solve_cholesky(&self.chol, &b);
        let residual = &b - &self.xtx_kept * &beta;
        let b_scale = b.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
        let r_inf = residual.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        if r_inf > NORMAL_EQ_RTOL * b_scale {
            return Err(IndiffError::Regression {
                step: self.step,
                detail: format!(
                    "normal equations solved to relative residual {:.3e}",
                    r_inf / b_scale
                ),
            });
        }
        let mut fitted = vec![0.0_f64; m];
        let mut sq_sum = 0.0;
        for mi in 0..m {
            let mut v = 0.0;
            for (c, &ka) in self.kept.iter().enumerate() {
                v += self.rows[(mi, ka)] * beta[c];
            }
            fitted[mi] = v;
            let r = target[mi] - v;
            sq_sum += r * r;
        }
        let mut coefficients = vec![0.0_f64; self.ctx.n_terms()];
        for (c, &ka) in self.kept.iter().enumerate() {
            coefficients[self.active[ka]] = beta[c];
        }
        Ok(CondexpFit {
            coefficients,
            fitted,
            residual_norm: (sq_sum / m as f64).sqrt(),
        })
    }

    /// Estimate the Brownian integrand of the martingale part of `target`
    /// over `[t_k, t_k + dt]`: component `j` is the projection of
    /// `(target - fit(target)) * dW_j / dt` onto the time-`k` basis. The
    /// centering removes the conditional mean exactly, so a deterministic
    /// target yields an exactly vanishing integrand. Per-path values are
    /// truncated to the ball of radius `clip`.
    pub fn estimate_z(
        &self,
        target: &[f64],
        dw: ArrayView2<'_, f64>,
        dt: f64,
        clip: f64,
    ) -> Result<ZEstimate> {
        let m = self.rows.nrows();
        let d = dw.ncols();
        if dw.nrows() != m {
            return Err(IndiffError::InvalidInput(format!(
                "increments have {} rows, design has {m} paths",
                dw.nrows()
            )));
        }
        let centered_fit = self.fit(target)?;
        let hc: Vec<f64> = target
            .iter()
            .zip(&centered_fit.fitted)
            .map(|(y, f)| y - f)
            .collect();
        let mut z = Array2::<f64>::zeros((m, d));
        let mut coefficients = DMatrix::<f64>::zeros(d, self.ctx.n_terms());
        let mut scratch = vec![0.0_f64; m];
        for j in 0..d {
            for mi in 0..m {
                scratch[mi] = hc[mi] * dw[(mi, j)] / dt;
            }
            let fit = self.fit(&scratch)?;
            for mi in 0..m {
                z[(mi, j)] = fit.fitted[mi];
            }
            for (b, &c) in fit.coefficients.iter().enumerate() {
                coefficients[(j, b)] = c;
            }
        }
        let mut clipped = 0_usize;
        for mi in 0..m {
            let norm: f64 = (0..d).map(|j| z[(mi, j)] * z[(mi, j)]).sum::<f64>().sqrt();
            if norm > clip {
                let scale = clip / norm;
                for j in 0..d {
                    z[(mi, j)] *= scale;
                }
                clipped += 1;
            }
        }
        Ok(ZEstimate {
            z,
            coefficients,
            clipped,
        })
    }
}

/// Per-step coefficient tables of a `d`-vector field of basis functions —
/// the functional form of an integrand estimate. Tables sharing the same
/// frozen contexts represent functions of the state and can be added term
/// by term, evaluated on any path cloud, and compared across measures.
#[derive(Debug, Clone)]
pub struct ZTable {
    /// One `(d, B)` coefficient matrix per step `k = 0..N`.
    pub coeffs: Vec<DMatrix<f64>>,
    pub ctxs: Arc<Vec<BasisContext>>,
    /// Truncation radius applied at evaluation time.
    pub clip: f64,
}

impl ZTable {
    /// All-zero table over `n_steps` steps of a `dim`-vector field.
    pub fn zeros(ctxs: Arc<Vec<BasisContext>>, n_steps: usize, dim: usize, clip: f64) -> Self {
        let coeffs = (0..n_steps)
            .map(|k| DMatrix::<f64>::zeros(dim, ctxs[k].n_terms()))
            .collect();
        Self { coeffs, ctxs, clip }
    }

    pub fn n_steps(&self) -> usize {
        self.coeffs.len()
    }

    pub fn dim(&self) -> usize {
        self.coeffs.first().map_or(0, |c| c.nrows())
    }

    /// Install the coefficients estimated at step `k`.
    pub fn set_step(&mut self, k: usize, estimate: &ZEstimate) {
        self.coeffs[k] = estimate.coefficients.clone();
    }

    /// Evaluate the field at step `k` and log-price state, truncating to the
    /// table's radius. Allocation-free.
    pub fn eval_into(&self, k: usize, log_state: &[f64], out: &mut [f64]) {
        let ctx = &self.ctxs[k];
        let coef = &self.coeffs[k];
        let b = ctx.n_terms();
        let mut row = [0.0_f64; MAX_BASIS];
        ctx.eval_row(log_state, &mut row[..b]);
        for (j, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, r) in row[..b].iter().enumerate() {
                acc += coef[(j, t)] * r;
            }
            *slot = acc;
        }
        let norm: f64 = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > self.clip {
            let scale = self.clip / norm;
            for x in out.iter_mut() {
                *x *= scale;
            }
        }
    }

    /// Term-by-term sum with another table over the *same* frozen contexts.
    pub fn add(&self, other: &ZTable) -> Result<ZTable> {
        if !Arc::ptr_eq(&self.ctxs, &other.ctxs) || self.coeffs.len() != other.coeffs.len() {
            return Err(IndiffError::InvalidInput(
                "coefficient tables built over different contexts cannot be added".into(),
            ));
        }
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ZTable {
            coeffs,
            ctxs: Arc::clone(&self.ctxs),
            clip: self.clip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::paths::{AssetPaths, BrownianBatch};
    use crate::presets;
    use approx::assert_relative_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn demo_cloud(m: usize, n: usize, seed: u64) -> (AssetPaths, BrownianBatch, TimeGrid) {
        let sc = presets::capped_claim_two_assets();
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let bb = BrownianBatch::generate(&grid, m, 2, seed).unwrap();
        let paths = AssetPaths::evolve(&sc, &grid, &bb).unwrap();
        (paths, bb, grid)
    }

    #[test]
    fn terms_are_ordered_by_degree() {
        let terms = enumerate_terms(2, 2, true);
        let expected: Vec<Vec<u8>> = vec![
            vec![0, 0],
            vec![1, 0],
            vec![0, 1],
            vec![2, 0],
            vec![1, 1],
            vec![0, 2],
        ];
        assert_eq!(terms, expected);
        let no_cross = enumerate_terms(2, 2, false);
        assert!(!no_cross.contains(&vec![1, 1]));
        assert_eq!(no_cross.len(), 5);
    }

    #[test]
    fn fit_reproduces_targets_in_the_span() {
        let (paths, _, _) = demo_cloud(5_000, 2, 101);
        let logs = log_states_at(&paths, 1);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let reg = StepRegressor::new(&ctx, logs.view(), 1).unwrap();
        let target: Vec<f64> = (0..5_000)
            .map(|m| {
                let (x, y) = (logs[(m, 0)], logs[(m, 1)]);
                2.0 + 3.0 * x - y + 0.5 * x * x - 0.25 * x * y
            })
            .collect();
        let fit = reg.fit(&target).unwrap();
        assert!(reg.dropped_terms().is_empty());
        for (f, t) in fit.fitted.iter().zip(&target) {
            assert_relative_eq!(f, t, epsilon = 1e-8, max_relative = 1e-8);
        }
        assert!(fit.residual_norm < 1e-8);
    }

    #[test]
    fn independent_noise_projects_to_its_mean() {
        let (paths, _, _) = demo_cloud(20_000, 1, 7);
        let logs = log_states_at(&paths, 1);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let reg = StepRegressor::new(&ctx, logs.view(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let target: Vec<f64> = (0..20_000)
            .map(|_| 0.3 + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let fit = reg.fit(&target).unwrap();
        let mean_t = stats::mean(&target);
        let mean_f = stats::mean(&fit.fitted);
        // The constant column makes fitted and target means agree exactly.
        assert_relative_eq!(mean_f, mean_t, max_relative = 1e-10);
        // Noise independent of the states: almost no explained variance.
        let var_f = stats::sample_std(&fit.fitted).powi(2);
        let var_t = stats::sample_std(&target).powi(2);
        assert!(var_f / var_t < 0.01, "explained share {}", var_f / var_t);
        assert!((fit.residual_norm - 1.0).abs() < 0.05);
    }

    #[test]
    fn fitting_is_idempotent() {
        let (paths, _, _) = demo_cloud(4_000, 1, 9);
        let logs = log_states_at(&paths, 1);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let reg = StepRegressor::new(&ctx, logs.view(), 1).unwrap();
        let target: Vec<f64> = (0..4_000).map(|m| paths.s[(m, 1, 0)].min(2.0)).collect();
        let fit = reg.fit(&target).unwrap();
        let refit = reg.fit(&fit.fitted).unwrap();
        for (a, b) in refit.fitted.iter().zip(&fit.fitted) {
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-9);
        }
    }

    #[test]
    fn z_estimate_recovers_brownian_loadings() {
        let grid = TimeGrid::uniform(0.25, 1).unwrap();
        let m = 40_000;
        let bb = BrownianBatch::generate(&grid, m, 2, 13).unwrap();
        let sc = presets::capped_claim_two_assets();
        let paths = AssetPaths::evolve(&sc, &grid, &bb).unwrap();
        let logs = log_states_at(&paths, 0);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        // Time-zero states are a point mass: only the constant term is live.
        assert_eq!(
            ctx.active_terms,
            vec![true, false, false, false, false, false]
        );
        let reg = StepRegressor::new(&ctx, logs.view(), 0).unwrap();
        let target: Vec<f64> = (0..m)
            .map(|p| 5.0 + 1.7 * bb.dw[(p, 0, 0)] - 0.6 * bb.dw[(p, 0, 1)])
            .collect();
        let est = reg
            .estimate_z(&target, bb.dw.slice(s![.., 0, ..]), grid.dt(0), 1e6)
            .unwrap();
        assert_eq!(est.clipped, 0);
        let z0 = est.z.column(0).to_vec();
        let z1 = est.z.column(1).to_vec();
        assert!((stats::mean(&z0) - 1.7).abs() < 0.05, "z0 {}", stats::mean(&z0));
        assert!((stats::mean(&z1) + 0.6).abs() < 0.05, "z1 {}", stats::mean(&z1));
    }

    #[test]
    fn deterministic_target_has_exactly_zero_integrand() {
        let (paths, bb, grid) = demo_cloud(3_000, 1, 21);
        let logs = log_states_at(&paths, 0);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let reg = StepRegressor::new(&ctx, logs.view(), 0).unwrap();
        let target = vec![0.7_f64; 3_000];
        let fit = reg.fit(&target).unwrap();
        assert!(fit.fitted.iter().all(|&f| (f - 0.7).abs() < 1e-12));
        let est = reg
            .estimate_z(&target, bb.dw.slice(s![.., 0, ..]), grid.dt(0), 1e6)
            .unwrap();
        assert!(est.z.iter().all(|&z| z == 0.0));
        assert!(est.coefficients.iter().all(|&c| c == 0.0));
        assert_eq!(est.clipped, 0);
    }

    #[test]
    fn duplicate_features_drop_columns_and_still_fit() {
        let m = 2_000;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut logs = Array2::<f64>::zeros((m, 2));
        for p in 0..m {
            let x: f64 = rng.sample(StandardNormal);
            logs[(p, 0)] = x;
            logs[(p, 1)] = x; // perfectly redundant feature
        }
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        assert!(ctx.active_terms.iter().all(|&a| a));
        let reg = StepRegressor::new(&ctx, logs.view(), 3).unwrap();
        assert!(!reg.dropped_terms().is_empty());
        let target: Vec<f64> = (0..m)
            .map(|p| 1.0 + 2.0 * logs[(p, 0)] + 0.3 * logs[(p, 0)].powi(2))
            .collect();
        let fit = reg.fit(&target).unwrap();
        for (f, t) in fit.fitted.iter().zip(&target) {
            assert_relative_eq!(f, t, epsilon = 1e-8, max_relative = 1e-8);
        }
    }

    #[test]
    fn small_samples_are_rejected() {
        let (paths, _, _) = demo_cloud(100, 1, 31);
        let logs = log_states_at(&paths, 1);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let err = StepRegressor::new(&ctx, logs.view(), 1).unwrap_err();
        assert!(matches!(err, IndiffError::Regression { step: 1, .. }));
    }

    #[test]
    fn truncation_counts_and_bounds() {
        let grid = TimeGrid::uniform(0.25, 1).unwrap();
        let m = 5_000;
        let bb = BrownianBatch::generate(&grid, m, 2, 61).unwrap();
        let sc = presets::capped_claim_two_assets();
        let paths = AssetPaths::evolve(&sc, &grid, &bb).unwrap();
        let logs = log_states_at(&paths, 0);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        let reg = StepRegressor::new(&ctx, logs.view(), 0).unwrap();
        let target: Vec<f64> = (0..m).map(|p| 3.0 * bb.dw[(p, 0, 0)]).collect();
        let clip = 0.01;
        let est = reg
            .estimate_z(&target, bb.dw.slice(s![.., 0, ..]), grid.dt(0), clip)
            .unwrap();
        assert_eq!(est.clipped, m);
        for p in 0..m {
            let norm = (est.z[(p, 0)].powi(2) + est.z[(p, 1)].powi(2)).sqrt();
            assert!(norm <= clip * (1.0 + 1e-12));
        }
    }

    #[test]
    fn tables_add_and_evaluate_with_truncation() {
        let (paths, _, _) = demo_cloud(1_000, 2, 71);
        let ctxs = build_contexts(BasisSpec::default(), &paths).unwrap();
        let mut a = ZTable::zeros(Arc::clone(&ctxs), 2, 2, 10.0);
        let mut b = ZTable::zeros(Arc::clone(&ctxs), 2, 2, 10.0);
        a.coeffs[1][(0, 0)] = 1.0;
        a.coeffs[1][(0, 1)] = 0.5;
        b.coeffs[1][(0, 0)] = 2.0;
        b.coeffs[1][(1, 2)] = -1.0;
        let sum = a.add(&b).unwrap();
        let state = [0.07_f64, -0.02];
        let mut va = [0.0_f64; 2];
        let mut vb = [0.0_f64; 2];
        let mut vs = [0.0_f64; 2];
        a.eval_into(1, &state, &mut va);
        b.eval_into(1, &state, &mut vb);
        sum.eval_into(1, &state, &mut vs);
        assert_relative_eq!(vs[0], va[0] + vb[0], max_relative = 1e-12);
        assert_relative_eq!(vs[1], va[1] + vb[1], max_relative = 1e-12);
        // A tight radius caps the evaluated norm.
        let tight = ZTable {
            clip: 1e-3,
            ..sum.clone()
        };
        let mut vt = [0.0_f64; 2];
        tight.eval_into(1, &state, &mut vt);
        let norm = (vt[0] * vt[0] + vt[1] * vt[1]).sqrt();
        assert!(norm <= 1e-3 * (1.0 + 1e-12));
        // Tables over freshly built (even if identical) contexts refuse to add.
        let other_ctxs = build_contexts(BasisSpec::default(), &paths).unwrap();
        let alien = ZTable::zeros(other_ctxs, 2, 2, 10.0);
        assert!(a.add(&alien).is_err());
    }

    #[test]
    fn time_zero_fit_is_the_plain_mean() {
        let (paths, _, _) = demo_cloud(2_000, 1, 81);
        let logs = log_states_at(&paths, 0);
        let ctx = BasisContext::from_log_states(BasisSpec::default(), logs.view()).unwrap();
        assert_eq!(ctx.active_features, vec![false, false]);
        let reg = StepRegressor::new(&ctx, logs.view(), 0).unwrap();
        assert_eq!(reg.n_kept(), 1);
        let target: Vec<f64> = (0..2_000).map(|p| (p % 7) as f64).collect();
        let fit = reg.fit(&target).unwrap();
        let mean = stats::mean(&target);
        assert!(fit.fitted.iter().all(|&f| (f - mean).abs() < 1e-10));
    }
}
