//! Market model: deterministic coefficients, claim payoff, scenario
//! validation against the standing assumptions, the quadratic driver of the
//! value equation, and the constants ledger used by the iterative schemes.
//!
//! The market has one traded index `P` and `d` non-traded assets `S^i`, all
//! driven by a `d`-dimensional Brownian motion:
//!
//! ```text
//! dP_t   = P_t  ( mu_P(t) dt + <sigma_P(t), dW_t> )
//! dS^i_t = S^i_t( mu_i(t) dt + <sigma_i(t), dW_t> )
//! ```
//!
//! A buyer with exponential utility `-exp(-gamma x)` holds `lambda` units of
//! a bounded claim `g`. Their value process solves a backward SDE whose
//! driver, for `sigma = sigma_P(t)`, `mu = mu_P(t)`, is
//!
//! ```text
//! F_t(z) = -gamma/2 |z|^2
//!          + gamma/(2 |sigma|^2) * ( <sigma, z> - mu/gamma )^2
//!          - theta(t),             theta = mu^2 / (2 gamma |sigma|^2),
//! ```
//!
//! so that `F_t(0) = 0`. All routes share this module's transcription of
//! `F`, its gradient, and the related measure-change integrands, so a single
//! implementation is exercised by every cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{IndiffError, Result};
use crate::grid::TimeGrid;

/// Deterministic scalar coefficient: a constant or a piecewise-constant
/// table (value `values[i]` on `[times[i], times[i+1])`, last value beyond).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coeff {
    Const(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl Coeff {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Coeff::Const(v) => *v,
            Coeff::Table { times, values } => values[piece_index(times, t)],
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Coeff::Const(v) => finite(*v, name),
            Coeff::Table { times, values } => {
                validate_table_times(times, name)?;
                if values.len() != times.len() {
                    return Err(IndiffError::InvalidInput(format!(
                        "{name}: {} times but {} values",
                        times.len(),
                        values.len()
                    )));
                }
                values.iter().try_for_each(|v| finite(*v, name))
            }
        }
    }

    fn breakpoints(&self) -> &[f64] {
        match self {
            Coeff::Const(_) => &[],
            Coeff::Table { times, .. } => times,
        }
    }

    /// The constant value, if the coefficient is time-independent.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Coeff::Const(v) => Some(*v),
            Coeff::Table { .. } => None,
        }
    }
}

/// Deterministic `R^d`-valued coefficient, same convention as [`Coeff`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoeffVec {
    Const(Vec<f64>),
    Table {
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
}

impl CoeffVec {
    pub fn eval(&self, t: f64) -> &[f64] {
        match self {
            CoeffVec::Const(v) => v,
            CoeffVec::Table { times, values } => &values[piece_index(times, t)],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CoeffVec::Const(v) => v.len(),
            CoeffVec::Table { values, .. } => values.first().map_or(0, Vec::len),
        }
    }

    fn validate(&self, name: &str, d: usize) -> Result<()> {
        let check_vec = |v: &[f64]| -> Result<()> {
            if v.len() != d {
                return Err(IndiffError::InvalidInput(format!(
                    "{name}: expected dimension {d}, got {}",
                    v.len()
                )));
            }
            v.iter().try_for_each(|x| finite(*x, name))
        };
        match self {
            CoeffVec::Const(v) => check_vec(v),
            CoeffVec::Table { times, values } => {
                validate_table_times(times, name)?;
                if values.len() != times.len() {
                    return Err(IndiffError::InvalidInput(format!(
                        "{name}: {} times but {} values",
                        times.len(),
                        values.len()
                    )));
                }
                values.iter().try_for_each(|v| check_vec(v))
            }
        }
    }

    fn breakpoints(&self) -> &[f64] {
        match self {
            CoeffVec::Const(_) => &[],
            CoeffVec::Table { times, .. } => times,
        }
    }

    /// The constant value, if the coefficient is time-independent.
    pub fn as_const(&self) -> Option<&[f64]> {
        match self {
            CoeffVec::Const(v) => Some(v),
            CoeffVec::Table { .. } => None,
        }
    }
}

fn piece_index(times: &[f64], t: f64) -> usize {
    match times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    }
}

fn validate_table_times(times: &[f64], name: &str) -> Result<()> {
    if times.is_empty() || times[0] != 0.0 {
        return Err(IndiffError::InvalidInput(format!(
            "{name}: table times must start at 0"
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IndiffError::InvalidInput(format!(
            "{name}: table times must be strictly increasing"
        )));
    }
    times.iter().try_for_each(|t| finite(*t, name))
}

fn finite(v: f64, name: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(IndiffError::assumption(
            "A1",
            format!("coefficient {name} is not finite"),
        ))
    }
}

/// Claim payoff. All variants are bounded and nonnegative once validated.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payoff {
    /// Cash claim `g = value`.
    Constant { value: f64 },
    /// Capped claim on one asset: `g(s) = min(cap, s_asset) + offset`.
    MinCap {
        asset: usize,
        cap: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Capped average of one asset over the monitoring grid:
    /// `g = min(cap, mean_k s_asset(t_k)) + offset`. Path-dependent, so the
    /// log-Lipschitz terminal bound does not apply.
    MinCapAverage {
        asset: usize,
        cap: f64,
        #[serde(default)]
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayoffKind {
    TerminalFunction,
    PathDiscreteMonitoring,
}

impl Payoff {
    pub fn kind(&self) -> PayoffKind {
        match self {
            Payoff::Constant { .. } | Payoff::MinCap { .. } => PayoffKind::TerminalFunction,
            Payoff::MinCapAverage { .. } => PayoffKind::PathDiscreteMonitoring,
        }
    }

    /// Upper bound `g_max` with `0 <= g <= g_max`.
    pub fn g_max(&self) -> f64 {
        match *self {
            Payoff::Constant { value } => value,
            Payoff::MinCap { cap, offset, .. } | Payoff::MinCapAverage { cap, offset, .. } => {
                cap + offset
            }
        }
    }

    /// Bound `L` with `|g(s) - g(s')| <= L * sum_i |ln s_i - ln s'_i|` for
    /// terminal-function payoffs; `None` for path-dependent payoffs.
    pub fn lipschitz_log(&self) -> Option<f64> {
        match *self {
            Payoff::Constant { .. } => Some(0.0),
            // d/dx min(cap, e^x) is e^x below the cap, zero above: bounded
            // by the cap itself.
            Payoff::MinCap { cap, .. } => Some(cap),
            Payoff::MinCapAverage { .. } => None,
        }
    }

    /// Assets the payoff actually reads (drives the feedback constant `K4`).
    pub fn relevant_assets(&self) -> Vec<usize> {
        match *self {
            Payoff::Constant { .. } => vec![],
            Payoff::MinCap { asset, .. } | Payoff::MinCapAverage { asset, .. } => vec![asset],
        }
    }

    /// Evaluate on one simulated path of asset prices, shape `(N+1, d)`,
    /// row `k` holding the asset vector at grid time `t_k`.
    pub fn eval_path(&self, path: ndarray::ArrayView2<'_, f64>) -> f64 {
        match *self {
            Payoff::Constant { value } => value,
            Payoff::MinCap { asset, cap, offset } => {
                cap.min(path[(path.nrows() - 1, asset)]) + offset
            }
            Payoff::MinCapAverage { asset, cap, offset } => {
                let col = path.column(asset);
                cap.min(col.sum() / col.len() as f64) + offset
            }
        }
    }

    /// Terminal-function evaluation at a log-price vector. Panics for
    /// path-dependent payoffs; callers gate on [`Payoff::kind`].
    pub fn eval_terminal_log(&self, x: &[f64]) -> f64 {
        match *self {
            Payoff::Constant { value } => value,
            Payoff::MinCap { asset, cap, offset } => cap.min(x[asset].exp()) + offset,
            Payoff::MinCapAverage { .. } => {
                panic!("path-dependent payoff has no terminal function")
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        let check_asset = |asset: usize| -> Result<()> {
            if asset >= d {
                return Err(IndiffError::InvalidInput(format!(
                    "payoff references asset {asset} but d = {d}"
                )));
            }
            Ok(())
        };
        match *self {
            Payoff::Constant { value } => {
                if !value.is_finite() || value < 0.0 {
                    return Err(IndiffError::assumption(
                        "A3",
                        format!("constant payoff must be finite and >= 0, got {value}"),
                    ));
                }
            }
            Payoff::MinCap { asset, cap, offset } | Payoff::MinCapAverage { asset, cap, offset } => {
                check_asset(asset)?;
                if !(cap.is_finite() && cap > 0.0) || !(offset.is_finite() && offset >= 0.0) {
                    return Err(IndiffError::assumption(
                        "A3",
                        format!("capped payoff needs cap > 0 and offset >= 0, got cap={cap}, offset={offset}"),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn default_ellipticity_floor() -> f64 {
    1e-8
}

fn default_k1() -> f64 {
    4.0
}

fn default_p0() -> f64 {
    1.0
}

/// Full market scenario: dimensions, coefficients, preferences, claim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub d: usize,
    pub mu_p: Coeff,
    pub sigma_p: CoeffVec,
    pub mu_s: Vec<Coeff>,
    pub sigma_s: Vec<CoeffVec>,
    pub s0: Vec<f64>,
    #[serde(default = "default_p0")]
    pub p0: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub t_horizon: f64,
    pub payoff: Payoff,
    /// Stored ellipticity floor `eps` with `|sigma_P(t)| >= eps` everywhere.
    #[serde(default = "default_ellipticity_floor")]
    pub ellipticity_floor: f64,
    /// Energy-inequality constant of the claim-splitting scheme;
    /// configurable, conventional default 4.
    #[serde(default = "default_k1")]
    pub k1: f64,
}

/// Instantaneous risk premium rate
/// `theta(t) = mu_P(t)^2 / (2 gamma |sigma_P(t)|^2)`.
pub fn theta(scenario: &Scenario, t: f64) -> f64 {
    let mu = scenario.mu_p.eval(t);
    let sigma = scenario.sigma_p.eval(t);
    let s2: f64 = sigma.iter().map(|x| x * x).sum();
    mu * mu / (2.0 * scenario.gamma * s2)
}

/// Midpoint quadrature of `theta` over the whole grid; exact for
/// coefficients constant between grid points.
pub fn theta_integral(scenario: &Scenario, grid: &TimeGrid) -> f64 {
    let mut acc = 0.0;
    for k in 0..grid.n_steps() {
        let mid = 0.5 * (grid.t(k) + grid.t(k + 1));
        acc += theta(scenario, mid) * grid.dt(k);
    }
    acc
}

/// Driver data frozen at one time point. All routes evaluate the driver,
/// its gradient, and the measure-change integrands through this struct so
/// the algebra lives in exactly one place.
#[derive(Debug, Clone)]
pub struct DriverAt {
    pub gamma: f64,
    pub mu_p: f64,
    pub sigma_p: Vec<f64>,
    pub sigma_p_sq: f64,
    pub theta: f64,
}

impl Scenario {
    /// Freeze driver coefficients at time `t`.
    pub fn driver_at(&self, t: f64) -> DriverAt {
        let sigma_p = self.sigma_p.eval(t).to_vec();
        let sigma_p_sq: f64 = sigma_p.iter().map(|x| x * x).sum();
        let mu_p = self.mu_p.eval(t);
        DriverAt {
            gamma: self.gamma,
            mu_p,
            sigma_p,
            sigma_p_sq,
            theta: mu_p * mu_p / (2.0 * self.gamma * sigma_p_sq),
        }
    }
}

impl DriverAt {
    fn dot_sigma(&self, z: &[f64]) -> f64 {
        self.sigma_p.iter().zip(z).map(|(a, b)| a * b).sum()
    }

    /// Quadratic driver `F_t(z)`; satisfies `F_t(0) = 0` to the last bit —
    /// the subtracted level `theta` is folded into the projection bracket as
    /// `(m)^2`, and `(-m)^2 - m^2` cancels exactly in floating point.
    pub fn f(&self, z: &[f64]) -> f64 {
        let z2: f64 = z.iter().map(|x| x * x).sum();
        let m = self.mu_p / self.gamma;
        let proj = self.dot_sigma(z) - m;
        self.gamma / (2.0 * self.sigma_p_sq) * (proj * proj - m * m) - 0.5 * self.gamma * z2
    }

    /// Gradient `grad_z F_t(z) = -gamma z
    /// + gamma/|sigma|^2 (<sigma, z> - mu/gamma) sigma`.
    pub fn grad(&self, z: &[f64], out: &mut [f64]) {
        let c = self.gamma / self.sigma_p_sq * (self.dot_sigma(z) - self.mu_p / self.gamma);
        for i in 0..z.len() {
            out[i] = -self.gamma * z[i] + c * self.sigma_p[i];
        }
    }

    /// Quadratic form `<z, H z>` of the (constant) driver Hessian
    /// `H = -gamma (I - sigma sigma^T / |sigma|^2)`.
    pub fn hessian_quadratic_form(&self, z: &[f64]) -> f64 {
        let z2: f64 = z.iter().map(|x| x * x).sum();
        let proj = self.dot_sigma(z);
        -self.gamma * (z2 - proj * proj / self.sigma_p_sq)
    }

    /// Integrand of the driver-cancelling measure change: with
    /// `n_t = gamma/2 z - gamma/(2|sigma|^2) (<sigma, z> - 2 mu/gamma) sigma`
    /// one has the exact identity `F_t(z) + <z, n_t> = 0`.
    pub fn vanishing_shift(&self, z: &[f64], out: &mut [f64]) {
        let c = self.gamma / (2.0 * self.sigma_p_sq) * (self.dot_sigma(z) - 2.0 * self.mu_p / self.gamma);
        for i in 0..z.len() {
            out[i] = 0.5 * self.gamma * z[i] - c * self.sigma_p[i];
        }
    }

    /// Merton-style index position absorbing the risk premium:
    /// `pi(z) = -<sigma, z>/|sigma|^2 + mu/(gamma |sigma|^2)`.
    pub fn optimal_position(&self, z: &[f64]) -> f64 {
        -self.dot_sigma(z) / self.sigma_p_sq + self.mu_p / (self.gamma * self.sigma_p_sq)
    }
}

/// Convenience free functions mirroring [`DriverAt`].
pub fn driver_f(scenario: &Scenario, t: f64, z: &[f64]) -> f64 {
    scenario.driver_at(t).f(z)
}

pub fn driver_grad(scenario: &Scenario, t: f64, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    scenario.driver_at(t).grad(z, &mut out);
    out
}

/// Constants ledger: everything the iterative schemes need to size their
/// claim split and time partition, derived once per scenario.
#[derive(Debug, Clone, Serialize)]
pub struct ConstantsLedger {
    pub k1: f64,
    /// `max(1, lambda g_max + T theta_max, 2 gamma, max_t |mu_P|/|sigma_P|)`.
    pub k2: f64,
    /// `lambda * L` with `L` the payoff's log-Lipschitz bound; `None` for
    /// path-dependent payoffs.
    pub k3: Option<f64>,
    /// `gamma^2 * sum over payoff-relevant assets of max_t |sigma_i|^2`.
    pub k4: f64,
    pub theta_max: f64,
    pub g_max: f64,
    /// Claim split `lambda = sum_j lambda_j` with each piece below the
    /// contraction threshold `lambda / (32 K1 K2^2)`; the last entry absorbs
    /// rounding so the sum is exact in floating point.
    pub lambda_split: Vec<f64>,
    /// Block boundaries `0 = t_0 < ... < t_J = T` with each width at most
    /// `1 / (8 K3^2 K4)`; `None` when `K3` is unavailable.
    pub partition: Option<Vec<f64>>,
}

/// Times at which piecewise-constant data can change value; used to take
/// exact maxima of derived piecewise-constant quantities.
fn knot_times(scenario: &Scenario) -> Vec<f64> {
    let mut knots = vec![0.0];
    let mut push_all = |ts: &[f64]| {
        for &t in ts {
            if t >= 0.0 && t < scenario.t_horizon {
                knots.push(t);
            }
        }
    };
    push_all(scenario.mu_p.breakpoints());
    push_all(scenario.sigma_p.breakpoints());
    for c in &scenario.mu_s {
        push_all(c.breakpoints());
    }
    for c in &scenario.sigma_s {
        push_all(c.breakpoints());
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup();
    knots
}

/// Check the standing assumptions and derive the constants ledger.
///
/// Rejections name the violated assumption: `A1` (bounded coefficients),
/// `A2` (index volatility bounded away from zero), `A3` (bounded
/// nonnegative payoff). The log-Lipschitz assumption `A4` is only needed by
/// the block-measure route, which checks it at its own entry point; here a
/// payoff without it simply yields `k3 = None` and no partition.
pub fn validate_scenario(scenario: &Scenario) -> Result<ConstantsLedger> {
    if scenario.d == 0 {
        return Err(IndiffError::InvalidInput("d must be at least 1".into()));
    }
    if !(scenario.gamma.is_finite() && scenario.gamma > 0.0) {
        return Err(IndiffError::InvalidInput(format!(
            "risk aversion gamma must be positive, got {}",
            scenario.gamma
        )));
    }
    if !(scenario.lambda.is_finite() && scenario.lambda >= 0.0) {
        return Err(IndiffError::InvalidInput(format!(
            "unit count lambda must be >= 0, got {}",
            scenario.lambda
        )));
    }
    if !(scenario.t_horizon.is_finite() && scenario.t_horizon > 0.0) {
        return Err(IndiffError::InvalidInput(format!(
            "horizon must be positive, got {}",
            scenario.t_horizon
        )));
    }
    if scenario.mu_s.len() != scenario.d
        || scenario.sigma_s.len() != scenario.d
        || scenario.s0.len() != scenario.d
    {
        return Err(IndiffError::InvalidInput(format!(
            "expected {} drift/volatility/initial entries, got {}/{}/{}",
            scenario.d,
            scenario.mu_s.len(),
            scenario.sigma_s.len(),
            scenario.s0.len()
        )));
    }
    if scenario.s0.iter().any(|s| !(s.is_finite() && *s > 0.0)) || !(scenario.p0 > 0.0) {
        return Err(IndiffError::InvalidInput(
            "initial prices must be positive".into(),
        ));
    }
    if !(scenario.k1.is_finite() && scenario.k1 > 0.0) {
        return Err(IndiffError::InvalidInput(format!(
            "K1 must be positive, got {}",
            scenario.k1
        )));
    }

    // A1: bounded, well-formed coefficients.
    scenario.mu_p.validate("mu_P")?;
    scenario.sigma_p.validate("sigma_P", scenario.d)?;
    for (i, c) in scenario.mu_s.iter().enumerate() {
        c.validate(&format!("mu_S[{i}]"))?;
    }
    for (i, c) in scenario.sigma_s.iter().enumerate() {
        c.validate(&format!("sigma_S[{i}]"), scenario.d)?;
    }

    // A3: bounded nonnegative payoff.
    scenario.payoff.validate(scenario.d)?;

    // A2: uniform ellipticity of the index volatility, checked on every
    // piece of the piecewise-constant data.
    let eps = scenario.ellipticity_floor.max(f64::MIN_POSITIVE);
    let knots = knot_times(scenario);
    let mut theta_max: f64 = 0.0;
    let mut premium_max: f64 = 0.0;
    for &t in &knots {
        let sigma = scenario.sigma_p.eval(t);
        let norm = sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < eps {
            return Err(IndiffError::assumption(
                "A2",
                format!(
                    "|sigma_P({t})| = {norm:.3e} below ellipticity floor {eps:.3e}"
                ),
            ));
        }
        theta_max = theta_max.max(theta(scenario, t));
        premium_max = premium_max.max(scenario.mu_p.eval(t).abs() / norm);
    }

    let g_max = scenario.payoff.g_max();
    let k2 = 1.0_f64
        .max(scenario.lambda * g_max + scenario.t_horizon * theta_max)
        .max(2.0 * scenario.gamma)
        .max(premium_max);

    let k3 = scenario
        .payoff
        .lipschitz_log()
        .map(|l| scenario.lambda * l);

    let relevant = scenario.payoff.relevant_assets();
    let mut k4 = 0.0;
    for &i in &relevant {
        let mut vol_sq_max: f64 = 0.0;
        for &t in &knots {
            let s = scenario.sigma_s[i].eval(t);
            vol_sq_max = vol_sq_max.max(s.iter().map(|x| x * x).sum());
        }
        k4 += vol_sq_max;
    }
    k4 *= scenario.gamma * scenario.gamma;

    let lambda_split = split_lambda(scenario.lambda, scenario.k1, k2);

    let partition = k3.map(|k3| {
        let denom = 8.0 * k3 * k3 * k4;
        let blocks = if denom <= 0.0 {
            1
        } else {
            (scenario.t_horizon * denom).ceil().max(1.0) as usize
        };
        (0..=blocks)
            .map(|j| scenario.t_horizon * j as f64 / blocks as f64)
            .collect()
    });

    Ok(ConstantsLedger {
        k1: scenario.k1,
        k2,
        k3,
        k4,
        theta_max,
        g_max,
        lambda_split,
        partition,
    })
}

/// Split `lambda` into `J = ceil(32 K1 K2^2)` near-equal pieces, each below
/// the contraction threshold `lambda / (32 K1 K2^2)`, summing exactly to
/// `lambda` (last-term absorption).
pub fn split_lambda(lambda: f64, k1: f64, k2: f64) -> Vec<f64> {
    let j = (32.0 * k1 * k2 * k2).ceil().max(1.0) as usize;
    split_lambda_into(lambda, j)
}

/// Equal split of `lambda` into exactly `j` pieces with exact-sum
/// last-term absorption (practical override of the theoretical count).
pub fn split_lambda_into(lambda: f64, j: usize) -> Vec<f64> {
    assert!(j >= 1);
    let part = lambda / j as f64;
    let mut out = vec![part; j];
    let mut acc = 0.0;
    for piece in out.iter().take(j - 1) {
        acc += piece;
    }
    out[j - 1] = lambda - acc;
    out
}
