//! Independent one-dimensional pricing oracles used to anchor the Monte
//! Carlo routes.
//!
//! For a single lognormal non-traded asset `S` partially spanned by a traded
//! index `P` with instantaneous correlation `rho`, the buyer's exponential
//! indifference price of `lambda` units of `g(S_T)` has the distortion form
//!
//! ```text
//! price = -1/(gamma*(1-rho^2)) * ln E[ exp(-gamma*(1-rho^2)*lambda*g(S_T)) ]
//! ```
//!
//! where the expectation is over the lognormal terminal value whose drift is
//! risk-adjusted to `mu_S - rho*sigma_S*mu_P/sigma_P`. The expectation is
//! evaluated by deterministic quadrature, never by simulation, so the oracle
//! is independent of everything in [`crate::paths`] and [`crate::regression`].
//!
//! Payoffs with a kink (such as a capped claim) defeat plain Gauss-Hermite
//! quadrature: node doubling then moves the value at the 1e-5 level, which
//! fails the stability contract of this module. For such payoffs the
//! expectation is split at the kink and each smooth piece is integrated by
//! Gauss-Legendre panels against the Gaussian density, restoring
//! machine-precision node stability. Every reported price is re-computed at
//! doubled node count and rejected if the two values differ by more than
//! `1e-8` relatively.

use crate::error::{IndiffError, Result};
use crate::market::{Payoff, Scenario};

/// Relative tolerance of the node-doubling stability check.
pub const NODE_DOUBLING_RTOL: f64 = 1e-8;

/// Default quadrature size (nodes for Gauss-Hermite, nodes per smooth panel
/// for the kink-split scheme).
pub const DEFAULT_NODES: usize = 128;

/// Integration is truncated at this many standard deviations when the
/// kink-split scheme is used; the discarded Gaussian mass is below 1e-31.
const GAUSSIAN_TAIL: f64 = 12.0;

/// Scalar payoff of the one-dimensional model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarPayoff {
    /// `g(s) = c`.
    Constant(f64),
    /// `g(s) = s` (used for linear sanity checks; unbounded, so only
    /// meaningful where the exponential transform stays integrable).
    Identity,
    /// `g(s) = min(cap, s) + offset`.
    MinCap { cap: f64, offset: f64 },
}

impl ScalarPayoff {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            ScalarPayoff::Constant(c) => c,
            ScalarPayoff::Identity => s,
            ScalarPayoff::MinCap { cap, offset } => cap.min(s) + offset,
        }
    }

    /// Log-price locations where the payoff is not smooth.
    fn kinks_in_log(&self) -> Vec<f64> {
        match *self {
            ScalarPayoff::MinCap { cap, .. } if cap > 0.0 => vec![cap.ln()],
            _ => Vec::new(),
        }
    }
}

/// One-dimensional market description consumed by the oracles.
#[derive(Debug, Clone, Copy)]
pub struct OneDimSpec {
    pub mu_s: f64,
    pub sigma_s: f64,
    pub mu_p: f64,
    pub sigma_p: f64,
    pub rho: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub t_horizon: f64,
    pub s0: f64,
    pub g: ScalarPayoff,
}

impl OneDimSpec {
    fn validate(&self) -> Result<()> {
        let all = [
            self.mu_s,
            self.sigma_s,
            self.mu_p,
            self.sigma_p,
            self.rho,
            self.gamma,
            self.lambda,
            self.t_horizon,
            self.s0,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(IndiffError::NonFinite("OneDimSpec field".into()));
        }
        if self.sigma_s <= 0.0 || self.sigma_p <= 0.0 {
            return Err(IndiffError::InvalidInput(
                "oracle volatilities must be positive".into(),
            ));
        }
        if self.t_horizon <= 0.0 || self.s0 <= 0.0 {
            return Err(IndiffError::InvalidInput(
                "oracle horizon and initial price must be positive".into(),
            ));
        }
        if self.rho.abs() > 1.0 {
            return Err(IndiffError::InvalidInput(format!(
                "correlation {} outside [-1, 1]",
                self.rho
            )));
        }
        if self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(IndiffError::InvalidInput(
                "risk aversion and unit count must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Mean of `ln S_T` under the risk-adjusted drift.
    fn log_mean(&self) -> f64 {
        let drift = self.mu_s - self.rho * self.sigma_s * self.mu_p / self.sigma_p;
        self.s0.ln() + (drift - 0.5 * self.sigma_s * self.sigma_s) * self.t_horizon
    }

    fn log_sd(&self) -> f64 {
        self.sigma_s * self.t_horizon.sqrt()
    }
}

/// Gauss-Hermite nodes and weights for the weight function `exp(-x^2)`.
///
/// Nodes are returned in decreasing order, symmetric about zero; weights are
/// positive and sum to `sqrt(pi)`. Computed by the Golub-Welsch method: the
/// nodes are the eigenvalues of the symmetric tridiagonal Jacobi matrix with
/// off-diagonals `sqrt(k/2)`, and each weight is `sqrt(pi)` times the squared
/// first component of the corresponding normalized eigenvector. Unlike Newton
/// iteration on the polynomial recurrence, this cannot lose or duplicate
/// roots at large `n`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    const SQRT_PI: f64 = 1.772_453_850_905_516;
    if n == 1 {
        return (vec![0.0], vec![SQRT_PI]);
    }
    let mut jacobi = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let q0 = eig.eigenvectors[(0, j)];
            (eig.eigenvalues[j], SQRT_PI * q0 * q0)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite eigenvalues"));
    // Fold the +/- eigenvalue pairs together so the returned rule is exactly
    // symmetric about zero.
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[i].0 - pairs[n - 1 - i].0);
        let w = 0.5 * (pairs[i].1 + pairs[n - 1 - i].1);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        weights[n / 2] = pairs[n / 2].1;
    }
    (nodes, weights)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        for _ in 0..200 {
            let (p, d) = legendre(n, z);
            let dz = p / d;
            z -= dz;
            if dz.abs() <= 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, z);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Legendre polynomial `P_n` and derivative at `x` (|x| < 1).
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0_f64;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// `E[h(X)]` for standard normal `X`, with `h` smooth away from `kinks`.
///
/// Smooth integrands use Gauss-Hermite directly; kinked integrands are
/// integrated piecewise by Gauss-Legendre panels against the Gaussian
/// density, split at each kink and truncated at `GAUSSIAN_TAIL` sigmas.
fn gaussian_expectation(h: impl Fn(f64) -> f64, kinks: &[f64], n: usize) -> f64 {
    if kinks.is_empty() {
        let (x, w) = gauss_hermite(n);
        let scale = std::f64::consts::SQRT_2;
        let norm = 1.0 / std::f64::consts::PI.sqrt();
        return norm
            * x.iter()
                .zip(&w)
                .map(|(&xi, &wi)| wi * h(scale * xi))
                .sum::<f64>();
    }
    let mut pts = vec![-GAUSSIAN_TAIL];
    let mut interior: Vec<f64> = kinks
        .iter()
        .copied()
        .filter(|k| k.abs() < GAUSSIAN_TAIL)
        .collect();
    interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.extend(interior);
    pts.push(GAUSSIAN_TAIL);
    let (x0, w0) = gauss_legendre(n);
    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut total = 0.0;
    for win in pts.windows(2) {
        let c = 0.5 * (win[0] + win[1]);
        let half = 0.5 * (win[1] - win[0]);
        if half <= 0.0 {
            continue;
        }
        let mut panel = 0.0;
        for (&xi, &wi) in x0.iter().zip(&w0) {
            let u = c + half * xi;
            panel += wi * (-0.5 * u * u).exp() * inv_sqrt_2pi * h(u);
        }
        total += half * panel;
    }
    total
}

/// Price at quadrature size `n`, without the stability check.
fn distortion_price_raw(spec: &OneDimSpec, n: usize) -> f64 {
    let m = spec.log_mean();
    let sd = spec.log_sd();
    let lam_tilde = 1.0 - spec.rho * spec.rho;
    let a = spec.gamma * lam_tilde;
    let kinks: Vec<f64> = spec
        .g
        .kinks_in_log()
        .iter()
        .map(|k| (k - m) / sd)
        .collect();
    let payout = |x: f64| spec.lambda * spec.g.eval((m + sd * x).exp());
    if a <= 1e-12 {
        // Degenerate distortion (gamma -> 0 or |rho| -> 1): linear price.
        return gaussian_expectation(payout, &kinks, n);
    }
    let e = gaussian_expectation(|x| (-a * payout(x)).exp(), &kinks, n);
    -e.ln() / a
}

fn check_node_doubling(label: &str, v1: f64, v2: f64) -> Result<()> {
    let denom = 1.0_f64.max(v1.abs());
    if !(v1.is_finite() && v2.is_finite()) {
        return Err(IndiffError::NonFinite(format!("{label} quadrature")));
    }
    if (v1 - v2).abs() > NODE_DOUBLING_RTOL * denom {
        return Err(IndiffError::Quadrature(format!(
            "{label}: value {v1:.12e} at n nodes vs {v2:.12e} at 2n nodes \
             exceeds relative tolerance {NODE_DOUBLING_RTOL:.1e}"
        )));
    }
    Ok(())
}

/// Exponential indifference price of `lambda` units of `g(S_T)` in the
/// one-dimensional partially-spanned lognormal model (distortion formula).
///
/// The value is computed at `nodes` and re-computed at `2 * nodes`; if the
/// two disagree beyond [`NODE_DOUBLING_RTOL`] the call fails rather than
/// report an unstable number.
pub fn distortion_price(spec: &OneDimSpec, nodes: usize) -> Result<f64> {
    spec.validate()?;
    if nodes < 2 {
        return Err(IndiffError::InvalidInput(
            "need at least 2 quadrature nodes".into(),
        ));
    }
    let v1 = distortion_price_raw(spec, nodes);
    let v2 = distortion_price_raw(spec, 2 * nodes);
    check_node_doubling("distortion_price", v1, v2)?;
    Ok(v1)
}

/// Linear (complete-market) price `E[lambda * g(S_T)]` under the
/// risk-adjusted drift; only valid for `rho = +1` or `rho = -1`, where the
/// index spans the claim and the indifference price collapses to a plain
/// expectation.
pub fn complete_market_price(spec: &OneDimSpec, nodes: usize) -> Result<f64> {
    spec.validate()?;
    if (spec.rho.abs() - 1.0).abs() > 1e-12 {
        return Err(IndiffError::InvalidInput(format!(
            "complete-market oracle requires rho = +/-1, got {}",
            spec.rho
        )));
    }
    if nodes < 2 {
        return Err(IndiffError::InvalidInput(
            "need at least 2 quadrature nodes".into(),
        ));
    }
    let m = spec.log_mean();
    let sd = spec.log_sd();
    let kinks: Vec<f64> = spec
        .g
        .kinks_in_log()
        .iter()
        .map(|k| (k - m) / sd)
        .collect();
    let payout = |x: f64| spec.lambda * spec.g.eval((m + sd * x).exp());
    let v1 = gaussian_expectation(payout, &kinks, nodes);
    let v2 = gaussian_expectation(payout, &kinks, 2 * nodes);
    check_node_doubling("complete_market_price", v1, v2)?;
    Ok(v1)
}

/// Project a multi-asset scenario onto the one-dimensional oracle model.
///
/// Requires constant coefficients and a terminal payoff reading a single
/// asset (or a cash claim). The projected volatility is the full norm of
/// that asset's loading vector and `rho` its instantaneous correlation with
/// the index.
pub fn project_scenario(sc: &Scenario) -> Result<OneDimSpec> {
    fn needs_const<T>(v: Option<T>, name: &str) -> Result<T> {
        v.ok_or_else(|| {
            IndiffError::InvalidInput(format!(
                "oracle projection requires constant coefficients ({name} is a table)"
            ))
        })
    }
    let mu_p = needs_const(sc.mu_p.as_const(), "mu_P")?;
    let sigma_p_vec = needs_const(sc.sigma_p.as_const(), "sigma_P")?.to_vec();
    let sigma_p = sigma_p_vec.iter().map(|x| x * x).sum::<f64>().sqrt();

    let (asset, g) = match sc.payoff {
        Payoff::MinCap { asset, cap, offset } => (asset, ScalarPayoff::MinCap { cap, offset }),
        Payoff::Constant { value } => (0, ScalarPayoff::Constant(value)),
        Payoff::MinCapAverage { .. } => {
            return Err(IndiffError::InvalidInput(
                "no one-dimensional oracle for path-dependent payoffs".into(),
            ))
        }
    };
    let mu_s = needs_const(sc.mu_s[asset].as_const(), "mu_S")?;
    let sigma_s_vec = needs_const(sc.sigma_s[asset].as_const(), "sigma_S")?.to_vec();
    let sigma_s = sigma_s_vec.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma_s <= 0.0 {
        return Err(IndiffError::InvalidInput(
            "projected asset has zero volatility".into(),
        ));
    }
    let rho = sigma_s_vec
        .iter()
        .zip(&sigma_p_vec)
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / (sigma_s * sigma_p);

    Ok(OneDimSpec {
        mu_s,
        sigma_s,
        mu_p,
        sigma_p,
        rho,
        gamma: sc.gamma,
        lambda: sc.lambda,
        t_horizon: sc.t_horizon,
        s0: sc.s0[asset],
        g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SQRT_PI: f64 = 1.772453850905516;

    fn demo_spec() -> OneDimSpec {
        // One-dimensional projection of the two-asset demo scenario:
        // capped claim min(2, S_T), total claim volatility 0.3, correlation
        // 0.5 with the traded index.
        OneDimSpec {
            mu_s: 0.10,
            sigma_s: 0.3,
            mu_p: 0.08,
            sigma_p: 0.2,
            rho: 0.5,
            gamma: 1.0,
            lambda: 1.0,
            t_horizon: 1.0,
            s0: 1.0,
            g: ScalarPayoff::MinCap {
                cap: 2.0,
                offset: 0.0,
            },
        }
    }

    #[test]
    fn hermite_single_node() {
        let (x, w) = gauss_hermite(1);
        assert!(x[0].abs() < 1e-15);
        assert_relative_eq!(w[0], SQRT_PI, max_relative = 1e-14);
    }

    #[test]
    fn hermite_weights_sum_and_moments() {
        let (x, w) = gauss_hermite(5);
        let sum: f64 = w.iter().sum();
        assert_relative_eq!(sum, SQRT_PI, max_relative = 1e-12);
        // A 5-node rule integrates monomials up to degree 9 exactly against
        // exp(-x^2): odd moments vanish, even moments follow the half-integer
        // gamma ladder.
        let moment = |k: u32| -> f64 {
            x.iter()
                .zip(&w)
                .map(|(&xi, &wi)| wi * xi.powi(k as i32))
                .sum()
        };
        for odd in [1u32, 3, 5, 7, 9] {
            assert!(moment(odd).abs() < 1e-12, "odd moment {odd} not zero");
        }
        assert_relative_eq!(moment(2), SQRT_PI / 2.0, max_relative = 1e-12);
        assert_relative_eq!(moment(4), 3.0 * SQRT_PI / 4.0, max_relative = 1e-12);
        assert_relative_eq!(moment(6), 15.0 * SQRT_PI / 8.0, max_relative = 1e-12);
        assert_relative_eq!(moment(8), 105.0 * SQRT_PI / 16.0, max_relative = 1e-12);
    }

    #[test]
    fn hermite_large_n_stays_finite_and_symmetric() {
        let (x, w) = gauss_hermite(256);
        assert!(w.iter().all(|wi| wi.is_finite() && *wi > 0.0));
        let sum: f64 = w.iter().sum();
        assert_relative_eq!(sum, SQRT_PI, max_relative = 1e-12);
        for i in 0..128 {
            assert_relative_eq!(x[i], -x[255 - i], max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_payoff_prices_at_cash_value() {
        let mut spec = demo_spec();
        spec.g = ScalarPayoff::Constant(1.7);
        spec.lambda = 2.0;
        let p = distortion_price(&spec, DEFAULT_NODES).unwrap();
        assert_relative_eq!(p, 3.4, max_relative = 1e-12);
    }

    #[test]
    fn small_gamma_approaches_linear_price() {
        let mut spec = demo_spec();
        spec.gamma = 1e-6;
        let p = distortion_price(&spec, DEFAULT_NODES).unwrap();
        // Linear price under the same risk-adjusted drift.
        let mut lin = demo_spec();
        lin.gamma = 0.0;
        let l = distortion_price(&lin, DEFAULT_NODES).unwrap();
        assert!((p - l).abs() <= 1e-4, "p={p}, linear={l}");
    }

    #[test]
    fn demo_projection_reference_value() {
        // Frozen output of this oracle on the demo projection at the default
        // node count; guards against regressions in the quadrature stack.
        let p = distortion_price(&demo_spec(), DEFAULT_NODES).unwrap();
        assert!(p > 0.0 && p < 2.0, "price {p} outside (0, lambda*g_max)");
        assert_relative_eq!(p, 1.004279342734504, max_relative = 1e-10);
    }

    #[test]
    fn gamma_monotonicity() {
        let mut last = f64::INFINITY;
        for gamma in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let mut spec = demo_spec();
            spec.gamma = gamma;
            let p = distortion_price(&spec, DEFAULT_NODES).unwrap();
            assert!(
                p < last + 1e-12,
                "price should be nonincreasing in gamma: {p} after {last}"
            );
            assert!(p > 0.0 && p < 2.0);
            last = p;
        }
    }

    #[test]
    fn complete_market_constant_and_forward() {
        let mut spec = demo_spec();
        spec.rho = 1.0;
        spec.g = ScalarPayoff::Constant(2.0);
        spec.lambda = 1.5;
        let p = complete_market_price(&spec, DEFAULT_NODES).unwrap();
        assert_relative_eq!(p, 3.0, max_relative = 1e-12);

        // Identity payoff with the risk-adjusted drift tuned to zero prices
        // at the initial value.
        let fwd = OneDimSpec {
            mu_s: 0.12, // rho*sigma_s*mu_p/sigma_p = 1 * 0.3 * 0.4
            sigma_s: 0.3,
            mu_p: 0.08,
            sigma_p: 0.2,
            rho: 1.0,
            gamma: 1.0,
            lambda: 1.0,
            t_horizon: 1.0,
            s0: 1.0,
            g: ScalarPayoff::Identity,
        };
        let p = complete_market_price(&fwd, DEFAULT_NODES).unwrap();
        assert_relative_eq!(p, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn complete_market_rejects_partial_correlation() {
        let spec = demo_spec();
        assert!(matches!(
            complete_market_price(&spec, DEFAULT_NODES),
            Err(IndiffError::InvalidInput(_))
        ));
    }

    #[test]
    fn distortion_continuous_at_full_correlation() {
        let mut near = demo_spec();
        near.rho = 0.999;
        let p_near = distortion_price(&near, 2 * DEFAULT_NODES).unwrap();
        let mut full = demo_spec();
        full.rho = 1.0;
        let p_full = complete_market_price(&full, 2 * DEFAULT_NODES).unwrap();
        assert!(
            (p_near - p_full).abs() <= 1e-3,
            "rho->1 limit: {p_near} vs {p_full}"
        );
    }

    #[test]
    fn node_doubling_is_stable_for_kinked_payoff() {
        // The kink-split scheme must keep 128 vs 256 nodes within 1e-8;
        // distortion_price errors internally otherwise, so success here is
        // the assertion.
        let p128 = distortion_price(&demo_spec(), 128).unwrap();
        let p256 = distortion_price(&demo_spec(), 256).unwrap();
        assert!((p128 - p256).abs() <= NODE_DOUBLING_RTOL * p128.abs().max(1.0));
    }

    #[test]
    fn projection_of_two_asset_demo() {
        let sc = crate::presets::capped_claim_two_assets();
        let spec = project_scenario(&sc).unwrap();
        // The demo loading (0.15, 0.2598) was chosen to embed total
        // volatility 0.3 at correlation 0.5 up to rounding of 0.2598.
        assert!((spec.sigma_s - 0.3).abs() < 1e-4);
        assert!((spec.rho - 0.5).abs() < 1e-4);
        let p = distortion_price(&spec, DEFAULT_NODES).unwrap();
        assert!((p - 1.004279342734504).abs() < 1e-4);

        let mut path_dep = sc;
        path_dep.payoff = crate::market::Payoff::MinCapAverage {
            asset: 0,
            cap: 2.0,
            offset: 0.0,
        };
        assert!(project_scenario(&path_dep).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut spec = demo_spec();
        spec.sigma_p = 0.0;
        assert!(distortion_price(&spec, 64).is_err());
        let mut spec = demo_spec();
        spec.rho = 1.5;
        assert!(distortion_price(&spec, 64).is_err());
        let mut spec = demo_spec();
        spec.lambda = -1.0;
        assert!(distortion_price(&spec, 64).is_err());
    }
}
