//! Reference scenario configurations shared by tests, docs, and the CLI
//! examples.

use crate::market::{Coeff, CoeffVec, Payoff, Scenario};

/// Two-asset demo market with a capped claim on the first asset.
///
/// The traded index has drift `0.08` and volatility `0.2` on the first
/// Brownian axis. The first non-traded asset has total volatility `0.3`
/// with instantaneous correlation `0.5` to the index; the second asset is
/// payoff-irrelevant and exists to exercise the multi-dimensional code
/// paths. The claim is `min(2, S^1_T)`, one unit, risk aversion 1, horizon
/// one year.
pub fn capped_claim_two_assets() -> Scenario {
    Scenario {
        d: 2,
        mu_p: Coeff::Const(0.08),
        sigma_p: CoeffVec::Const(vec![0.2, 0.0]),
        mu_s: vec![Coeff::Const(0.10), Coeff::Const(0.05)],
        sigma_s: vec![
            CoeffVec::Const(vec![0.15, 0.2598]),
            CoeffVec::Const(vec![0.0, 0.25]),
        ],
        s0: vec![1.0, 1.0],
        p0: 1.0,
        gamma: 1.0,
        lambda: 1.0,
        t_horizon: 1.0,
        payoff: Payoff::MinCap {
            asset: 0,
            cap: 2.0,
            offset: 0.0,
        },
        ellipticity_floor: 1e-8,
        k1: 4.0,
    }
}

/// Same demo market with the first asset's instantaneous correlation to the
/// index set to `rho` (total volatility kept at `0.3`). `rho = 0` gives an
/// unhedgeable claim; `rho` near one approaches the complete-market limit.
pub fn capped_claim_with_correlation(rho: f64) -> Scenario {
    assert!((-1.0..=1.0).contains(&rho));
    let mut sc = capped_claim_two_assets();
    let total = 0.3;
    sc.sigma_s[0] = CoeffVec::Const(vec![total * rho, total * (1.0 - rho * rho).sqrt()]);
    sc
}
