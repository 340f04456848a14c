//! Error type shared by the library and the CLI.
//!
//! Model-assumption violations carry the short label (`A1`..`A4`) that the
//! CLI surfaces to the user, so rejection messages always name the
//! assumption that failed:
//!
//! * `A1` — coefficient functions bounded and finite on the horizon,
//! * `A2` — uniform ellipticity of the traded-index volatility,
//! * `A3` — bounded nonnegative payoff,
//! * `A4` — log-Lipschitz terminal payoff (required by the block-measure
//!   route).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndiffError {
    /// A standing model assumption does not hold for the supplied scenario.
    #[error("assumption {assumption} violated: {detail}")]
    Assumption {
        assumption: &'static str,
        detail: String,
    },

    /// Malformed inputs that are not tied to a named model assumption
    /// (dimension mismatches, negative unit counts, bad grids, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Least-squares projection failed (severe rank loss or non-finite data).
    #[error("regression failed at time index {step}: {detail}")]
    Regression { step: usize, detail: String },

    /// A Picard iteration stopped contracting before reaching tolerance.
    #[error(
        "{context} failed to contract after {iterations} sweeps \
         (last difference {last_diff:.3e}, ratios {ratios:?})"
    )]
    NonContraction {
        context: String,
        iterations: usize,
        last_diff: f64,
        ratios: Vec<f64>,
    },

    /// The quadrature oracle did not pass its node-doubling stability check.
    #[error("quadrature instability: {0}")]
    Quadrature(String),

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IndiffError>;

impl IndiffError {
    /// Helper for assumption violations with the conventional short label.
    pub fn assumption(label: &'static str, detail: impl Into<String>) -> Self {
        IndiffError::Assumption {
            assumption: label,
            detail: detail.into(),
        }
    }
}
