//! Exponential-utility indifference pricing and hedging of claims on
//! non-traded assets, with one traded index available for partial hedging.
//!
//! The buyer's value process solves a backward SDE with a quadratic driver.
//! The indifference price of `lambda` units of a claim is the difference
//! between the value processes with and without the claim, and the partial
//! hedge is read off the difference of their martingale integrands.
//!
//! Three numerical routes compute the same price and are cross-checked
//! against each other and against a one-dimensional quadrature oracle:
//!
//! * [`bsde`] — regression Monte Carlo backward induction on the quadratic
//!   backward SDE (the nonlinear pricing rule);
//! * [`fde`] — a forward functional equation for the correction process `V`
//!   whose terminal value linearizes the price (the pseudo linear pricing
//!   rule), with a measure-change perturbation scheme that splits the claim
//!   into small pieces, each solved by a contracting Picard iteration;
//! * [`girsanov`] — a nonlinear change of measure under which the driver
//!   vanishes entirely, so the value reduces to a plain conditional
//!   expectation under shifted asset dynamics, solved blockwise by a
//!   forward Picard iteration on the log-price paths.
//!
//! [`oracles`] prices one-dimensional projections in closed quadrature form
//! (the distortion formula) and anchors the Monte Carlo routes. [`validation`]
//! bundles the full cross-route acceptance suite that the `acceptance`
//! integration test and the CLI `validate` subcommand both execute.

// Numerical kernels iterate parallel arrays by step/path/component index,
// solver entry points take the full context of a run, and negated
// comparisons (`!(x > y)`) are deliberate so NaN falls into the error
// branch rather than passing a `<=` test.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bsde;
pub mod error;
pub mod fde;
pub mod girsanov;
pub mod grid;
pub mod market;
pub mod oracles;
pub mod paths;
pub mod presets;
pub mod regression;
pub mod report;
pub mod stats;
pub mod validation;

pub use error::{IndiffError, Result};
