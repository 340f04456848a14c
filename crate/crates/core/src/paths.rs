//! Brownian batches, asset-path evolution under drift-adjusted measures, and
//! Doléans-Dade exponential weights.
//!
//! # Measure convention
//!
//! Every measure change in the crate is described by its *drift shift* `n`,
//! a per-step `d`-vector: under the shifted measure the process
//! `B + integral of n dt` is the Brownian motion. Consequently each asset's
//! log-drift drops by `<sigma, n(t)>`, and a backward equation with driver
//! `G(z)` under the base measure has driver `G(z) + <z, n>` under the shifted
//! one. The finite-variation parts are related by
//! `V_base(t) = V_shifted(t) - sum_k <Z_k, n_k> dt_k`,
//! which [`crate::fde`] and [`crate::girsanov`] use to transport their
//! solutions back to the pricing measure.

use ndarray::{Array2, Array3, ArrayView2, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{IndiffError, Result};
use crate::grid::TimeGrid;
use crate::market::Scenario;
use crate::stats;

/// Batch of discrete Brownian increments, shape `(M, N, d)`; entry
/// `(m, k, j)` is the increment of component `j` over `[t_k, t_{k+1}]` on
/// path `m`.
#[derive(Debug, Clone)]
pub struct BrownianBatch {
    pub dw: Array3<f64>,
    pub seed: u64,
    /// Counter-based stream identifier per path; path `m` always draws from
    /// stream `m + 1` of the seeded generator, so the batch is identical
    /// under any parallel schedule.
    pub stream_ids: Vec<u64>,
}

impl BrownianBatch {
    /// `M` independent `dim`-dimensional discrete Brownian paths on `grid`.
    /// Deterministic given `(grid, m_paths, dim, seed)`.
    pub fn generate(grid: &TimeGrid, m_paths: usize, dim: usize, seed: u64) -> Result<Self> {
        if m_paths == 0 || dim == 0 {
            return Err(IndiffError::InvalidInput(
                "need at least one path and one Brownian component".into(),
            ));
        }
        let n = grid.n_steps();
        let sqrt_dt: Vec<f64> = (0..n).map(|k| grid.dt(k).sqrt()).collect();
        let mut buf = vec![0.0_f64; m_paths * n * dim];
        buf.par_chunks_mut(n * dim)
            .enumerate()
            .for_each(|(m, chunk)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64 + 1);
                for k in 0..n {
                    for j in 0..dim {
                        let xi: f64 = rng.sample(StandardNormal);
                        chunk[k * dim + j] = sqrt_dt[k] * xi;
                    }
                }
            });
        let dw = Array3::from_shape_vec((m_paths, n, dim), buf).expect("computed shape");
        Ok(Self {
            dw,
            seed,
            stream_ids: (1..=m_paths as u64).collect(),
        })
    }

    pub fn m_paths(&self) -> usize {
        self.dw.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.dw.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.dw.shape()[2]
    }
}

/// Simulated prices on a grid: non-traded assets `S` with shape
/// `(M, N+1, d)` and the traded index `P` with shape `(M, N+1)`.
#[derive(Debug, Clone)]
pub struct AssetPaths {
    pub s: Array3<f64>,
    pub p: Array2<f64>,
    /// Label of the measure the drift encodes (for example `"P"` or a
    /// shifted-measure tag); informational only.
    pub measure_tag: String,
}

/// Coefficient values frozen per step so the per-path loop does no
/// coefficient evaluation.
struct StepCoeffs {
    mu_p: f64,
    sigma_p: Vec<f64>,
    mu_s: Vec<f64>,
    sigma_s: Vec<Vec<f64>>,
}

fn freeze_coeffs(scenario: &Scenario, grid: &TimeGrid) -> Vec<StepCoeffs> {
    (0..grid.n_steps())
        .map(|k| {
            let t = grid.t(k);
            StepCoeffs {
                mu_p: scenario.mu_p.eval(t),
                sigma_p: scenario.sigma_p.eval(t).to_vec(),
                mu_s: scenario.mu_s.iter().map(|c| c.eval(t)).collect(),
                sigma_s: scenario.sigma_s.iter().map(|c| c.eval(t).to_vec()).collect(),
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AssetPaths {
    /// Evolve all assets under the base measure (no drift shift).
    pub fn evolve(scenario: &Scenario, grid: &TimeGrid, brownian: &BrownianBatch) -> Result<Self> {
        let (paths, _) =
            Self::evolve_impl(scenario, grid, brownian, "P", |_, _, out| out.fill(0.0), false)?;
        Ok(paths)
    }

    /// Evolve all assets under the measure defined by a drift shift.
    ///
    /// `shift(k, x, out)` receives the step index and the current log-price
    /// vector and must write the shift `n(t_k)` into `out`; each asset's
    /// log-price then advances by
    /// `(mu_i - |sigma_i|^2 / 2 - <sigma_i, n>) dt + <sigma_i, dW>`
    /// (the index `P` analogously). Returns the paths together with the
    /// realized shifts, shape `(M, N, d)`, which later recoveries and
    /// density computations consume.
    pub fn evolve_shifted<F>(
        scenario: &Scenario,
        grid: &TimeGrid,
        brownian: &BrownianBatch,
        measure_tag: &str,
        shift: F,
    ) -> Result<(Self, Array3<f64>)>
    where
        F: Fn(usize, &[f64], &mut [f64]) + Sync,
    {
        let (paths, shifts) = Self::evolve_impl(scenario, grid, brownian, measure_tag, shift, true)?;
        Ok((paths, shifts.expect("recording requested")))
    }

    fn evolve_impl<F>(
        scenario: &Scenario,
        grid: &TimeGrid,
        brownian: &BrownianBatch,
        measure_tag: &str,
        shift: F,
        record_shifts: bool,
    ) -> Result<(Self, Option<Array3<f64>>)>
    where
        F: Fn(usize, &[f64], &mut [f64]) + Sync,
    {
        let d = scenario.d;
        let n = grid.n_steps();
        let m_paths = brownian.m_paths();
        if brownian.dim() != d {
            return Err(IndiffError::InvalidInput(format!(
                "brownian batch has {} components, scenario needs {d}",
                brownian.dim()
            )));
        }
        if brownian.n_steps() != n {
            return Err(IndiffError::InvalidInput(format!(
                "brownian batch has {} steps, grid has {n}",
                brownian.n_steps()
            )));
        }
        let coeffs = freeze_coeffs(scenario, grid);
        let x0: Vec<f64> = scenario.s0.iter().map(|s| s.ln()).collect();
        let xp0 = scenario.p0.ln();

        let mut s_buf = vec![0.0_f64; m_paths * (n + 1) * d];
        let mut p_buf = vec![0.0_f64; m_paths * (n + 1)];
        // One dummy slot per path when not recording, so the three-way zip
        // still yields exactly M chunks.
        let shift_chunk = if record_shifts { n * d } else { 1 };
        let mut shift_buf = vec![0.0_f64; m_paths * shift_chunk];
        // Keep the zip positional so path m always lands in chunk m.
        let dw = &brownian.dw;
        s_buf
            .par_chunks_mut((n + 1) * d)
            .zip(p_buf.par_chunks_mut(n + 1))
            .zip(shift_buf.par_chunks_mut(shift_chunk))
            .enumerate()
            .for_each(|(m, ((s_chunk, p_chunk), sh_chunk))| {
                let mut x = x0.clone();
                let mut xp = xp0;
                let mut n_vec = vec![0.0_f64; d];
                for (i, xi) in x.iter().enumerate() {
                    s_chunk[i] = xi.exp();
                }
                p_chunk[0] = xp.exp();
                for k in 0..n {
                    let dt = grid.dt(k);
                    let c = &coeffs[k];
                    let dw_row = dw.slice(s![m, k, ..]);
                    let dw_row = dw_row.as_slice().expect("contiguous increments");
                    shift(k, &x, &mut n_vec);
                    if record_shifts {
                        sh_chunk[k * d..(k + 1) * d].copy_from_slice(&n_vec);
                    }
                    for i in 0..d {
                        let sig = &c.sigma_s[i];
                        let vol_sq = dot(sig, sig);
                        x[i] += (c.mu_s[i] - 0.5 * vol_sq - dot(sig, &n_vec)) * dt
                            + dot(sig, dw_row);
                        s_chunk[(k + 1) * d + i] = x[i].exp();
                    }
                    let volp_sq = dot(&c.sigma_p, &c.sigma_p);
                    xp += (c.mu_p - 0.5 * volp_sq - dot(&c.sigma_p, &n_vec)) * dt
                        + dot(&c.sigma_p, dw_row);
                    p_chunk[k + 1] = xp.exp();
                }
            });

        let s_arr = Array3::from_shape_vec((m_paths, n + 1, d), s_buf).expect("computed shape");
        let p_arr = Array2::from_shape_vec((m_paths, n + 1), p_buf).expect("computed shape");
        let shifts = if record_shifts {
            Some(Array3::from_shape_vec((m_paths, n, d), shift_buf).expect("computed shape"))
        } else {
            None
        };
        Ok((
            Self {
                s: s_arr,
                p: p_arr,
                measure_tag: measure_tag.to_string(),
            },
            shifts,
        ))
    }

    pub fn m_paths(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.s.shape()[1] - 1
    }

    pub fn dim(&self) -> usize {
        self.s.shape()[2]
    }

    /// Debug dump: little-endian `u64` header `(M, N, d)` followed by the
    /// flat `S` array and the flat `P` array as little-endian doubles. Not a
    /// stability contract.
    pub fn dump_binary(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (m, n1, d) = (self.m_paths(), self.n_steps() + 1, self.dim());
        for v in [m as u64, self.n_steps() as u64, d as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &x in self.s.as_slice().expect("owned layout") {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in self.p.as_slice().expect("owned layout") {
            w.write_all(&x.to_le_bytes())?;
        }
        debug_assert_eq!(m * n1 * d, self.s.len());
        Ok(())
    }

    /// Inverse of [`AssetPaths::dump_binary`].
    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut u = [0_u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let m = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let read_block = |r: &mut dyn Read, len: usize| -> Result<Vec<f64>> {
            let mut out = vec![0.0_f64; len];
            let mut b = [0_u8; 8];
            for slot in out.iter_mut() {
                r.read_exact(&mut b)?;
                *slot = f64::from_le_bytes(b);
            }
            Ok(out)
        };
        let s_flat = read_block(&mut r, m * (n + 1) * d)?;
        let p_flat = read_block(&mut r, m * (n + 1))?;
        Ok(Self {
            s: Array3::from_shape_vec((m, n + 1, d), s_flat)
                .map_err(|e| IndiffError::InvalidInput(format!("corrupt dump: {e}")))?,
            p: Array2::from_shape_vec((m, n + 1), p_flat)
                .map_err(|e| IndiffError::InvalidInput(format!("corrupt dump: {e}")))?,
            measure_tag: "loaded".to_string(),
        })
    }
}

/// Doléans-Dade exponential weights of a deterministic per-step integrand.
#[derive(Debug, Clone)]
pub struct MeasureChange {
    /// Per-step integrand `h`, shape `(N, d)`.
    pub integrand: Array2<f64>,
    /// Running exponential `exp(sum <h, dW> - 1/2 sum |h|^2 dt)` evaluated
    /// at every grid time, shape `(M, N+1)`; the first column is 1.
    pub weights: Array2<f64>,
    /// Square root of the largest remaining quadratic variation
    /// `max_k sum_{l >= k} |h_l|^2 dt_l` — the (here deterministic) sampled
    /// version of the conditional-remaining-energy norm that controls
    /// uniform integrability of the exponential.
    pub bmo_estimate: f64,
}

/// Exponential weights `w_t = exp(sum_k <h_k, dW_k> - 1/2 sum_k |h_k|^2 dt_k)`
/// along each path. Feeding the realized drift shift of a simulation run
/// back in with the *same* increments yields the density of the base measure
/// against the shifted one, because under the shifted measure those
/// increments are exactly its Brownian increments.
pub fn doleans_weights(
    integrand: ArrayView2<'_, f64>,
    grid: &TimeGrid,
    brownian: &BrownianBatch,
) -> Result<MeasureChange> {
    let n = grid.n_steps();
    let d = brownian.dim();
    if integrand.shape() != [n, d] {
        return Err(IndiffError::InvalidInput(format!(
            "integrand shape {:?} does not match (N, d) = ({n}, {d})",
            integrand.shape()
        )));
    }
    if integrand.iter().any(|x| !x.is_finite()) {
        return Err(IndiffError::NonFinite("measure-change integrand".into()));
    }
    let m_paths = brownian.m_paths();
    let mut weights = Array2::<f64>::zeros((m_paths, n + 1));
    let half_energy: Vec<f64> = (0..n)
        .map(|k| {
            let h = integrand.row(k);
            0.5 * h.iter().map(|x| x * x).sum::<f64>() * grid.dt(k)
        })
        .collect();
    for m in 0..m_paths {
        let mut log_w = 0.0;
        weights[(m, 0)] = 1.0;
        for k in 0..n {
            let dw_row = brownian.dw.slice(s![m, k, ..]);
            let h = integrand.row(k);
            log_w += h.iter().zip(dw_row.iter()).map(|(a, b)| a * b).sum::<f64>() - half_energy[k];
            weights[(m, k + 1)] = log_w.exp();
        }
    }
    let mut remaining = 0.0;
    let mut max_remaining = 0.0_f64;
    for k in (0..n).rev() {
        remaining += 2.0 * half_energy[k];
        max_remaining = max_remaining.max(remaining);
    }
    Ok(MeasureChange {
        integrand: integrand.to_owned(),
        weights,
        bmo_estimate: max_remaining.sqrt(),
    })
}

/// Sampled remaining-energy profile of per-path realized shifts, shape
/// `(M, N, d)`: entry `k` of the result is the mean over paths of
/// `sum_{l >= k} |n_l|^2 dt_l`. The square root of the maximum entry is the
/// Monte Carlo proxy for the BMO norm of the measure-change martingale.
pub fn shift_energy_profile(shifts: &Array3<f64>, grid: &TimeGrid) -> Vec<f64> {
    let (m_paths, n, d) = (shifts.shape()[0], shifts.shape()[1], shifts.shape()[2]);
    let mut profile = vec![0.0_f64; n];
    let mut per_path = vec![0.0_f64; m_paths];
    for k in (0..n).rev() {
        let dt = grid.dt(k);
        for (m, acc) in per_path.iter_mut().enumerate() {
            let mut e = 0.0;
            for j in 0..d {
                let v = shifts[(m, k, j)];
                e += v * v;
            }
            *acc += e * dt;
        }
        profile[k] = stats::mean(&per_path);
    }
    profile
}
