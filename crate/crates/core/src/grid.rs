//! Time discretization shared by all routes.
//!
//! A grid is a strictly increasing sequence `0 = t_0 < ... < t_N = T`,
//! organized into consecutive blocks. Spacing is uniform inside each block
//! (different blocks may have different spacing); every block boundary is a
//! grid point. Routes that do not care about blocks treat the whole grid as
//! a single block.

use crate::error::{IndiffError, Result};

#[derive(Debug, Clone)]
pub struct TimeGrid {
    times: Vec<f64>,
    /// Indices into `times` delimiting blocks; starts at 0, ends at N.
    block_bounds: Vec<usize>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` steps on `[0, t_horizon]`.
    pub fn uniform(t_horizon: f64, n_steps: usize) -> Result<Self> {
        Self::with_boundaries(t_horizon, n_steps, &[])
    }

    /// Grid of roughly `target_steps` steps containing every boundary in
    /// `interior_boundaries` (strictly inside `(0, t_horizon)`) as a grid
    /// point, uniform within each block.
    pub fn with_boundaries(
        t_horizon: f64,
        target_steps: usize,
        interior_boundaries: &[f64],
    ) -> Result<Self> {
        if !(t_horizon.is_finite() && t_horizon > 0.0) {
            return Err(IndiffError::InvalidInput(format!(
                "horizon must be positive, got {t_horizon}"
            )));
        }
        if target_steps == 0 {
            return Err(IndiffError::InvalidInput("need at least one step".into()));
        }
        let mut bounds = vec![0.0];
        let mut interior: Vec<f64> = interior_boundaries.to_vec();
        interior.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &b in &interior {
            if !(b.is_finite() && b > 0.0 && b < t_horizon) {
                return Err(IndiffError::InvalidInput(format!(
                    "block boundary {b} outside (0, {t_horizon})"
                )));
            }
            if b <= *bounds.last().unwrap() {
                return Err(IndiffError::InvalidInput(
                    "block boundaries must be strictly increasing".into(),
                ));
            }
            bounds.push(b);
        }
        bounds.push(t_horizon);

        let target_dt = t_horizon / target_steps as f64;
        let mut times = vec![0.0];
        let mut block_bounds = vec![0usize];
        for w in bounds.windows(2) {
            let (a, b) = (w[0], w[1]);
            let steps = (((b - a) / target_dt).ceil() as usize).max(1);
            let dt = (b - a) / steps as f64;
            for k in 1..steps {
                times.push(a + k as f64 * dt);
            }
            times.push(b);
            block_bounds.push(times.len() - 1);
        }
        Ok(TimeGrid {
            times,
            block_bounds,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn n_blocks(&self) -> usize {
        self.block_bounds.len() - 1
    }

    /// Step-index range `(k_start, k_end)` of block `j`; the block covers
    /// grid times `times[k_start..=k_end]`.
    pub fn block(&self, j: usize) -> (usize, usize) {
        (self.block_bounds[j], self.block_bounds[j + 1])
    }

    pub fn block_bounds(&self) -> &[usize] {
        &self.block_bounds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn uniform_grid_hits_endpoints() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.n_steps(), 4);
        assert_eq!(g.t(0), 0.0);
        assert_relative_eq!(g.t(2), 0.5);
        assert_relative_eq!(g.horizon(), 1.0);
        assert_eq!(g.n_blocks(), 1);
    }

    #[test]
    fn boundaries_become_grid_points_with_uniform_blocks() {
        let bounds = [1.0 / 3.0, 2.0 / 3.0];
        let g = TimeGrid::with_boundaries(1.0, 50, &bounds).unwrap();
        assert_eq!(g.n_blocks(), 3);
        for (j, &b) in bounds.iter().enumerate() {
            let (_, k_end) = g.block(j);
            assert_relative_eq!(g.t(k_end), b, max_relative = 1e-14);
        }
        // Uniform spacing within each block.
        for j in 0..g.n_blocks() {
            let (k0, k1) = g.block(j);
            let dt0 = g.dt(k0);
            for k in k0..k1 {
                assert_relative_eq!(g.dt(k), dt0, max_relative = 1e-12);
            }
        }
        assert!(g.n_steps() >= 50);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TimeGrid::uniform(0.0, 10).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::with_boundaries(1.0, 10, &[1.2]).is_err());
        assert!(TimeGrid::with_boundaries(1.0, 10, &[0.5, 0.5]).is_err());
    }
}
