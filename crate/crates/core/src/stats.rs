//! Deterministic scalar reductions shared by the simulation and solver
//! modules.
//!
//! Monte Carlo outputs must not depend on scheduling, so every mean or
//! standard error in the crate funnels through these sequential, compensated
//! accumulations.

/// Neumaier-compensated sum over a fixed iteration order.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated arithmetic mean; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Mean together with the standard error of the mean (sample standard
/// deviation over the square root of the count).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (mean(xs), f64::INFINITY);
    }
    let m = mean(xs);
    let var = compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Sample standard deviation (unbiased denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (compensated_sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64).sqrt()
}

/// Pearson correlation of two equal-length samples.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    let cov = compensated_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let vx = compensated_sum(xs.iter().map(|x| (x - mx) * (x - mx)));
    let vy = compensated_sum(ys.iter().map(|y| (y - my) * (y - my)));
    cov / (vx.sqrt() * vy.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn compensation_beats_naive_summation() {
        // 1 followed by many tiny terms that a naive f64 sum would drop.
        let xs: Vec<f64> = std::iter::once(1.0)
            .chain(std::iter::repeat_n(1e-16, 10_000))
            .collect();
        let s = compensated_sum(xs.iter().copied());
        assert_relative_eq!(s, 1.0 + 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn mean_and_stderr_on_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let (m, se) = mean_and_stderr(&xs);
        assert_relative_eq!(m, 2.5, max_relative = 1e-15);
        // Sample variance 5/3, stderr sqrt(5/12).
        assert_relative_eq!(se, (5.0_f64 / 12.0).sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn correlation_of_identical_samples_is_one() {
        let xs = [0.3, -1.2, 2.5, 0.0, 4.1];
        assert_relative_eq!(correlation(&xs, &xs), 1.0, max_relative = 1e-12);
    }
}
