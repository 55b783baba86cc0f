//! Sampled time series helpers shared by the analysis modules.

/// Cumulative trapezoid integral, starting at zero.
pub fn cumulative_trapezoid(grid: &[f64], values: &[f64]) -> Vec<f64> {
    assert_eq!(grid.len(), values.len());
    let mut out = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    out.push(acc);
    for i in 1..grid.len() {
        acc += 0.5 * (grid[i] - grid[i - 1]) * (values[i] + values[i - 1]);
        out.push(acc);
    }
    out
}

/// `t ↦ (t − t₀)⁻¹ ∫_{t₀}^{t} s`; the first point equals the series value.
pub fn running_average(grid: &[f64], values: &[f64]) -> Vec<f64> {
    let integral = cumulative_trapezoid(grid, values);
    integral
        .iter()
        .zip(grid)
        .zip(values)
        .enumerate()
        .map(|(i, ((acc, t), v))| if i == 0 { *v } else { acc / (t - grid[0]) })
        .collect()
}

/// Mean of `values` over `[t_a, t_b]` by trapezoid on the grid points inside the window.
pub fn window_mean(grid: &[f64], values: &[f64], t_a: f64, t_b: f64) -> Option<f64> {
    let (lo, hi) = window_indices(grid, t_a, t_b)?;
    if hi <= lo {
        return values.get(lo).copied();
    }
    let integral = cumulative_trapezoid(&grid[lo..=hi], &values[lo..=hi]);
    Some(integral.last().unwrap() / (grid[hi] - grid[lo]))
}

/// Inclusive index range of grid points inside `[t_a, t_b]` (grid increasing).
pub fn window_indices(grid: &[f64], t_a: f64, t_b: f64) -> Option<(usize, usize)> {
    let slack = 1e-9 * (grid.last()? - grid[0]).abs().max(1.0);
    let lo = grid.iter().position(|&t| t >= t_a - slack)?;
    let hi = grid.iter().rposition(|&t| t <= t_b + slack)?;
    (hi >= lo).then_some((lo, hi))
}

/// Piecewise-linear interpolation on an increasing grid, clamped at the ends.
#[derive(Debug, Clone, Copy)]
pub struct LinearInterp<'a> {
    grid: &'a [f64],
    values: &'a [f64],
    uniform_step: Option<f64>,
}

impl<'a> LinearInterp<'a> {
    pub fn new(grid: &'a [f64], values: &'a [f64]) -> Self {
        assert_eq!(grid.len(), values.len());
        assert!(!grid.is_empty());
        let uniform_step = if grid.len() > 2 {
            let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
            let uniform = grid
                .windows(2)
                .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs());
            uniform.then_some(h)
        } else {
            None
        };
        Self {
            grid,
            values,
            uniform_step,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.grid.len();
        if n == 1 || t <= self.grid[0] {
            return self.values[0];
        }
        if t >= self.grid[n - 1] {
            return self.values[n - 1];
        }
        let i = match self.uniform_step {
            Some(h) => {
                let guess = (((t - self.grid[0]) / h).floor() as usize).min(n - 2);
                // guard against rounding at cell edges
                if t < self.grid[guess] {
                    guess.saturating_sub(1)
                } else if t > self.grid[guess + 1] {
                    (guess + 1).min(n - 2)
                } else {
                    guess
                }
            }
            None => self.grid.partition_point(|&g| g <= t).saturating_sub(1).min(n - 2),
        };
        let (t0, t1) = (self.grid[i], self.grid[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }
}

pub fn max_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(t_end: f64, n: usize) -> Vec<f64> {
        (0..=n).map(|i| t_end * i as f64 / n as f64).collect()
    }

    #[test]
    fn running_average_of_constant() {
        let g = grid(10.0, 100);
        let v = vec![2.5; g.len()];
        assert!(running_average(&g, &v).iter().all(|a| (a - 2.5).abs() < 1e-14));
    }

    #[test]
    fn running_average_of_sine() {
        let g = grid(std::f64::consts::PI, 20_000);
        let v: Vec<f64> = g.iter().map(|t| t.sin()).collect();
        let avg = running_average(&g, &v);
        assert_relative_eq!(*avg.last().unwrap(), 2.0 / std::f64::consts::PI, epsilon = 1e-8);
        assert_eq!(avg[0], 0.0);
    }

    #[test]
    fn running_average_of_ramp() {
        let g = grid(4.0, 40);
        let avg = running_average(&g, &g);
        for (a, t) in avg.iter().zip(&g).skip(1) {
            assert_relative_eq!(*a, t / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_is_exact_on_lines() {
        let g = grid(2.0, 8);
        let v: Vec<f64> = g.iter().map(|t| 3.0 * t - 1.0).collect();
        let li = LinearInterp::new(&g, &v);
        for t in [0.0, 0.1, 0.77, 1.999, 2.0] {
            assert_relative_eq!(li.eval(t), 3.0 * t - 1.0, epsilon = 1e-12);
        }
        assert_eq!(li.eval(-1.0), -1.0);
        assert_eq!(li.eval(5.0), 5.0);
    }

    #[test]
    fn window_mean_matches_closed_form() {
        let g = grid(10.0, 10_000);
        let v: Vec<f64> = g.clone();
        assert_relative_eq!(window_mean(&g, &v, 2.0, 6.0).unwrap(), 4.0, epsilon = 1e-10);
    }
}
