//! Dormand-Prince 5(4) integrator with dense output.
//!
//! Works in forward or reverse time and writes the solution onto a prescribed
//! output grid using the order-4 continuous extension of the method, so grid
//! values are interpolants between accepted steps rather than re-integrations.
//! Matrix ODEs go through the same path with the matrix flattened to a vector.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("invalid integrator argument: {0}")]
    InvalidArgument(String),
    #[error("step size underflow at t = {time} (h = {step:e}); problem is stiff or singular")]
    StepSizeUnderflow { time: f64, step: f64 },
    #[error("state became non-finite after t = {last_valid_time}")]
    Divergence { last_valid_time: f64 },
    #[error("maximum number of steps ({0}) exceeded")]
    MaxSteps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Integration stops with [`Outcome::Escaped`] once `‖state‖` exceeds this.
    pub escape_radius: f64,
    pub max_steps: usize,
    pub max_step: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            escape_radius: 1e6,
            max_steps: 5_000_000,
            max_step: None,
        }
    }
}

impl OdeOptions {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn with_escape_radius(mut self, radius: f64) -> Self {
        self.escape_radius = radius;
        self
    }

    pub fn with_max_step(mut self, h: f64) -> Self {
        self.max_step = Some(h);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Completed,
    /// `‖state‖` crossed the escape radius at `time`; the trajectory ends before it.
    Escaped { time: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// States sampled on a strictly monotone output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    data: Vec<f64>,
    pub tolerance_used: f64,
    pub outcome: Outcome,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks(self.dim)
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    pub fn norms(&self) -> Vec<f64> {
        self.states().map(norm2).collect()
    }

    pub fn escaped(&self) -> bool {
        matches!(self.outcome, Outcome::Escaped { .. })
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Uniform grid from `t_start` towards `t_end` with spacing `step`; `t_end` is always included.
pub fn uniform_grid(t_start: f64, t_end: f64, step: f64) -> Vec<f64> {
    let span = t_end - t_start;
    let dir = span.signum();
    let count = (span.abs() / step).floor() as usize;
    let mut grid: Vec<f64> = (0..=count).map(|i| t_start + dir * step * i as f64).collect();
    let last = *grid.last().unwrap();
    if (t_end - last).abs() > 1e-9 * step {
        grid.push(t_end);
    } else {
        *grid.last_mut().unwrap() = t_end;
    }
    grid
}

/// Integrates from `t_start` to `t_end` and samples on a uniform grid of spacing `output_step`.
pub fn integrate<F>(
    rhs: F,
    t_start: f64,
    t_end: f64,
    initial: &[f64],
    opts: &OdeOptions,
    output_step: f64,
) -> Result<Trajectory, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(output_step > 0.0) || !output_step.is_finite() {
        return Err(OdeError::InvalidArgument(format!(
            "output step must be positive, got {output_step}"
        )));
    }
    if t_end == t_start || !t_end.is_finite() || !t_start.is_finite() {
        return Err(OdeError::InvalidArgument(
            "t_end must differ from t_start".into(),
        ));
    }
    integrate_on(rhs, &uniform_grid(t_start, t_end, output_step), initial, opts)
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Dense output.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

struct Dense {
    t_old: f64,
    h: f64,
    r: [Vec<f64>; 5],
}

impl Dense {
    fn eval(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t_old) / self.h;
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.r;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }
}

/// Integrates through the strictly monotone output `times`, starting from `initial` at `times[0]`.
pub fn integrate_on<F>(
    mut rhs: F,
    times: &[f64],
    initial: &[f64],
    opts: &OdeOptions,
) -> Result<Trajectory, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    validate(times, initial, opts)?;
    let n = initial.len();
    let t_start = times[0];
    let t_end = *times.last().unwrap();
    let dir = (t_end - t_start).signum();
    let span = (t_end - t_start).abs();
    let h_min = 1e-12 * span;
    let h_max = opts.max_step.unwrap_or(span).min(span);

    let mut traj = Trajectory {
        dim: n,
        times: Vec::with_capacity(times.len()),
        data: Vec::with_capacity(times.len() * n),
        tolerance_used: opts.rel_tol,
        outcome: Outcome::Completed,
        stats: StepStats::default(),
    };
    traj.times.push(t_start);
    traj.data.extend_from_slice(initial);
    if norm2(initial) > opts.escape_radius {
        traj.outcome = Outcome::Escaped { time: t_start };
        return Ok(traj);
    }

    let mut y = initial.to_vec();
    let mut t = t_start;
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut err_vec = vec![0.0; n];
    let mut dense = Dense {
        t_old: t,
        h: 1.0,
        r: std::array::from_fn(|_| vec![0.0; n]),
    };
    let mut buf = vec![0.0; n];

    rhs(t, &y, &mut k[0]);
    traj.stats.evaluations += 1;
    let mut h = initial_step(&mut rhs, t, &y, &k[0], dir, h_max, opts, &mut traj.stats);
    let mut fac_old = 1e-4_f64;
    let mut next_out = 1;
    let mut reject_streak = false;
    let mut last_nonfinite = false;

    loop {
        if traj.stats.accepted + traj.stats.rejected >= opts.max_steps {
            return Err(OdeError::MaxSteps(opts.max_steps));
        }
        let remaining = (t_end - t).abs();
        if remaining <= 1e-14 * span.max(1.0) {
            break;
        }
        let mut last = false;
        if h.abs() >= remaining {
            h = dir * remaining;
            last = true;
        }
        if h.abs() < h_min {
            // a finite-time singularity stalls the step just short of the escape radius
            let ny = norm2(&y);
            if !last_nonfinite && ny >= opts.escape_radius.sqrt() && ny <= 1e-6 * span * norm2(&k[0]) {
                traj.outcome = Outcome::Escaped { time: t };
                return Ok(traj);
            }
            return Err(if last_nonfinite {
                OdeError::Divergence { last_valid_time: t }
            } else {
                OdeError::StepSizeUnderflow { time: t, step: h.abs() }
            });
        }

        // stages
        for i in 0..n {
            y_stage[i] = y[i] + h * A21 * k[0][i];
        }
        rhs(t + C2 * h, &y_stage, &mut k[1]);
        for i in 0..n {
            y_stage[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        rhs(t + C3 * h, &y_stage, &mut k[2]);
        for i in 0..n {
            y_stage[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        rhs(t + C4 * h, &y_stage, &mut k[3]);
        for i in 0..n {
            y_stage[i] =
                y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        rhs(t + C5 * h, &y_stage, &mut k[4]);
        for i in 0..n {
            y_stage[i] = y[i]
                + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
        }
        let t_new = if last { t_end } else { t + h };
        rhs(t_new, &y_stage, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        rhs(t_new, &y_new, &mut k[6]);
        traj.stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..n {
            err_vec[i] = h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sk = opts.abs_tol + opts.rel_tol * y[i].abs().max(y_new[i].abs());
            err += (err_vec[i] / sk).powi(2);
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            last_nonfinite = true;
            traj.stats.rejected += 1;
            h *= 0.25;
            reject_streak = true;
            continue;
        }
        last_nonfinite = false;

        let fac11 = err.powf(0.2);
        let mut fac = fac11 / fac_old.powf(BETA);
        fac = (fac / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
        let mut h_new = h / fac;

        if err <= 1.0 {
            fac_old = err.max(1e-4);
            traj.stats.accepted += 1;

            // dense output coefficients for the step [t, t_new]
            dense.t_old = t;
            dense.h = t_new - t;
            for i in 0..n {
                let ydiff = y_new[i] - y[i];
                let bspl = dense.h * k[0][i] - ydiff;
                dense.r[0][i] = y[i];
                dense.r[1][i] = ydiff;
                dense.r[2][i] = bspl;
                dense.r[3][i] = ydiff - dense.h * k[6][i] - bspl;
                dense.r[4][i] = dense.h
                    * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i]
                        + D7 * k[6][i]);
            }

            let escaped_at = if norm2(&y_new) > opts.escape_radius {
                Some(escape_time(&dense, t, t_new, opts.escape_radius, &mut buf))
            } else {
                None
            };
            let limit = escaped_at.unwrap_or(t_new);

            while next_out < times.len() && dir * (times[next_out] - limit) <= 0.0 {
                let to = times[next_out];
                if escaped_at.is_some() && to == limit {
                    break;
                }
                if to == t_new {
                    traj.data.extend_from_slice(&y_new);
                } else {
                    dense.eval(to, &mut buf);
                    traj.data.extend_from_slice(&buf);
                }
                traj.times.push(to);
                next_out += 1;
            }

            if let Some(te) = escaped_at {
                traj.outcome = Outcome::Escaped { time: te };
                return Ok(traj);
            }

            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            t = t_new;
            if last {
                break;
            }
            if h_new.abs() > h_max {
                h_new = dir * h_max;
            }
            if reject_streak {
                h_new = dir * h_new.abs().min(h.abs());
            }
            reject_streak = false;
            h = h_new;
        } else {
            traj.stats.rejected += 1;
            h_new = h / (1.0 / FAC_MIN).min(fac11 / SAFETY);
            reject_streak = true;
            h = h_new;
        }
    }

    // flush any grid points equal to t_end that were not yet written
    while next_out < times.len() {
        traj.times.push(times[next_out]);
        traj.data.extend_from_slice(&y);
        next_out += 1;
    }
    Ok(traj)
}

fn validate(times: &[f64], initial: &[f64], opts: &OdeOptions) -> Result<(), OdeError> {
    if times.len() < 2 {
        return Err(OdeError::InvalidArgument("output grid needs at least two points".into()));
    }
    if !(opts.rel_tol > 0.0 && opts.abs_tol > 0.0) {
        return Err(OdeError::InvalidArgument("tolerances must be positive".into()));
    }
    if initial.is_empty() || !initial.iter().all(|v| v.is_finite()) {
        return Err(OdeError::InvalidArgument("initial state must be finite and non-empty".into()));
    }
    let dir = (times[1] - times[0]).signum();
    if dir == 0.0 || times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
        return Err(OdeError::InvalidArgument("output grid must be strictly monotone".into()));
    }
    if !times.iter().all(|t| t.is_finite()) {
        return Err(OdeError::InvalidArgument("output grid must be finite".into()));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F>(
    rhs: &mut F,
    t: f64,
    y: &[f64],
    f0: &[f64],
    dir: f64,
    h_max: f64,
    opts: &OdeOptions,
    stats: &mut StepStats,
) -> f64
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let sk: Vec<f64> = y.iter().map(|v| opts.abs_tol + opts.rel_tol * v.abs()).collect();
    let dnf: f64 = f0.iter().zip(&sk).map(|(f, s)| (f / s).powi(2)).sum();
    let dny: f64 = y.iter().zip(&sk).map(|(v, s)| (v / s).powi(2)).sum();
    let mut h = if dnf <= 1e-10 || dny <= 1e-10 {
        1e-6
    } else {
        (dny / dnf).sqrt() * 0.01
    };
    h = h.min(h_max);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, f)| v + dir * h * f).collect();
    let mut f1 = vec![0.0; n];
    rhs(t + dir * h, &y1, &mut f1);
    stats.evaluations += 1;
    let der2 = f1
        .iter()
        .zip(f0)
        .zip(&sk)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt()
        / h;
    let der12 = der2.abs().max(dnf.sqrt());
    let h1 = if der12 <= 1e-15 {
        (h * 1e-3).max(1e-6)
    } else {
        (0.01 / der12).powf(0.2)
    };
    let h = (100.0 * h).min(h1).min(h_max);
    if h.is_finite() && h > 0.0 {
        dir * h
    } else {
        dir * 1e-6_f64.min(h_max)
    }
}

/// Time inside the accepted step where `‖y‖` first reaches `radius`.
fn escape_time(dense: &Dense, t: f64, t_new: f64, radius: f64, buf: &mut [f64]) -> f64 {
    let mut lo = t;
    let mut hi = t_new;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        dense.eval(mid, buf);
        if norm2(buf) > radius {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
    }

    #[test]
    fn exponential_decay() {
        let opts = OdeOptions::new(1e-10, 1e-12);
        let traj = integrate(decay, 0.0, 1.0, &[1.0], &opts, 0.1).unwrap();
        assert_eq!(traj.len(), 11);
        assert_relative_eq!(traj.last_state().unwrap()[0], (-1.0f64).exp(), epsilon = 1e-6);
        for (t, s) in traj.times().iter().zip(traj.states()) {
            assert!((s[0] - (-t).exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let traj = integrate(
            |_t, _y, dy: &mut [f64]| dy.fill(0.0),
            0.0,
            5.0,
            &[3.0, -2.0],
            &OdeOptions::default(),
            0.5,
        )
        .unwrap();
        assert!(traj.states().all(|s| s == [3.0, -2.0]));
    }

    #[test]
    fn harmonic_energy_drift() {
        let opts = OdeOptions::new(1e-8, 1e-12);
        let traj = integrate(
            |_t, y, dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -4.0 * y[0];
            },
            0.0,
            20.0,
            &[1.0, 0.0],
            &opts,
            0.01,
        )
        .unwrap();
        let e0 = 2.0;
        for s in traj.states() {
            let e = 2.0 * s[0] * s[0] + 0.5 * s[1] * s[1];
            assert!((e - e0).abs() < 1e-4);
        }
    }

    #[test]
    fn error_shrinks_with_tolerance() {
        let errs: Vec<f64> = [1e-4, 1e-6, 1e-8, 1e-10]
            .iter()
            .map(|&tol| {
                let traj = integrate(decay, 0.0, 1.0, &[1.0], &OdeOptions::new(tol, tol), 1.0).unwrap();
                (traj.last_state().unwrap()[0] - (-1.0f64).exp()).abs()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn reverse_round_trip() {
        let opts = OdeOptions::new(1e-10, 1e-12);
        let f = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -(4.0 + 0.5 * t.sin()) * y[0] - 0.2 * y[1];
        };
        let fwd = integrate(f, 0.0, 10.0, &[1.0, 0.5], &opts, 0.5).unwrap();
        let back = integrate(f, 10.0, 0.0, fwd.last_state().unwrap(), &opts, 0.5).unwrap();
        assert!(back.times().windows(2).all(|w| w[1] < w[0]));
        let end = back.last_state().unwrap();
        let tol = 10.0 * (opts.abs_tol + opts.rel_tol * norm2(&[1.0, 0.5]));
        assert!((end[0] - 1.0).abs() < tol * 10.0 && (end[1] - 0.5).abs() < tol * 10.0, "{end:?}");
    }

    #[test]
    fn blow_up_reported_as_escape() {
        // ẋ = x², x(0) = 1 blows up at t = 1
        let opts = OdeOptions::new(1e-10, 1e-12);
        let traj = integrate(|_t, y, dy: &mut [f64]| dy[0] = y[0] * y[0], 0.0, 2.0, &[1.0], &opts, 0.01).unwrap();
        match traj.outcome {
            Outcome::Escaped { time } => assert!((time - 1.0).abs() < 1e-5, "{time}"),
            other => panic!("expected escape, got {other:?}"),
        }
        assert!(traj.times().last().unwrap() < &1.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let opts = OdeOptions::default();
        assert!(integrate(decay, 0.0, 0.0, &[1.0], &opts, 0.1).is_err());
        assert!(integrate(decay, 0.0, 1.0, &[1.0], &opts, 0.0).is_err());
        assert!(integrate(decay, 0.0, 1.0, &[f64::NAN], &opts, 0.1).is_err());
        assert!(integrate(decay, 0.0, 1.0, &[1.0], &OdeOptions::new(0.0, 1e-9), 0.1).is_err());
    }

    #[test]
    fn uniform_grid_includes_endpoint() {
        let g = uniform_grid(0.0, 1.05, 0.1);
        assert_eq!(g.len(), 12);
        assert_eq!(*g.last().unwrap(), 1.05);
        let r = uniform_grid(1.0, 0.0, 0.25);
        assert_eq!(r, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }
}
