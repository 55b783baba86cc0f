//! Autonomous reductions of the nonlinear auxiliary equation and the
//! ellipsoidal trapping/stability-region certificates read off their fixed points.
//!
//! Both reductions give `Ẋ = Q(X) = p̂X + k̂ Σ ĉ_d X^d + k̂F̂`. The sup reduction
//! bounds every coefficient from above, so its solutions dominate the
//! time-varying ones. The averaged reduction replaces coefficients by window
//! means and pays for it with an empirical margin `μ` per fixed point.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxiliary::{solve_nonlinear_aux, AuxCoefficients, AuxError, AuxOptions, BoundCurve, BoundKind};
use crate::ode::{self, OdeError, OdeOptions, Outcome};
use crate::series::{self, LinearInterp};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("window [{0}, {1}] is empty or outside the coefficient grid")]
    InvalidWindow(f64, f64),
    #[error("margin estimation failed at root {root}: {reason}")]
    MarginEstimationFailed { root: f64, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error(transparent)]
    Auxiliary(#[from] AuxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMode {
    #[default]
    Sup,
    #[serde(alias = "avg")]
    Averaged,
}

impl FromStr for ReductionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sup" => Ok(Self::Sup),
            "avg" | "average" | "averaged" => Ok(Self::Averaged),
            other => Err(format!("unknown reduction mode '{other}' (expected sup or avg)")),
        }
    }
}

impl fmt::Display for ReductionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sup => "sup",
            Self::Averaged => "avg",
        })
    }
}

/// Averaging diagnostic above which a warning is attached.
pub const AVERAGING_WARN: f64 = 0.1;

/// Constant coefficients of `Ẋ = Q(X)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutonomousReduction {
    pub p_hat: f64,
    pub k_hat: f64,
    pub f_hat: f64,
    /// `(d, ĉ_d)` pairs, ascending degree.
    pub envelope: Vec<(u32, f64)>,
    pub mode: ReductionMode,
    pub window: (f64, f64),
    /// Averaged mode: max relative difference between full- and trailing-half-window means.
    pub convergence_diagnostic: Option<f64>,
    pub warning: Option<String>,
}

impl AutonomousReduction {
    /// Reduction with the given constants; used for hand-built and test cases.
    pub fn from_constants(p_hat: f64, k_hat: f64, envelope: &[(u32, f64)], f_hat: f64) -> Self {
        Self {
            p_hat,
            k_hat,
            f_hat,
            envelope: envelope.to_vec(),
            mode: ReductionMode::Sup,
            window: (0.0, 0.0),
            convergence_diagnostic: None,
            warning: None,
        }
    }

    /// Coefficients of `Q` by ascending power, `a[j]` multiplying `X^j`.
    pub fn q_coefficients(&self) -> Vec<f64> {
        let top = self.envelope.iter().map(|(d, _)| *d as usize).max().unwrap_or(1).max(1);
        let mut a = vec![0.0; top + 1];
        a[0] = self.k_hat * self.f_hat;
        a[1] = self.p_hat;
        for &(d, c) in &self.envelope {
            a[d as usize] += self.k_hat * c;
        }
        a
    }

    pub fn q(&self, x: f64) -> f64 {
        horner(&self.q_coefficients(), x)
    }

    pub fn dq(&self, x: f64) -> f64 {
        horner(&derivative(&self.q_coefficients()), x)
    }

    /// `max(|p̂|, k̂)`, the scale for root residual and classification tolerances.
    pub fn scale(&self) -> f64 {
        self.p_hat.abs().max(self.k_hat)
    }
}

fn horner(a: &[f64], x: f64) -> f64 {
    a.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn derivative(a: &[f64]) -> Vec<f64> {
    a.iter().enumerate().skip(1).map(|(j, c)| j as f64 * c).collect()
}

fn window_range(coeffs: &AuxCoefficients, window: (f64, f64)) -> Result<(usize, usize), RegionError> {
    let (a, b) = window;
    let slack = 1e-9 * (coeffs.t_end() - coeffs.t0()).max(1.0);
    if !(b > a) || a < coeffs.t0() - slack || b > coeffs.t_end() + slack {
        return Err(RegionError::InvalidWindow(a, b));
    }
    series::window_indices(&coeffs.grid, a, b)
        .filter(|(lo, hi)| hi > lo)
        .ok_or(RegionError::InvalidWindow(a, b))
}

/// Sup reduction over `window`: grid maxima of `p`, `k`, exact harmonic bounds for `ĉ_d`, `F̂`.
pub fn reduce_sup(coeffs: &AuxCoefficients, window: (f64, f64)) -> Result<AutonomousReduction, RegionError> {
    let (lo, hi) = window_range(coeffs, window)?;
    Ok(AutonomousReduction {
        p_hat: series::max_of(&coeffs.p[lo..=hi]),
        k_hat: series::max_of(&coeffs.k[lo..=hi]),
        f_hat: coeffs.forcing_hat,
        envelope: coeffs.envelope.sup_coefficients(),
        mode: ReductionMode::Sup,
        window,
        convergence_diagnostic: None,
        warning: None,
    })
}

/// Averaged reduction: window means of `p`, `k`, `‖F‖` and each envelope profile.
pub fn reduce_average(coeffs: &AuxCoefficients, window: (f64, f64)) -> Result<AutonomousReduction, RegionError> {
    let (lo, hi) = window_range(coeffs, window)?;
    let grid = &coeffs.grid[lo..=hi];
    let (a, b) = (grid[0], grid[grid.len() - 1]);
    let mid = 0.5 * (a + b);
    let mut diagnostic = 0.0_f64;
    let mut mean = |values: &[f64]| -> f64 {
        let full = series::window_mean(grid, values, a, b).unwrap_or(values[0]);
        let half = series::window_mean(grid, values, mid, b).unwrap_or(full);
        let denom = full.abs().max(half.abs());
        if denom > 0.0 {
            diagnostic = diagnostic.max((full - half).abs() / denom);
        }
        full
    };
    let p_hat = mean(&coeffs.p[lo..=hi]);
    let k_hat = mean(&coeffs.k[lo..=hi]);
    let f_hat = mean(&coeffs.forcing_norm[lo..=hi]);
    let envelope: Vec<(u32, f64)> = coeffs
        .envelope
        .terms()
        .iter()
        .map(|term| {
            let profile: Vec<f64> = grid.iter().map(|&t| term.profile.eval(t)).collect();
            (term.degree, mean(&profile))
        })
        .collect();
    let warning = (diagnostic > AVERAGING_WARN).then(|| {
        format!("averaging unconverged: full and half-window means differ by {:.1}%", 100.0 * diagnostic)
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(AutonomousReduction {
        p_hat,
        k_hat,
        f_hat,
        envelope,
        mode: ReductionMode::Averaged,
        window,
        convergence_diagnostic: Some(diagnostic),
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stability {
    Stable,
    Unstable,
    SemiStable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPoint {
    pub value: f64,
    pub stability: Stability,
    pub residual: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointSet {
    /// Nonnegative roots of `Q`, ascending; includes `0` when `F̂ = 0`.
    pub roots: Vec<FixedPoint>,
    /// `Q` coefficients by ascending power.
    pub q_coefficients: Vec<f64>,
    /// `Q(X) > 0` for all `X ≥ 0`: every auxiliary solution grows without bound.
    pub unbounded: bool,
    /// `p̂ > 0`: solutions from any `X₀ > 0` grow monotonically.
    pub monotone_growth: bool,
}

impl FixedPointSet {
    pub fn positive_roots(&self) -> impl Iterator<Item = &FixedPoint> {
        self.roots.iter().filter(|r| r.value > 0.0)
    }
}

pub const ROOT_RESIDUAL_TOL: f64 = 1e-10;
pub const SEMISTABLE_TOL: f64 = 1e-8;
const ROOT_REL_TOL: f64 = 1e-12;
const INITIAL_SCAN: usize = 512;
const MAX_SCAN: usize = 1 << 22;

/// All nonnegative real roots of `Q`, classified by the sign of `Q′`.
pub fn find_fixed_points(red: &AutonomousReduction) -> FixedPointSet {
    let a = trim(red.q_coefficients());
    let da = derivative(&a);
    let scale = red.scale().max(f64::MIN_POSITIVE);
    let x_max = scan_ceiling(&a);

    let mut candidates: Vec<f64> = Vec::new();
    if a[0] == 0.0 {
        candidates.push(0.0);
    }
    if x_max > 0.0 {
        candidates.extend(stable_sign_changes(&a, x_max));
        // even-multiplicity roots show up as roots of Q′ with |Q| tiny
        if da.len() > 1 {
            for x in stable_sign_changes(&da, x_max) {
                if horner(&a, x).abs() <= ROOT_RESIDUAL_TOL * scale {
                    candidates.push(x);
                }
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    let mut roots: Vec<FixedPoint> = Vec::new();
    for x in candidates {
        if let Some(last) = roots.last() {
            if (x - last.value).abs() <= 1e-9 * x.max(1.0) {
                continue;
            }
        }
        let slope = horner(&da, x);
        let stability = if slope.abs() <= SEMISTABLE_TOL * scale {
            Stability::SemiStable
        } else if slope < 0.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        };
        roots.push(FixedPoint {
            value: x,
            stability,
            residual: horner(&a, x).abs(),
            slope,
        });
    }
    // with no positive root Q keeps one sign on (0, ∞)
    let unbounded = roots.iter().all(|r| r.value == 0.0) && horner(&a, 1.0) > 0.0;
    FixedPointSet {
        roots,
        unbounded,
        monotone_growth: red.p_hat > 0.0,
        q_coefficients: red.q_coefficients(),
    }
}

fn trim(mut a: Vec<f64>) -> Vec<f64> {
    while a.len() > 1 && *a.last().unwrap() == 0.0 {
        a.pop();
    }
    a
}

/// Upper bound on positive roots: the larger of ten times the largest balance
/// point `(|a_j|/a_top)^{1/(top−j)}` and the Cauchy bound.
fn scan_ceiling(a: &[f64]) -> f64 {
    let top = a.len() - 1;
    let lead = a[top];
    if top == 0 || lead == 0.0 {
        return 0.0;
    }
    let cauchy = 1.0 + a[..top].iter().map(|c| (c / lead).abs()).fold(0.0, f64::max);
    let balance = (0..top)
        .filter(|&j| a[j] != 0.0)
        .map(|j| (a[j] / lead).abs().powf(1.0 / (top - j) as f64))
        .fold(0.0, f64::max);
    (10.0 * balance).max(cauchy)
}

/// Roots bracketed by sign changes on `(0, x_max]`, with the scan refined until
/// the count is unchanged over two successive refinements.
fn stable_sign_changes(a: &[f64], x_max: f64) -> Vec<f64> {
    let mut n = INITIAL_SCAN;
    let mut history: Vec<usize> = Vec::new();
    loop {
        let roots = sign_changes(a, x_max, n);
        history.push(roots.len());
        let stable = history.len() >= 3 && history[history.len() - 3..].windows(2).all(|w| w[0] == w[1]);
        if stable || n >= MAX_SCAN {
            return roots;
        }
        n *= 2;
    }
}

fn sign_changes(a: &[f64], x_max: f64, n: usize) -> Vec<f64> {
    let mut roots = Vec::new();
    let h = x_max / n as f64;
    // start just off zero; a root at exactly zero is handled by the caller
    let mut x_prev = h * 1e-9;
    let mut q_prev = horner(a, x_prev);
    for i in 1..=n {
        let x = i as f64 * h;
        let q = horner(a, x);
        if q == 0.0 {
            roots.push(x);
        } else if q_prev != 0.0 && (q < 0.0) != (q_prev < 0.0) {
            roots.push(bisect(a, x_prev, x));
        }
        x_prev = x;
        q_prev = q;
    }
    roots
}

fn bisect(a: &[f64], mut lo: f64, mut hi: f64) -> f64 {
    let mut q_lo = horner(a, lo);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= ROOT_REL_TOL * mid.abs() || mid == lo || mid == hi {
            break;
        }
        let q_mid = horner(a, mid);
        if q_mid == 0.0 {
            return mid;
        }
        if (q_mid < 0.0) == (q_lo < 0.0) {
            lo = mid;
            q_lo = q_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solution of `Ẋ = Q(X)` on `grid` from `x0`.
pub fn solve_autonomous(
    red: &AutonomousReduction,
    grid: &[f64],
    x0: f64,
    opts: &AuxOptions,
) -> Result<BoundCurve, RegionError> {
    if !(x0 >= 0.0) || !x0.is_finite() {
        return Err(RegionError::InvalidArgument(format!("X0 must be finite and >= 0, got {x0}")));
    }
    let a = red.q_coefficients();
    let rhs = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = horner(&a, y[0].max(0.0));
    let ode_opts = OdeOptions::new(opts.rel_tol, opts.abs_tol).with_escape_radius(opts.escape_radius);
    let traj = ode::integrate_on(rhs, grid, &[x0], &ode_opts)?;
    let blow_up_time = match traj.outcome {
        Outcome::Escaped { time } => Some(time),
        Outcome::Completed => None,
    };
    Ok(BoundCurve {
        grid: traj.times().to_vec(),
        values: traj.states().map(|s| s[0].max(0.0)).collect(),
        x0,
        kind: match red.mode {
            ReductionMode::Sup => BoundKind::AutonomousSup,
            ReductionMode::Averaged => BoundKind::Averaged,
        },
        blow_up_time,
    })
}

/// Empirical margin `μ` between the fixed point `d` of the averaged equation
/// and the oscillatory auxiliary equation started at `d`.
///
/// The time-varying equation is integrated over `window`, forward from a
/// stable root and backward from an unstable one. `μ` is the largest
/// deviation `|X − d|` over the trailing half of the run.
pub fn estimate_mu(
    coeffs: &AuxCoefficients,
    d: f64,
    stability: Stability,
    window: (f64, f64),
    opts: &AuxOptions,
) -> Result<f64, RegionError> {
    if !(d > 0.0) {
        return Err(RegionError::InvalidArgument(format!("root must be positive, got {d}")));
    }
    let (lo, hi) = window_range(coeffs, window)?;
    let mut times: Vec<f64> = coeffs.grid[lo..=hi].to_vec();
    if stability == Stability::Unstable {
        times.reverse();
    }
    let p = LinearInterp::new(&coeffs.grid, &coeffs.p);
    let k = LinearInterp::new(&coeffs.grid, &coeffs.k);
    let f = LinearInterp::new(&coeffs.grid, &coeffs.forcing_norm);
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let x = y[0].max(0.0);
        dy[0] = p.eval(t) * y[0] + k.eval(t) * (coeffs.envelope.eval(t, x) + f.eval(t));
    };
    let ode_opts = OdeOptions::new(opts.rel_tol, opts.abs_tol).with_escape_radius(2.0 * d);
    let traj = ode::integrate_on(rhs, &times, &[d], &ode_opts)?;
    if let Outcome::Escaped { time } = traj.outcome {
        return Err(RegionError::MarginEstimationFailed {
            root: d,
            reason: format!("trajectory left [0, 2d] at t = {time}"),
        });
    }
    let values: Vec<f64> = traj.states().map(|s| s[0]).collect();
    if let Some(i) = values.iter().position(|x| *x < 0.0) {
        return Err(RegionError::MarginEstimationFailed {
            root: d,
            reason: format!("trajectory left [0, 2d] at t = {}", traj.times()[i]),
        });
    }
    let half = values.len() / 2;
    Ok(values[half..].iter().map(|x| (x - d).abs()).fold(0.0, f64::max))
}

/// `μ` for every positive root, estimated concurrently. Sup mode needs no margin.
pub fn estimate_margins(
    coeffs: &AuxCoefficients,
    red: &AutonomousReduction,
    fps: &FixedPointSet,
    opts: &AuxOptions,
) -> Vec<Result<f64, RegionError>> {
    let roots: Vec<FixedPoint> = fps.positive_roots().copied().collect();
    if red.mode == ReductionMode::Sup {
        return roots.iter().map(|_| Ok(0.0)).collect();
    }
    roots
        .par_iter()
        .map(|r| estimate_mu(coeffs, r.value, r.stability, red.window, opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    StabilityBasin,
    TrappingRegion,
    UltimateBound,
    Unbounded,
}

/// Certificate `‖W⁻¹(t₀)x₀‖ ≤ level`; a `None` level means the whole space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionEstimate {
    pub kind: RegionKind,
    pub level: Option<f64>,
    pub mu: f64,
    pub t0: f64,
    /// `W⁻¹(t₀)`, row-major.
    #[serde(rename = "Winv_t0")]
    pub winv_t0: Vec<f64>,
    pub validity_radius_checked: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl RegionEstimate {
    pub fn contains(&self, x0: &[f64]) -> bool {
        match self.level {
            None => self.kind != RegionKind::Unbounded,
            Some(level) => {
                let n = x0.len();
                let m = DMatrix::from_row_slice(n, n, &self.winv_t0);
                ellipsoid_membership(&m, x0, level)
            }
        }
    }
}

/// Region certificates from the fixed points of `Q`.
///
/// `mu` holds one margin per positive root (ascending); a root whose margin
/// could not be estimated gets no certificate, and callers fall back to sup mode. Levels above
/// `omega2_radius` are truncated to it.
pub fn classify_regions(
    fps: &FixedPointSet,
    red: &AutonomousReduction,
    winv_t0: &DMatrix<f64>,
    t0: f64,
    mu: &[Result<f64, RegionError>],
    omega2_radius: Option<f64>,
) -> Vec<RegionEstimate> {
    let winv: Vec<f64> = (0..winv_t0.nrows())
        .flat_map(|i| winv_t0.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    let make = |kind: RegionKind, level: Option<f64>, mu: f64, warning: Option<String>| {
        let (level, warning) = match (level, omega2_radius) {
            (Some(l), Some(r)) if l > r => (
                Some(r),
                Some(join_warning(warning, format!("level {l} exceeds envelope validity radius {r}; truncated"))),
            ),
            (None, Some(r)) if kind != RegionKind::Unbounded => (
                Some(r),
                Some(join_warning(warning, format!("global level truncated to envelope validity radius {r}"))),
            ),
            _ => (level, warning),
        };
        RegionEstimate {
            kind,
            level,
            mu,
            t0,
            winv_t0: winv.clone(),
            validity_radius_checked: omega2_radius.is_some(),
            warning,
        }
    };

    let positive: Vec<FixedPoint> = fps.positive_roots().copied().collect();
    if positive.is_empty() {
        if fps.unbounded {
            return vec![make(RegionKind::Unbounded, None, 0.0, None)];
        }
        // Q < 0 on (0, ∞): every solution decays
        return if red.f_hat == 0.0 {
            vec![make(RegionKind::StabilityBasin, None, 0.0, None)]
        } else {
            vec![make(RegionKind::TrappingRegion, None, 0.0, None)]
        };
    }

    let mut out = Vec::new();
    for (i, root) in positive.iter().enumerate() {
        let margin = match mu.get(i) {
            Some(Ok(m)) => *m,
            Some(Err(e)) => {
                log::warn!("root {}: {e}; no averaged-mode certificate", root.value);
                continue;
            }
            None => 0.0,
        };
        let lowered = root.value - margin;
        if lowered <= 0.0 {
            log::warn!("margin {margin} >= root {}; no usable level", root.value);
        } else {
            if i == 0 && red.f_hat == 0.0 && root.stability == Stability::Unstable {
                out.push(make(RegionKind::StabilityBasin, Some(lowered), margin, None));
            }
            out.push(make(RegionKind::TrappingRegion, Some(lowered), margin, None));
        }
        if root.stability == Stability::Stable {
            out.push(make(RegionKind::UltimateBound, Some(root.value + margin), margin, None));
        }
    }
    if positive.last().is_some_and(|r| r.stability == Stability::Stable) {
        out.push(make(RegionKind::TrappingRegion, None, 0.0, None));
    }
    out
}

fn join_warning(existing: Option<String>, new: String) -> String {
    match existing {
        Some(e) => format!("{e}; {new}"),
        None => new,
    }
}

/// `‖W⁻¹(t₀)x₀‖ ≤ level`; the boundary counts as inside.
pub fn ellipsoid_membership(winv_t0: &DMatrix<f64>, x0: &[f64], level: f64) -> bool {
    (winv_t0 * DVector::from_column_slice(x0)).norm() <= level * (1.0 + 4.0 * f64::EPSILON)
}

/// Largest `X₀` (bisection to `rel_tol`) whose nonlinear auxiliary curve stays
/// finite and ends below its start over the whole grid; `None` if even tiny
/// levels fail.
pub fn simulated_level(coeffs: &AuxCoefficients, upper: f64, rel_tol: f64, opts: &AuxOptions) -> Result<Option<f64>, RegionError> {
    if !(upper > 0.0) {
        return Err(RegionError::InvalidArgument(format!("upper level must be positive, got {upper}")));
    }
    let decays = |x0: f64| -> Result<bool, RegionError> {
        let c = solve_nonlinear_aux(coeffs, x0, opts)?;
        Ok(c.blow_up_time.is_none() && c.last() < x0)
    };
    let mut lo = upper * 1e-6;
    if !decays(lo)? {
        return Ok(None);
    }
    let mut hi = upper;
    if decays(hi)? {
        return Ok(Some(hi));
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if decays(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// Checks `sup_t X(t, X*) ≤ d` for eight levels `X* = d·j/8`, the finite
/// stand-in for the trapping condition "for all `X* ≤ d`".
pub fn trapping_condition_holds(coeffs: &AuxCoefficients, d: f64, opts: &AuxOptions) -> Result<bool, RegionError> {
    let levels: Vec<f64> = (1..=8).map(|j| d * j as f64 / 8.0).collect();
    let sups: Vec<Result<f64, AuxError>> = levels
        .par_iter()
        .map(|&x| {
            solve_nonlinear_aux(coeffs, x, opts).map(|c| if c.blow_up_time.is_some() { f64::INFINITY } else { c.sup() })
        })
        .collect();
    for s in sups {
        if s? > d * (1.0 + 1e-9) {
            return Ok(false);
        }
    }
    Ok(true)
}
