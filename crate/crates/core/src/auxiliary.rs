//! Scalar comparison equations bounding `‖x(t, x₀)‖` from above, and the
//! stability/boundedness criteria read off their coefficients.
//!
//! With `X₀ = ‖W⁻¹(t₀)x₀‖` the nonlinear auxiliary equation is
//!
//! ```text
//! Ẋ = p(t)X + k(t)(L(t, X) + ‖F(t)‖),   X(t₀) = X₀
//! ```
//!
//! and replacing `L(t, X)` by `l(t)X` inside a ball gives the linear one.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{LinearLipschitz, LipschitzEnvelope, SystemSpec};
use crate::ode::{self, OdeError, OdeOptions, Outcome};
use crate::series::{self, LinearInterp};
use crate::transition::{Exponents, FundamentalPath};

#[derive(Debug, Error)]
pub enum AuxError {
    #[error("coefficient series have mismatched lengths ({0})")]
    Misaligned(&'static str),
    #[error("invalid coefficient: {0}")]
    InvalidCoefficient(String),
    #[error("linear auxiliary equation needs a classical Lipschitz profile")]
    MissingLipschitz,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Integration(#[from] OdeError),
}

/// Classical Lipschitz data sampled on the coefficient grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearTerm {
    pub radius: Option<f64>,
    pub l_hat: f64,
    pub l: Vec<f64>,
}

/// `p`, `k`, `‖F‖` on a shared grid plus the Lipschitz envelope.
#[derive(Debug, Clone)]
pub struct AuxCoefficients {
    pub grid: Vec<f64>,
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    pub envelope: LipschitzEnvelope,
    pub forcing_norm: Vec<f64>,
    /// `F̂ ≥ sup ‖F‖`.
    pub forcing_hat: f64,
    pub linear: Option<LinearTerm>,
}

impl AuxCoefficients {
    pub fn new(
        grid: Vec<f64>,
        p: Vec<f64>,
        k: Vec<f64>,
        envelope: LipschitzEnvelope,
        forcing_norm: Vec<f64>,
    ) -> Result<Self, AuxError> {
        if grid.len() < 2 {
            return Err(AuxError::Misaligned("grid needs at least two points"));
        }
        if p.len() != grid.len() || k.len() != grid.len() || forcing_norm.len() != grid.len() {
            return Err(AuxError::Misaligned("p, k and forcing must match the grid"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(AuxError::InvalidCoefficient("grid must be increasing".into()));
        }
        if let Some(bad) = k.iter().find(|v| !(**v >= 1.0 - 1e-9)) {
            return Err(AuxError::InvalidCoefficient(format!("k must be >= 1, got {bad}")));
        }
        if let Some(bad) = forcing_norm.iter().find(|v| !(**v >= 0.0)) {
            return Err(AuxError::InvalidCoefficient(format!("forcing norm must be >= 0, got {bad}")));
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(AuxError::InvalidCoefficient("p must be finite".into()));
        }
        let forcing_hat = series::max_of(&forcing_norm).max(0.0);
        Ok(Self {
            grid,
            p,
            k,
            envelope,
            forcing_norm,
            forcing_hat,
            linear: None,
        })
    }

    /// Constant coefficients on a uniform grid over `[t0, t0 + horizon]`.
    pub fn constant(
        t0: f64,
        horizon: f64,
        step: f64,
        p: f64,
        k: f64,
        envelope: LipschitzEnvelope,
        forcing_norm: f64,
    ) -> Result<Self, AuxError> {
        let grid = ode::uniform_grid(t0, t0 + horizon, step);
        let n = grid.len();
        Self::new(grid, vec![p; n], vec![k; n], envelope, vec![forcing_norm; n])
    }

    /// Coefficients of a concrete system along its fundamental path.
    pub fn from_path(path: &FundamentalPath, spec: &SystemSpec) -> Result<Self, AuxError> {
        let forcing_norm = path.grid.iter().map(|&t| spec.forcing.norm_at(t)).collect();
        let mut c = Self::new(
            path.grid.clone(),
            path.p.clone(),
            path.k.clone(),
            crate::model::derive_envelope(&spec.f),
            forcing_norm,
        )?;
        c.forcing_hat = c.forcing_hat.max(spec.forcing.amplitude_hat());
        Ok(c)
    }

    pub fn with_lipschitz(mut self, lin: &LinearLipschitz) -> Self {
        let l = self.grid.iter().map(|&t| lin.profile(t)).collect();
        self.linear = Some(LinearTerm {
            radius: Some(lin.radius),
            l_hat: lin.l_hat,
            l,
        });
        self
    }

    /// Attaches an explicit `l(t)` series.
    pub fn with_lipschitz_series(mut self, l: Vec<f64>) -> Result<Self, AuxError> {
        if l.len() != self.grid.len() {
            return Err(AuxError::Misaligned("l must match the grid"));
        }
        let l_hat = series::max_of(&l);
        self.linear = Some(LinearTerm { radius: None, l_hat, l });
        Ok(self)
    }

    pub fn t0(&self) -> f64 {
        self.grid[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Right-hand side of the nonlinear auxiliary equation at `(t, X)`.
    pub fn nonlinear_rhs(&self, t: f64, x: f64) -> f64 {
        let p = LinearInterp::new(&self.grid, &self.p).eval(t);
        let k = LinearInterp::new(&self.grid, &self.k).eval(t);
        let f = LinearInterp::new(&self.grid, &self.forcing_norm).eval(t);
        p * x + k * (self.envelope.eval(t, x.max(0.0)) + f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundKind {
    LinearAux,
    NonlinearAux,
    Bernoulli,
    AutonomousSup,
    Averaged,
}

/// One solution `X(t, X₀)` of an auxiliary equation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub x0: f64,
    pub kind: BoundKind,
    /// Set when the curve escaped to infinity; the grid ends before this time.
    pub blow_up_time: Option<f64>,
}

impl BoundCurve {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn sup(&self) -> f64 {
        series::max_of(&self.values)
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub escape_radius: f64,
}

impl Default for AuxOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-16,
            escape_radius: 1e6,
        }
    }
}

/// Linear auxiliary solve `X = X_h + X_nh` with `Φ = ∫(p + k·l)`:
/// `X_h = X₀ e^{Φ(t)}`, `X_nh = ∫ e^{Φ(t)−Φ(τ)} k(τ)‖F(τ)‖ dτ`.
///
/// Accumulated stepwise as `X_{i+1} = e^{ΔΦ}X_i + (h/2)(e^{ΔΦ}g_i + g_{i+1})`,
/// which is the trapezoid rule for the variation-of-constants integral and
/// never forms `e^{−Φ}` on its own.
pub fn solve_linear_aux(coeffs: &AuxCoefficients, x0: f64) -> Result<BoundCurve, AuxError> {
    let lin = coeffs.linear.as_ref().ok_or(AuxError::MissingLipschitz)?;
    check_level(x0)?;
    let n = coeffs.grid.len();
    let rate: Vec<f64> = (0..n).map(|i| coeffs.p[i] + coeffs.k[i] * lin.l[i]).collect();
    let drive: Vec<f64> = (0..n).map(|i| coeffs.k[i] * coeffs.forcing_norm[i]).collect();
    let mut values = Vec::with_capacity(n);
    values.push(x0);
    let mut x = x0;
    let mut blow_up_time = None;
    for i in 0..n - 1 {
        let h = coeffs.grid[i + 1] - coeffs.grid[i];
        let growth = (0.5 * h * (rate[i] + rate[i + 1])).exp();
        let next = growth * x + 0.5 * h * (growth * drive[i] + drive[i + 1]);
        if !next.is_finite() {
            blow_up_time = Some(coeffs.grid[i + 1]);
            break;
        }
        x = next;
        values.push(x);
    }
    Ok(BoundCurve {
        grid: coeffs.grid[..values.len()].to_vec(),
        values,
        x0,
        kind: BoundKind::LinearAux,
        blow_up_time,
    })
}

/// Integrates `Ẋ = p(t)X + k(t)(L(t,X) + ‖F(t)‖)`; `p`, `k`, `‖F‖` are linearly
/// interpolated between grid points and `L` is evaluated exactly.
pub fn solve_nonlinear_aux(coeffs: &AuxCoefficients, x0: f64, opts: &AuxOptions) -> Result<BoundCurve, AuxError> {
    check_level(x0)?;
    let p = LinearInterp::new(&coeffs.grid, &coeffs.p);
    let k = LinearInterp::new(&coeffs.grid, &coeffs.k);
    let f = LinearInterp::new(&coeffs.grid, &coeffs.forcing_norm);
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let x = y[0].max(0.0);
        dy[0] = p.eval(t) * y[0] + k.eval(t) * (coeffs.envelope.eval(t, x) + f.eval(t));
    };
    let ode_opts = OdeOptions::new(opts.rel_tol, opts.abs_tol).with_escape_radius(opts.escape_radius);
    let traj = ode::integrate_on(rhs, &coeffs.grid, &[x0], &ode_opts)?;
    let blow_up_time = match traj.outcome {
        Outcome::Escaped { time } => Some(time),
        Outcome::Completed => None,
    };
    Ok(BoundCurve {
        grid: traj.times().to_vec(),
        values: traj.states().map(|s| s[0].max(0.0)).collect(),
        x0,
        kind: BoundKind::NonlinearAux,
        blow_up_time,
    })
}

/// Nonlinear auxiliary curves for several initial levels, solved concurrently.
pub fn solve_nonlinear_family(
    coeffs: &AuxCoefficients,
    levels: &[f64],
    opts: &AuxOptions,
) -> Result<Vec<BoundCurve>, AuxError> {
    levels
        .par_iter()
        .map(|&x0| solve_nonlinear_aux(coeffs, x0, opts))
        .collect()
}

fn check_level(x0: f64) -> Result<(), AuxError> {
    if !(x0 >= 0.0) || !x0.is_finite() {
        return Err(AuxError::InvalidArgument(format!("X0 must be finite and >= 0, got {x0}")));
    }
    Ok(())
}

/// A Bernoulli coefficient: constant or sampled on the solve grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant(f64),
    Series(Vec<f64>),
}

impl Profile {
    fn at(&self, i: usize) -> f64 {
        match self {
            Profile::Constant(c) => *c,
            Profile::Series(s) => s[i],
        }
    }

    fn as_constant(&self) -> Option<f64> {
        match self {
            Profile::Constant(c) => Some(*c),
            Profile::Series(_) => None,
        }
    }

    fn check_len(&self, n: usize) -> Result<(), AuxError> {
        match self {
            Profile::Series(s) if s.len() != n => Err(AuxError::Misaligned("Bernoulli coefficient series")),
            _ => Ok(()),
        }
    }
}

/// Closed-form solution of `Ẋ = p(t)X + k(t)c(t)X^α` through `u = X^{1−α}`:
///
/// ```text
/// u(t) = e^{(1−α)P(t)} [u₀ + (1−α) ∫ e^{−(1−α)P(s)} k(s)c(s) ds],   P = ∫p
/// ```
///
/// Constant coefficients are integrated exactly; series use the trapezoid rule.
/// For `α > 1`, `u` reaching zero is a blow-up of `X`.
pub fn solve_bernoulli(
    grid: &[f64],
    p: &Profile,
    k: &Profile,
    c: &Profile,
    alpha: f64,
    x0: f64,
) -> Result<BoundCurve, AuxError> {
    if !(alpha > 0.0) || alpha == 1.0 || !alpha.is_finite() {
        return Err(AuxError::InvalidArgument(format!(
            "Bernoulli exponent must be positive and != 1, got {alpha}"
        )));
    }
    check_level(x0)?;
    let n = grid.len();
    if n < 1 {
        return Err(AuxError::Misaligned("empty grid"));
    }
    for prof in [p, k, c] {
        prof.check_len(n)?;
    }
    let curve = |values: Vec<f64>, blow_up_time| BoundCurve {
        grid: grid[..values.len()].to_vec(),
        values,
        x0,
        kind: BoundKind::Bernoulli,
        blow_up_time,
    };
    if x0 == 0.0 {
        return Ok(curve(vec![0.0; n], None));
    }

    let one_minus = 1.0 - alpha;
    let u0 = x0.powf(one_minus);
    let t0 = grid[0];

    // u on the grid
    let u: Vec<f64> = match (p.as_constant(), k.as_constant(), c.as_constant()) {
        (Some(pc), Some(kc), Some(cc)) => {
            let beta = one_minus * pc;
            let gamma = one_minus * kc * cc;
            grid.iter()
                .map(|&t| {
                    let s = t - t0;
                    if beta == 0.0 {
                        u0 + gamma * s
                    } else {
                        (beta * s).exp() * u0 + gamma * (beta * s).exp_m1() / beta
                    }
                })
                .collect()
        }
        _ => {
            let pv: Vec<f64> = (0..n).map(|i| p.at(i)).collect();
            let drive: Vec<f64> = (0..n).map(|i| k.at(i) * c.at(i)).collect();
            let big_p = series::cumulative_trapezoid(grid, &pv);
            let mut u = Vec::with_capacity(n);
            u.push(u0);
            let mut acc = u0;
            for i in 0..n - 1 {
                let h = grid[i + 1] - grid[i];
                let growth = (one_minus * (big_p[i + 1] - big_p[i])).exp();
                acc = growth * acc + one_minus * 0.5 * h * (growth * drive[i] + drive[i + 1]);
                u.push(acc);
            }
            u
        }
    };

    let mut values = Vec::with_capacity(n);
    let mut blow_up_time = None;
    for i in 0..n {
        if u[i] > 0.0 {
            values.push(u[i].powf(1.0 / one_minus));
            continue;
        }
        if alpha > 1.0 {
            blow_up_time = Some(match (p.as_constant(), k.as_constant(), c.as_constant()) {
                (Some(pc), Some(kc), Some(cc)) => {
                    constant_blow_up(u0, one_minus * pc, one_minus * kc * cc) + t0
                }
                _ if i > 0 => {
                    let w = u[i - 1] / (u[i - 1] - u[i]);
                    grid[i - 1] + w * (grid[i] - grid[i - 1])
                }
                _ => t0,
            });
            break;
        }
        // α < 1: X reaches zero and stays there
        values.push(0.0);
    }
    Ok(curve(values, blow_up_time))
}

fn constant_blow_up(u0: f64, beta: f64, gamma: f64) -> f64 {
    if beta == 0.0 {
        -u0 / gamma
    } else {
        let ratio = gamma / beta;
        ((ratio) / (u0 + ratio)).ln() / beta
    }
}

/// Three-valued outcome of one criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Fails,
    Inconclusive,
}

impl Verdict {
    fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Holds
        } else {
            Verdict::Fails
        }
    }
}

/// `p + k·l ≤ 0` on `t ≥ t*`, with equality only on a negligible set.
#[derive(Debug, Clone, Serialize)]
pub struct PointwiseDecay {
    pub verdict: Verdict,
    pub max_rate: f64,
    pub zero_fraction: f64,
}

/// `ν = −sup_{t ≥ t*}(p + k·l) > 0`, ultimate bound `F̂k̂/ν`.
#[derive(Debug, Clone, Serialize)]
pub struct UniformDecay {
    pub verdict: Verdict,
    pub nu: f64,
    pub k_hat: f64,
    pub ultimate_bound: Option<f64>,
}

/// `χ = μ_max + χ* < 0`, `χ*` the limsup growth rate of `∫k·l`.
#[derive(Debug, Clone, Serialize)]
pub struct ExponentCriterion {
    pub verdict: Verdict,
    pub chi: f64,
    pub mu_max: f64,
    pub chi_star: f64,
}

/// Fitted `θ(t,τ) ≤ D̂ e^{−ρ(t−τ)}` and the ultimate bound `D̂F̂k̂/ρ`.
/// `D̂` is a numerical fit on sampled pairs, not a proven constant.
#[derive(Debug, Clone, Serialize)]
pub struct FittedDecay {
    pub verdict: Verdict,
    pub rho: f64,
    pub epsilon: f64,
    pub d_hat: Option<f64>,
    pub ultimate_bound: Option<f64>,
    pub surrogate: bool,
}

/// `N·l̂ − λ < 0`.
#[derive(Debug, Clone, Serialize)]
pub struct ClassicalExponential {
    pub verdict: Verdict,
    #[serde(rename = "N")]
    pub n_const: f64,
    pub l_hat: f64,
    pub lambda: f64,
    pub value: f64,
}

/// `limsup p̄ + N·l̂ < 0`.
#[derive(Debug, Clone, Serialize)]
pub struct ClassicalAverage {
    pub verdict: Verdict,
    pub avg_p_limsup: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriteriaReport {
    pub t_star: f64,
    pub cor1: PointwiseDecay,
    pub cor2: UniformDecay,
    pub cor3: ExponentCriterion,
    pub cor4: FittedDecay,
    pub classical6: ClassicalExponential,
    pub classical8: ClassicalAverage,
    pub notes: Vec<String>,
}

pub const COR1_ZERO_TOL: f64 = 1e-10;
pub const COR1_ZERO_FRACTION: f64 = 0.01;
pub const COR4_EPSILON: f64 = 1e-3;
const COR4_SUBSAMPLES: usize = 64;

/// Evaluates every criterion from the coefficients and exponent estimates.
///
/// Criteria that need `l(t)` are inconclusive when no classical Lipschitz
/// profile is attached.
pub fn evaluate_criteria(coeffs: &AuxCoefficients, exponents: &Exponents, t_star: f64) -> CriteriaReport {
    let mut notes = Vec::new();
    let n = coeffs.grid.len();
    let Some(lin) = coeffs.linear.as_ref() else {
        notes.push("no classical Lipschitz profile; criteria are inconclusive".into());
        return inconclusive_report(t_star, exponents, notes);
    };

    let start = coeffs.grid.iter().position(|&t| t >= t_star).unwrap_or(n - 1);
    let rate: Vec<f64> = (0..n).map(|i| coeffs.p[i] + coeffs.k[i] * lin.l[i]).collect();
    let tail = &rate[start..];

    let max_rate = series::max_of(tail);
    let zeros = tail.iter().filter(|r| r.abs() <= COR1_ZERO_TOL).count();
    let zero_fraction = zeros as f64 / tail.len() as f64;
    let cor1 = PointwiseDecay {
        verdict: Verdict::from_bool(max_rate <= COR1_ZERO_TOL && zero_fraction <= COR1_ZERO_FRACTION),
        max_rate,
        zero_fraction,
    };

    let nu = -max_rate;
    let k_hat = series::max_of(&coeffs.k);
    let cor2 = UniformDecay {
        verdict: Verdict::from_bool(nu > 0.0),
        nu,
        k_hat,
        ultimate_bound: (nu > 0.0).then(|| coeffs.forcing_hat * k_hat / nu),
    };

    let kl: Vec<f64> = (0..n).map(|i| coeffs.k[i] * lin.l[i]).collect();
    let chi_star = tail_limsup(&coeffs.grid, &series::running_average(&coeffs.grid, &kl));
    let chi = exponents.mu_max + chi_star;
    let cor3 = ExponentCriterion {
        verdict: Verdict::from_bool(chi < 0.0),
        chi,
        mu_max: exponents.mu_max,
        chi_star,
    };

    let rho = -chi - COR4_EPSILON;
    let cor4 = if rho > 0.0 {
        let phi = series::cumulative_trapezoid(&coeffs.grid, &rate);
        let d_hat = fit_decay_constant(&coeffs.grid, &phi, rho);
        FittedDecay {
            verdict: Verdict::Holds,
            rho,
            epsilon: COR4_EPSILON,
            d_hat: Some(d_hat),
            ultimate_bound: Some(d_hat * coeffs.forcing_hat * k_hat / rho),
            surrogate: true,
        }
    } else {
        FittedDecay {
            verdict: Verdict::Fails,
            rho,
            epsilon: COR4_EPSILON,
            d_hat: None,
            ultimate_bound: None,
            surrogate: true,
        }
    };
    notes.push("cor4 D_hat is a numerical fit on 64x64 sampled (t, tau) pairs".into());
    notes.push("chi_star and classical8 limsups are max window averages over the last half of the horizon".into());

    let value6 = exponents.n_const * lin.l_hat - exponents.lambda;
    let classical6 = ClassicalExponential {
        verdict: Verdict::from_bool(value6 < 0.0),
        n_const: exponents.n_const,
        l_hat: lin.l_hat,
        lambda: exponents.lambda,
        value: value6,
    };
    let avg_p_limsup = tail_limsup(&coeffs.grid, &series::running_average(&coeffs.grid, &coeffs.p));
    let value8 = avg_p_limsup + exponents.n_const * lin.l_hat;
    let classical8 = ClassicalAverage {
        verdict: Verdict::from_bool(value8 < 0.0),
        avg_p_limsup,
        value: value8,
    };

    CriteriaReport {
        t_star,
        cor1,
        cor2,
        cor3,
        cor4,
        classical6,
        classical8,
        notes,
    }
}

fn inconclusive_report(t_star: f64, e: &Exponents, notes: Vec<String>) -> CriteriaReport {
    CriteriaReport {
        t_star,
        cor1: PointwiseDecay {
            verdict: Verdict::Inconclusive,
            max_rate: f64::NAN,
            zero_fraction: f64::NAN,
        },
        cor2: UniformDecay {
            verdict: Verdict::Inconclusive,
            nu: f64::NAN,
            k_hat: f64::NAN,
            ultimate_bound: None,
        },
        cor3: ExponentCriterion {
            verdict: Verdict::Inconclusive,
            chi: f64::NAN,
            mu_max: e.mu_max,
            chi_star: f64::NAN,
        },
        cor4: FittedDecay {
            verdict: Verdict::Inconclusive,
            rho: f64::NAN,
            epsilon: COR4_EPSILON,
            d_hat: None,
            ultimate_bound: None,
            surrogate: true,
        },
        classical6: ClassicalExponential {
            verdict: Verdict::Inconclusive,
            n_const: e.n_const,
            l_hat: f64::NAN,
            lambda: e.lambda,
            value: f64::NAN,
        },
        classical8: ClassicalAverage {
            verdict: Verdict::Inconclusive,
            avg_p_limsup: f64::NAN,
            value: f64::NAN,
        },
        notes,
    }
}

/// Finite-horizon limsup: max of the window means of `values` over four
/// windows of length `H/8` covering the last half of the horizon.
pub fn tail_limsup(grid: &[f64], values: &[f64]) -> f64 {
    let t0 = grid[0];
    let h = grid.last().unwrap() - t0;
    (0..4)
        .filter_map(|j| {
            let a = t0 + 0.5 * h + j as f64 * h / 8.0;
            series::window_mean(grid, values, a, a + h / 8.0)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn fit_decay_constant(grid: &[f64], phi: &[f64], rho: f64) -> f64 {
    let n = grid.len();
    let m = COR4_SUBSAMPLES.min(n);
    let idx: Vec<usize> = (0..m)
        .map(|j| ((j as f64) * (n - 1) as f64 / (m - 1).max(1) as f64).round() as usize)
        .collect();
    let mut best = 0.0_f64;
    for &ti in &idx {
        for &si in idx.iter().filter(|&&si| si <= ti) {
            let log_theta = phi[ti] - phi[si] + rho * (grid[ti] - grid[si]);
            best = best.max(log_theta);
        }
    }
    best.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat(p: f64, k: f64, env: LipschitzEnvelope, f: f64, horizon: f64) -> AuxCoefficients {
        AuxCoefficients::constant(0.0, horizon, 0.01, p, k, env, f).unwrap()
    }

    fn exps(mu: f64, n: f64, lambda: f64) -> Exponents {
        Exponents {
            mu_max: mu,
            n_const: n,
            lambda,
        }
    }

    #[test]
    fn linear_decay() {
        let c = flat(-1.0, 1.0, LipschitzEnvelope::default(), 0.0, 2.0);
        let l = vec![0.0; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let curve = solve_linear_aux(&c, 1.0).unwrap();
        let i = c.grid.iter().position(|t| (t - 1.0).abs() < 1e-12).unwrap();
        assert_relative_eq!(curve.values[i], (-1.0f64).exp(), epsilon = 1e-6);
        let zero = solve_linear_aux(&c, 0.0).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_forced_approaches_ultimate_bound() {
        let c = flat(-1.0, 1.0, LipschitzEnvelope::default(), 1.0, 30.0);
        let l = vec![0.0; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let curve = solve_linear_aux(&c, 0.0).unwrap();
        for (t, x) in curve.grid.iter().zip(&curve.values) {
            assert!((x - (1.0 - (-t).exp())).abs() < 1e-5);
        }
        assert!((curve.last() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn missing_lipschitz_is_an_error() {
        let c = flat(-1.0, 1.0, LipschitzEnvelope::default(), 0.0, 1.0);
        assert!(matches!(solve_linear_aux(&c, 1.0), Err(AuxError::MissingLipschitz)));
    }

    #[test]
    fn nonlinear_cubic_matches_closed_form() {
        let env = LipschitzEnvelope::from_constants(&[(3, 0.05)]);
        let c = flat(-0.1, 1.0, env, 0.0, 10.0);
        let curve = solve_nonlinear_aux(&c, 1.0, &AuxOptions::default()).unwrap();
        let i = c.grid.iter().position(|t| (t - 5.0).abs() < 1e-9).unwrap();
        // u = X⁻² = 0.5(e^{0.2t} + 1)
        let expected = (0.5 * ((1.0f64).exp() + 1.0)).powf(-0.5);
        assert_relative_eq!(curve.values[i], expected, epsilon = 1e-8);
        assert!((curve.values[i] - 0.73343).abs() < 1e-4);

        let blown = solve_nonlinear_aux(&c, 2.0, &AuxOptions::default()).unwrap();
        let tb = blown.blow_up_time.expect("blow-up");
        assert!((tb - 5.0 * 2f64.ln()).abs() < 1e-2, "{tb}");
        assert!(*blown.grid.last().unwrap() < tb);
    }

    #[test]
    fn nonlinear_without_envelope_is_linear() {
        let c = flat(-0.3, 1.5, LipschitzEnvelope::default(), 0.2, 10.0);
        let l = vec![0.0; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let nl = solve_nonlinear_aux(&c, 0.7, &AuxOptions::default()).unwrap();
        let li = solve_linear_aux(&c, 0.7).unwrap();
        for (a, b) in nl.values.iter().zip(&li.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bernoulli_closed_form() {
        let grid = ode::uniform_grid(0.0, 10.0, 0.01);
        let pc = Profile::Constant(-0.1);
        let one = Profile::Constant(1.0);
        let cc = Profile::Constant(0.05);
        let curve = solve_bernoulli(&grid, &pc, &one, &cc, 3.0, 1.0).unwrap();
        let i = grid.iter().position(|t| (t - 5.0).abs() < 1e-9).unwrap();
        assert!((curve.values[i] - 0.73343).abs() < 1e-4);
        let zero = solve_bernoulli(&grid, &pc, &one, &cc, 3.0, 0.0).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let blown = solve_bernoulli(&grid, &pc, &one, &cc, 3.0, 2.0).unwrap();
        assert_relative_eq!(blown.blow_up_time.unwrap(), 5.0 * 2f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            solve_bernoulli(&grid, &pc, &one, &cc, 1.0, 1.0),
            Err(AuxError::InvalidArgument(_))
        ));
    }

    #[test]
    fn bernoulli_series_path_matches_constant_path() {
        let grid = ode::uniform_grid(0.0, 3.0, 0.001);
        let n = grid.len();
        let a = solve_bernoulli(&grid, &Profile::Constant(-0.1), &Profile::Constant(1.0), &Profile::Constant(0.05), 3.0, 1.0).unwrap();
        let b = solve_bernoulli(
            &grid,
            &Profile::Series(vec![-0.1; n]),
            &Profile::Series(vec![1.0; n]),
            &Profile::Series(vec![0.05; n]),
            3.0,
            1.0,
        )
        .unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6 * x);
        }
    }

    #[test]
    fn cor2_holds_for_margin() {
        let c = flat(-0.15, 2.0, LipschitzEnvelope::default(), 0.0, 50.0);
        let l = vec![0.02; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let r = evaluate_criteria(&c, &exps(-0.15, 2.0, 0.15), 5.0);
        assert_relative_eq!(r.cor2.nu, 0.11, epsilon = 1e-12);
        assert_eq!(r.cor2.verdict, Verdict::Holds);
        assert_eq!(r.cor1.verdict, Verdict::Holds);
    }

    #[test]
    fn neutral_system_fails_everything() {
        let c = flat(0.0, 1.0, LipschitzEnvelope::default(), 0.0, 50.0);
        let l = vec![0.0; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let r = evaluate_criteria(&c, &exps(0.0, 1.0, 0.0), 5.0);
        assert_eq!(r.cor1.verdict, Verdict::Fails);
        assert_eq!(r.cor1.zero_fraction, 1.0);
        assert_eq!(r.cor2.verdict, Verdict::Fails);
        assert_eq!(r.cor3.verdict, Verdict::Fails);
        assert_eq!(r.cor4.verdict, Verdict::Fails);
        assert_eq!(r.classical6.verdict, Verdict::Fails);
        assert_eq!(r.classical8.verdict, Verdict::Fails);
    }

    #[test]
    fn classical_criterion_is_more_conservative() {
        let c = flat(-0.15, 1.0, LipschitzEnvelope::default(), 0.0, 50.0);
        let l = vec![0.1; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let r = evaluate_criteria(&c, &exps(-0.15, 2.0, 0.15), 5.0);
        assert_relative_eq!(r.classical6.value, 0.05, epsilon = 1e-12);
        assert_eq!(r.classical6.verdict, Verdict::Fails);
        assert_relative_eq!(r.cor2.nu, 0.05, epsilon = 1e-12);
        assert_eq!(r.cor2.verdict, Verdict::Holds);
    }

    #[test]
    fn criteria_without_lipschitz_are_inconclusive() {
        let c = flat(-0.15, 1.0, LipschitzEnvelope::default(), 0.0, 10.0);
        let r = evaluate_criteria(&c, &exps(-0.15, 1.0, 0.15), 1.0);
        assert_eq!(r.cor2.verdict, Verdict::Inconclusive);
        assert_eq!(r.classical6.verdict, Verdict::Inconclusive);
    }

    #[test]
    fn cor4_fit_on_constant_rate() {
        // θ(t,τ) = e^{−0.2(t−τ)}; with ρ = 0.2 − ε the fit stays close to 1
        let c = flat(-0.2, 1.0, LipschitzEnvelope::default(), 0.01, 50.0);
        let l = vec![0.0; c.grid.len()];
        let c = c.with_lipschitz_series(l).unwrap();
        let r = evaluate_criteria(&c, &exps(-0.2, 1.0, 0.2), 5.0);
        assert_eq!(r.cor4.verdict, Verdict::Holds);
        assert_relative_eq!(r.cor4.d_hat.unwrap(), 1.0, epsilon = 1e-9);
        assert!(r.cor4.ultimate_bound.unwrap() > 0.01 / 0.2);
    }
}
