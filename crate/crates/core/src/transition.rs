//! Fundamental matrix of the linearized system `Ẇ = A(t)W`, its singular
//! structure, the log-norm derivative `p(t)`, the running condition number
//! `k(t)`, and exponent estimates derived from them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, SingularTriplet};
use crate::model::MatrixFunction;
use crate::ode::{self, OdeError, OdeOptions};
use crate::series;

pub use crate::linalg::singular_triplet;
pub use crate::series::running_average;

/// Relative singular-value gap below which `p` falls back to finite differences.
pub const GAP_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TransitionError {
    #[error("horizon must be positive, got {0}")]
    InvalidHorizon(f64),
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("spectral normalization unavailable: {0}")]
    Normalization(#[from] LinalgError),
    #[error("fundamental matrix near-singular at t = {time} (sigma_min/sigma_max = {ratio:e})")]
    NearSingular { time: f64, ratio: f64 },
    #[error("horizon too short for tail-window estimates ({0} grid points in tail)")]
    InsufficientHorizon(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// `W(t₀) = I`.
    Identity,
    /// `W(t₀)` is the real modal matrix of the frozen mean matrix, scaled to unit norm.
    #[default]
    #[serde(alias = "spectralw0")]
    Spectral,
}

impl std::str::FromStr for NormalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Self::Identity),
            "spectral" | "spectralw0" => Ok(Self::Spectral),
            other => Err(format!("unknown normalization '{other}' (expected identity|spectral)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub output_step: f64,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-16,
            output_step: 0.005,
        }
    }
}

/// Sampled `W(t)`, `W⁻¹(t)`, leading singular data and the `p`, `k` series.
#[derive(Debug, Clone)]
pub struct FundamentalPath {
    pub grid: Vec<f64>,
    pub w: Vec<DMatrix<f64>>,
    pub w_inv: Vec<DMatrix<f64>>,
    pub sigma_max: Vec<f64>,
    pub sigma_min: Vec<f64>,
    /// `(σ₁ − σ₂)/σ₁` at each point.
    pub sigma_gap: Vec<f64>,
    pub u1: Vec<Vec<f64>>,
    pub v1: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    /// `∫_{t₀}^{t} p`, integrated alongside `W` by the adaptive solver.
    pub phi: Vec<f64>,
    /// Grid points where the top singular value was (nearly) repeated.
    pub p_fallbacks: usize,
    pub normalization: NormalizationMode,
}

impl FundamentalPath {
    pub fn t0(&self) -> f64 {
        self.grid[0]
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn w_t0(&self) -> &DMatrix<f64> {
        &self.w[0]
    }

    pub fn w_inv_t0(&self) -> &DMatrix<f64> {
        &self.w_inv[0]
    }

    /// `X₀ = ‖W⁻¹(t₀)x₀‖`.
    pub fn initial_level(&self, x0: &[f64]) -> f64 {
        (self.w_inv_t0() * DVector::from_column_slice(x0)).norm()
    }
}

/// Integrates `Ẇ = A(t)W` over `[t0, t0 + horizon]` from the normalized initial value.
pub fn compute_fundamental(
    a: &MatrixFunction,
    t0: f64,
    horizon: f64,
    mode: NormalizationMode,
    opts: &TransitionOptions,
) -> Result<FundamentalPath, TransitionError> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(TransitionError::InvalidHorizon(horizon));
    }
    let n = a.dim();
    let w0 = initial_matrix(a, mode)?;

    let ode_opts = OdeOptions::new(opts.rel_tol, opts.abs_tol).with_escape_radius(f64::INFINITY);
    let nn = n * n;
    // state: W flattened column-major (nalgebra storage), then ∫p
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let at = a.eval(t);
        let w = DMatrix::from_column_slice(n, n, &y[..nn]);
        let aw = &at * &w;
        dy[..nn].copy_from_slice(aw.as_slice());
        dy[nn] = log_norm_rate(&w, &aw).0;
    };
    let mut y0 = w0.as_slice().to_vec();
    y0.push(0.0);
    let traj = ode::integrate(rhs, t0, t0 + horizon, &y0, &ode_opts, opts.output_step)?;

    let len = traj.len();
    let mut path = FundamentalPath {
        grid: traj.times().to_vec(),
        w: Vec::with_capacity(len),
        w_inv: Vec::with_capacity(len),
        sigma_max: Vec::with_capacity(len),
        sigma_min: Vec::with_capacity(len),
        sigma_gap: Vec::with_capacity(len),
        u1: Vec::with_capacity(len),
        v1: Vec::with_capacity(len),
        p: Vec::new(),
        k: Vec::new(),
        phi: Vec::with_capacity(len),
        p_fallbacks: 0,
        normalization: mode,
    };
    for (t, state) in traj.times().iter().zip(traj.states()) {
        let w = DMatrix::from_column_slice(n, n, &state[..nn]);
        path.phi.push(state[nn]);
        let sv: SingularTriplet = linalg::singular_triplet(&w);
        let ratio = sv.sigma_min() / sv.sigma_max();
        if !(ratio > 1e-12) {
            return Err(TransitionError::NearSingular { time: *t, ratio });
        }
        let w_inv = w
            .clone()
            .try_inverse()
            .ok_or(TransitionError::NearSingular { time: *t, ratio })?;
        path.sigma_max.push(sv.sigma_max());
        path.sigma_min.push(sv.sigma_min());
        path.sigma_gap.push(sv.relative_gap());
        path.u1.push(sv.u1);
        path.v1.push(sv.v1);
        path.w.push(w);
        path.w_inv.push(w_inv);
    }
    let pk = compute_pk(&path, a);
    path.p = pk.p;
    path.k = pk.k;
    path.p_fallbacks = pk.fallbacks;
    Ok(path)
}

/// `W(t₀)` for the chosen normalization; always of unit spectral norm.
pub fn initial_matrix(a: &MatrixFunction, mode: NormalizationMode) -> Result<DMatrix<f64>, TransitionError> {
    let n = a.dim();
    Ok(match mode {
        NormalizationMode::Identity => DMatrix::identity(n, n),
        NormalizationMode::Spectral => linalg::real_modal_matrix(&a.frozen_mean())?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PkSeries {
    pub p: Vec<f64>,
    pub k: Vec<f64>,
    pub fallbacks: usize,
}

/// `p = u₁ᵀ A W v₁ / σ_max` and `k = σ_max/σ_min`.
pub fn compute_pk(path: &FundamentalPath, a: &MatrixFunction) -> PkSeries {
    let mut fallbacks = 0;
    let p = path
        .grid
        .iter()
        .zip(&path.w)
        .map(|(&t, w)| {
            let aw = a.eval(t) * w;
            let (rate, repeated) = log_norm_rate(w, &aw);
            fallbacks += usize::from(repeated);
            rate
        })
        .collect();
    let k = path
        .sigma_max
        .iter()
        .zip(&path.sigma_min)
        .map(|(s1, sn)| s1 / sn)
        .collect();
    PkSeries { p, k, fallbacks }
}

/// Right derivative of `ln σ_max(W)` given `Ẇ = AW`; the flag is set when the
/// top singular value is repeated to within [`GAP_TOL`].
///
/// For a simple top singular value this is `u₁ᵀ(AW)v₁/σ_max`. Otherwise it is
/// `λ_max` of the symmetric part of `Uᵀ(AW)V` restricted to the leading
/// singular subspace, over `σ_max`.
pub fn log_norm_rate(w: &DMatrix<f64>, aw: &DMatrix<f64>) -> (f64, bool) {
    let sv = linalg::singular_triplet(w);
    let s_max = sv.sigma_max();
    if sv.relative_gap() >= GAP_TOL {
        let v1 = DVector::from_column_slice(&sv.v1);
        let u1 = DVector::from_column_slice(&sv.u1);
        return (u1.dot(&(aw * v1)) / s_max, false);
    }
    let svd = w.clone().svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return (0.0, true);
    };
    let lead: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&j| s_max - svd.singular_values[j] < GAP_TOL * s_max)
        .collect();
    let m = lead.len();
    let block = DMatrix::from_fn(m, m, |r, c| {
        let vc = v_t.row(lead[c]).transpose();
        u.column(lead[r]).dot(&(aw * vc))
    });
    let sym = (&block + block.transpose()) * 0.5;
    (sym.symmetric_eigenvalues().max() / s_max, true)
}

/// Max relative deviation between `exp(∫p)` and `‖W(t)‖/‖W(t₀)‖` over the grid.
pub fn verify_norm_identity(path: &FundamentalPath) -> f64 {
    verify_norm_identity_until(path, f64::INFINITY)
}

/// Same as [`verify_norm_identity`], restricted to `t ≤ t_max`.
pub fn verify_norm_identity_until(path: &FundamentalPath, t_max: f64) -> f64 {
    let s0 = path.sigma_max[0];
    path.grid
        .iter()
        .zip(&path.phi)
        .zip(&path.sigma_max)
        .take_while(|((t, _), _)| **t <= t_max)
        .map(|((_, ph), s)| {
            let ratio = s / s0;
            (ph.exp() - ratio).abs() / ratio
        })
        .fold(0.0, f64::max)
}

/// Largest Lyapunov exponent estimate and the constants `N`, `λ` of the
/// exponential-dichotomy bound `‖W(t)W⁻¹(t₀)‖ ≤ N e^{−λ(t−t₀)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Exponents {
    pub mu_max: f64,
    #[serde(rename = "N")]
    pub n_const: f64,
    pub lambda: f64,
}

/// Fraction of the horizon used as tail window for limit estimates.
pub const TAIL_FRACTION: f64 = 0.2;

pub fn estimate_exponents(path: &FundamentalPath) -> Result<Exponents, TransitionError> {
    let t0 = path.t0();
    let t_end = *path.grid.last().unwrap();
    let tail_start = t0 + (1.0 - TAIL_FRACTION) * (t_end - t0);
    let (lo, hi) = series::window_indices(&path.grid, tail_start, t_end)
        .filter(|(lo, hi)| hi > lo && path.grid[*lo] > t0)
        .ok_or(TransitionError::InsufficientHorizon(0))?;
    if hi - lo + 1 < 3 {
        return Err(TransitionError::InsufficientHorizon(hi - lo + 1));
    }

    let log_rate: Vec<f64> = (lo..=hi)
        .map(|i| path.sigma_max[i].ln() / (path.grid[i] - t0))
        .collect();
    let mu_max = series::window_mean(&path.grid[lo..=hi], &log_rate, tail_start, t_end)
        .ok_or(TransitionError::InsufficientHorizon(hi - lo + 1))?;

    let sup_rate = (lo..=hi)
        .map(|i| path.phi[i] / (path.grid[i] - t0))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Exponents {
        mu_max,
        n_const: path.k[0],
        lambda: -sup_rate,
    })
}

/// Exponent estimates with `N` and `λ` taken over `restarts` start times
/// `t₀ + jΔ`, `Δ = horizon / (2·restarts)`; `mu_max` comes from the first start.
pub fn restart_exponents(
    a: &MatrixFunction,
    t0: f64,
    horizon: f64,
    mode: NormalizationMode,
    opts: &TransitionOptions,
    restarts: usize,
) -> Result<Exponents, TransitionError> {
    let restarts = restarts.max(1);
    let delta = horizon / (2.0 * restarts as f64);
    let results: Vec<Result<Exponents, TransitionError>> = (0..restarts)
        .into_par_iter()
        .map(|j| {
            let path = compute_fundamental(a, t0 + j as f64 * delta, horizon, mode, opts)?;
            estimate_exponents(&path)
        })
        .collect();
    let mut merged: Option<Exponents> = None;
    for r in results {
        let e = r?;
        merged = Some(match merged {
            None => e,
            Some(m) => Exponents {
                mu_max: m.mu_max,
                n_const: m.n_const.max(e.n_const),
                lambda: m.lambda.min(e.lambda),
            },
        });
    }
    Ok(merged.expect("at least one restart"))
}

/// `p̄(t) = (t − t₀)⁻¹∫p` from the integrated `φ`; the first point is `p(t₀)`.
pub fn p_running_average(path: &FundamentalPath) -> Vec<f64> {
    let t0 = path.t0();
    path.grid
        .iter()
        .zip(&path.phi)
        .enumerate()
        .map(|(i, (t, ph))| if i == 0 { path.p[0] } else { ph / (t - t0) })
        .collect()
}

/// Columns `t, sigma_max, sigma_min, p, k, p_running_avg, k_running_avg`.
pub fn series_table(path: &FundamentalPath) -> (Vec<&'static str>, Vec<Vec<f64>>) {
    let p_avg = p_running_average(path);
    let k_avg = series::running_average(&path.grid, &path.k);
    (
        vec!["t", "sigma_max", "sigma_min", "p", "k", "p_running_avg", "k_running_avg"],
        vec![
            path.grid.clone(),
            path.sigma_max.clone(),
            path.sigma_min.clone(),
            path.p.clone(),
            path.k.clone(),
            p_avg,
            k_avg,
        ],
    )
}

/// Sample variance of a series.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}
