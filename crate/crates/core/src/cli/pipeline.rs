//! Analysis stages shared by the commands and the preset reproductions.

use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use super::config::{preset_params, ConfigError, OscillatorParams, RunConfig};
use super::output::{emit_series, write_csv, write_json, OutputError, Series};
use crate::auxiliary::{
    evaluate_criteria, solve_linear_aux, solve_nonlinear_aux, AuxCoefficients, AuxError, AuxOptions, BoundCurve,
    CriteriaReport,
};
use crate::model::{default_lipschitz_radius, derive_envelope, lipschitz_constant, ModelError, SystemSpec};
use crate::ode::{self, norm2, OdeOptions};
use crate::regions::{
    classify_regions, estimate_margins, estimate_mu, find_fixed_points, reduce_average, reduce_sup,
    simulated_level, solve_autonomous, trapping_condition_holds, AutonomousReduction, FixedPointSet,
    ReductionMode, RegionError, RegionEstimate, RegionKind,
};
use crate::transition::{
    compute_fundamental, p_running_average, restart_exponents, sample_variance, series_table, verify_norm_identity,
    verify_norm_identity_until, Exponents, FundamentalPath, NormalizationMode, TransitionError,
};
use crate::validate::{
    check_bound, check_decay, hull_containment, sample_ellipsoid, trace_boundary, BoundaryTrace, SampleMode, TraceOptions,
    ValidateError, ViolationReport, DECAY_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Auxiliary(#[from] AuxError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Validate(#[from] ValidateError),
    #[error("integration failed: {0}")]
    Integration(#[from] ode::OdeError),
    #[error("{0}")]
    Numerical(String),
    #[error("bound violated by {count} of {samples} points checked (max ratio {max_ratio:.6})")]
    Violation { count: usize, samples: usize, max_ratio: f64 },
}

impl PipelineError {
    /// 1 for configuration and I/O, 3 for a detected bound violation, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Output(_) => 1,
            Self::Violation { .. } => 3,
            _ => 2,
        }
    }
}

pub fn aux_options(cfg: &RunConfig) -> AuxOptions {
    AuxOptions {
        rel_tol: cfg.tolerances.rel_tol,
        abs_tol: cfg.tolerances.abs_tol,
        ..AuxOptions::default()
    }
}

pub fn ode_options(cfg: &RunConfig) -> OdeOptions {
    OdeOptions::new(cfg.tolerances.rel_tol, cfg.tolerances.abs_tol)
}

/// Transition quantities of a configured system.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub path: FundamentalPath,
    pub coeffs: AuxCoefficients,
    pub exponents: Exponents,
    /// Max relative error of `exp(∫p)` against `‖W(t)‖/‖W(t₀)‖`.
    pub identity_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisSummary {
    pub normalization: NormalizationMode,
    pub exponents: Exponents,
    pub identity_error: f64,
    pub p_mean: f64,
    pub p_variance: f64,
    pub p_fallbacks: usize,
    pub points: usize,
}

impl Analysis {
    pub fn summary(&self) -> AnalysisSummary {
        AnalysisSummary {
            normalization: self.path.normalization,
            exponents: self.exponents,
            identity_error: self.identity_error,
            p_mean: *p_running_average(&self.path).last().unwrap_or(&f64::NAN),
            p_variance: sample_variance(&self.path.p),
            p_fallbacks: self.path.p_fallbacks,
            points: self.path.len(),
        }
    }
}

pub fn analyze(cfg: &RunConfig) -> Result<Analysis, PipelineError> {
    let s = &cfg.system;
    let path = compute_fundamental(&s.a, s.t0, s.horizon, cfg.normalization, &cfg.tolerances)?;
    let exponents = restart_exponents(&s.a, s.t0, s.horizon, cfg.normalization, &cfg.tolerances, cfg.analysis.restarts)?;
    let identity_error = verify_norm_identity(&path);
    if path.p_fallbacks > 0 {
        info!("p used the clustered-singular-value rate at {} points", path.p_fallbacks);
    }
    let coeffs = AuxCoefficients::from_path(&path, s)?;
    Ok(Analysis {
        path,
        coeffs,
        exponents,
        identity_error,
    })
}

/// Identity error restricted to `[t₀, t₀ + t_max]`.
pub fn identity_error_until(analysis: &Analysis, t_max: f64) -> f64 {
    verify_norm_identity_until(&analysis.path, t_max)
}

/// Primary validation level: the largest configured `X₀`.
pub fn primary_level(cfg: &RunConfig) -> f64 {
    cfg.bounds.x0_levels.iter().copied().fold(0.0, f64::max)
}

/// Auxiliary curves for one initial level.
#[derive(Debug, Clone, Serialize)]
pub struct LevelBounds {
    pub x0: f64,
    pub lipschitz_radius: f64,
    pub l_hat: f64,
    pub linear: BoundCurve,
    pub nonlinear: BoundCurve,
    pub autonomous: BoundCurve,
}

pub fn linear_coefficients(cfg: &RunConfig, analysis: &Analysis, x0: f64) -> Result<AuxCoefficients, PipelineError> {
    let radius = cfg
        .bounds
        .lipschitz_radius
        .unwrap_or_else(|| default_lipschitz_radius(&cfg.system.a, x0));
    if cfg.bounds.lipschitz_radius.is_none() {
        info!("classical Lipschitz radius R = {radius:.6} from the kappa * X0 stand-in (X0 = {x0})");
    }
    let lin = lipschitz_constant(&analysis.coeffs.envelope, radius)?;
    Ok(analysis.coeffs.clone().with_lipschitz(&lin))
}

pub fn bounds_for_level(cfg: &RunConfig, analysis: &Analysis, x0: f64) -> Result<LevelBounds, PipelineError> {
    let opts = aux_options(cfg);
    let with_l = linear_coefficients(cfg, analysis, x0)?;
    let lin = with_l.linear.clone().expect("linear term attached");
    let linear = solve_linear_aux(&with_l, x0)?;
    let nonlinear = solve_nonlinear_aux(&analysis.coeffs, x0, &opts)?;
    let red = reduce_sup(&analysis.coeffs, (analysis.coeffs.t0(), analysis.coeffs.t_end()))?;
    let autonomous = solve_autonomous(&red, &analysis.coeffs.grid, x0, &opts)?;
    if let Some(t) = nonlinear.blow_up_time {
        warn!("nonlinear bound from X0 = {x0} escapes at t = {t:.4}");
    }
    Ok(LevelBounds {
        x0,
        lipschitz_radius: lin.radius.unwrap_or(f64::NAN),
        l_hat: lin.l_hat,
        linear,
        nonlinear,
        autonomous,
    })
}

pub fn bound_levels(cfg: &RunConfig, analysis: &Analysis) -> Result<Vec<LevelBounds>, PipelineError> {
    let mut levels = cfg.bounds.x0_levels.clone();
    levels.sort_by(f64::total_cmp);
    levels.iter().map(|&x0| bounds_for_level(cfg, analysis, x0)).collect()
}

pub fn criteria(cfg: &RunConfig, analysis: &Analysis) -> Result<CriteriaReport, PipelineError> {
    let coeffs = linear_coefficients(cfg, analysis, primary_level(cfg))?;
    Ok(evaluate_criteria(&coeffs, &analysis.exponents, cfg.t_star()))
}

/// Samples of the primary ellipsoid checked against the nonlinear bound.
pub fn validate_bound(cfg: &RunConfig, analysis: &Analysis, level: &LevelBounds) -> Result<ViolationReport, PipelineError> {
    let v = &cfg.validation;
    let samples = sample_ellipsoid(analysis.path.w_t0(), level.x0, v.samples, v.sample_mode, v.seed)?;
    Ok(check_bound(&cfg.system, &level.nonlinear, &samples, v.rel_slack, &ode_options(cfg))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginEntry {
    pub root: f64,
    pub mu: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrappingCheck {
    pub level: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayCheck {
    pub level: f64,
    pub samples: usize,
    pub mode: SampleMode,
    pub horizon: f64,
    pub threshold: f64,
    pub decayed_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionsReport {
    pub requested_mode: ReductionMode,
    pub mode: ReductionMode,
    pub reduction: AutonomousReduction,
    pub fixed_points: FixedPointSet,
    pub margins: Vec<MarginEntry>,
    pub regions: Vec<RegionEstimate>,
    /// Largest `X₀` whose nonlinear auxiliary curve decays over the horizon.
    pub simulated_level: Option<f64>,
    pub trapping_checks: Vec<TrappingCheck>,
    pub decay_check: Option<DecayCheck>,
    pub warnings: Vec<String>,
}

impl RegionsReport {
    pub fn basin(&self) -> Option<&RegionEstimate> {
        self.regions
            .iter()
            .find(|r| r.kind == RegionKind::StabilityBasin && r.level.is_some())
    }

    /// Level to seed boundary tracing from: the basin, else the simulated level.
    pub fn certified_level(&self) -> Option<f64> {
        self.basin().and_then(|r| r.level).or(self.simulated_level)
    }
}

fn reduce(coeffs: &AuxCoefficients, mode: ReductionMode, window: (f64, f64)) -> Result<AutonomousReduction, RegionError> {
    match mode {
        ReductionMode::Sup => reduce_sup(coeffs, window),
        ReductionMode::Averaged => reduce_average(coeffs, window),
    }
}

/// Region certificates from the autonomous reduction; an averaged reduction
/// whose margins cannot be estimated falls back to sup mode.
pub fn regions(cfg: &RunConfig, analysis: &Analysis) -> Result<RegionsReport, PipelineError> {
    let coeffs = &analysis.coeffs;
    let opts = aux_options(cfg);
    let window = cfg.window();
    let requested = cfg.regions.mode;
    let mut warnings = Vec::new();

    let mut mode = requested;
    let (red, fps, margins) = loop {
        let red = reduce(coeffs, mode, window)?;
        if let Some(w) = &red.warning {
            warnings.push(w.clone());
        }
        let fps = find_fixed_points(&red);
        let margins = match (mode, cfg.regions.mu_window) {
            (ReductionMode::Averaged, Some([a, b])) => fps
                .positive_roots()
                .map(|r| estimate_mu(coeffs, r.value, r.stability, (a, b), &opts))
                .collect(),
            _ => estimate_margins(coeffs, &red, &fps, &opts),
        };
        let failed: Vec<String> = margins.iter().filter_map(|m| m.as_ref().err().map(|e| e.to_string())).collect();
        if mode == ReductionMode::Averaged && !failed.is_empty() {
            let msg = format!("margin estimation failed ({}); falling back to sup mode", failed.join("; "));
            warn!("{msg}");
            warnings.push(msg);
            mode = ReductionMode::Sup;
            continue;
        }
        break (red, fps, margins);
    };

    let regions = classify_regions(
        &fps,
        &red,
        analysis.path.w_inv_t0(),
        analysis.path.t0(),
        &margins,
        cfg.system.omega2_radius,
    );
    let margins = fps
        .positive_roots()
        .zip(&margins)
        .map(|(r, m)| MarginEntry {
            root: r.value,
            mu: m.as_ref().ok().copied(),
            error: m.as_ref().err().map(|e| e.to_string()),
        })
        .collect();

    let largest_root = fps.positive_roots().map(|r| r.value).fold(0.0, f64::max);
    let upper = (10.0 * primary_level(cfg)).max(2.0 * largest_root);
    let simulated = simulated_level(coeffs, upper, 1e-6, &opts)?;

    let mut trapping_checks = Vec::new();
    for r in regions.iter().filter(|r| r.kind == RegionKind::TrappingRegion) {
        if let Some(level) = r.level {
            trapping_checks.push(TrappingCheck {
                level,
                holds: trapping_condition_holds(coeffs, level, &opts)?,
            });
        }
    }

    let mut report = RegionsReport {
        requested_mode: requested,
        mode,
        reduction: red,
        fixed_points: fps,
        margins,
        regions,
        simulated_level: simulated,
        trapping_checks,
        decay_check: None,
        warnings,
    };
    if let Some(level) = report.basin().and_then(|r| r.level) {
        report.decay_check = Some(basin_decay(cfg, analysis, level)?);
    }
    Ok(report)
}

/// Fraction of volume samples at `0.95·level` that decay below the threshold by the horizon.
pub fn basin_decay(cfg: &RunConfig, analysis: &Analysis, level: f64) -> Result<DecayCheck, PipelineError> {
    let v = &cfg.validation;
    let inner = 0.95 * level;
    let samples = sample_ellipsoid(analysis.path.w_t0(), inner, v.samples, SampleMode::Volume, v.seed)?;
    let horizon = cfg.system.horizon;
    let fraction = check_decay(&cfg.system, &samples, horizon, DECAY_THRESHOLD, &ode_options(cfg))?;
    Ok(DecayCheck {
        level: inner,
        samples: v.samples,
        mode: SampleMode::Volume,
        horizon,
        threshold: DECAY_THRESHOLD,
        decayed_fraction: fraction,
    })
}

pub fn trace(cfg: &RunConfig, analysis: &Analysis, level_hint: f64) -> Result<BoundaryTrace, PipelineError> {
    let opts = TraceOptions {
        n_seeds: cfg.regions.trace_seeds,
        seed: cfg.validation.seed,
        output_step: cfg.tolerances.output_step,
        ode: ode_options(cfg),
    };
    Ok(trace_boundary(&cfg.system, analysis.path.w_t0(), level_hint, cfg.regions.trace_horizon, &opts)?)
}

/// Fraction of interior samples (volume, `0.95·level`) inside the convex hull of
/// the traced tail cloud in the `(x₁, x₂)` plane. Non-convex regions can lower it
/// without contradicting the certificate, so it is reported, not enforced.
pub fn certificate_hull_fraction(
    cfg: &RunConfig,
    analysis: &Analysis,
    trace: &BoundaryTrace,
    level: f64,
) -> Result<f64, PipelineError> {
    let v = &cfg.validation;
    let samples = sample_ellipsoid(analysis.path.w_t0(), 0.95 * level, v.samples, SampleMode::Volume, v.seed)?;
    Ok(hull_containment(trace, &samples.points, 0, 1))
}

/// Files produced by a command, relative to the output directory.
pub type Written = Vec<PathBuf>;

fn out(dir: &Path, name: &str, written: &mut Written) -> PathBuf {
    written.push(PathBuf::from(name));
    dir.join(name)
}

fn emit(dir: &Path, name: &str, curves: &[Series], written: &mut Written) -> Result<(), PipelineError> {
    let path = out(dir, name, written);
    emit_series(curves, &path)?;
    written.push(path.with_extension("gp").file_name().map(PathBuf::from).unwrap_or_default());
    Ok(())
}

pub fn write_analysis(dir: &Path, analysis: &Analysis, written: &mut Written) -> Result<(), PipelineError> {
    let (names, cols) = series_table(&analysis.path);
    let curves: Vec<Series> = names[1..]
        .iter()
        .zip(&cols[1..])
        .map(|(n, v)| Series::new(*n, &cols[0], v))
        .collect();
    emit(dir, "pk.csv", &curves, written)?;
    write_json(&out(dir, "analysis.json", written), &analysis.summary())?;
    Ok(())
}

pub fn write_bounds(dir: &Path, levels: &[LevelBounds], written: &mut Written) -> Result<(), PipelineError> {
    let Some(primary) = levels.last() else {
        return Ok(());
    };
    emit(
        dir,
        "bounds.csv",
        &[
            Series::new("X_linear", &primary.linear.grid, &primary.linear.values),
            Series::new("X_nonlinear", &primary.nonlinear.grid, &primary.nonlinear.values),
            Series::new("X_autonomous_sup", &primary.autonomous.grid, &primary.autonomous.values),
        ],
        written,
    )?;
    write_levels(dir, levels, written)
}

fn write_levels(dir: &Path, levels: &[LevelBounds], written: &mut Written) -> Result<(), PipelineError> {
    let curves: Vec<Series> = levels
        .iter()
        .map(|l| Series::new(format!("X_nonlinear_{}", l.x0), &l.nonlinear.grid, &l.nonlinear.values))
        .collect();
    emit(dir, "bounds_levels.csv", &curves, written)
}

pub fn write_trace(
    dir: &Path,
    trace: &BoundaryTrace,
    level: f64,
    hull_fraction: Option<f64>,
    written: &mut Written,
) -> Result<(), PipelineError> {
    let n = trace
        .trajectories
        .first()
        .and_then(|t| t.states.first())
        .map_or(0, Vec::len);
    let mut header = vec!["seed".to_string(), "t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    let mut rows = Vec::new();
    for tr in &trace.trajectories {
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let mut row = vec![tr.seed_index.to_string(), format!("{t:.16e}")];
            row.extend(x.iter().map(|v| format!("{v:.16e}")));
            rows.push(row);
        }
    }
    write_csv(&out(dir, "trace.csv", written), &header, &rows)?;
    let script = "set datafile separator ','\nset key off\nset xlabel 'x1'\nset ylabel 'x2'\n\
                  set terminal pngcairo size 800,800\nset output 'trace.png'\n\
                  plot 'trace.csv' skip 1 using 3:4 with lines\n";
    std::fs::write(out(dir, "trace.gp", written), script).map_err(|source| OutputError {
        path: dir.join("trace.gp"),
        source,
    })?;
    write_json(
        &out(dir, "trace.json", written),
        &json!({
            "level_hint": level,
            "seeds": trace.trajectories.len(),
            "escaped": trace.escaped,
            "loop_drift": trace.loop_drift,
            "tail_points": trace.tail_cloud.len(),
            "hull_containment": hull_fraction,
        }),
    )?;
    Ok(())
}

pub fn violation_error(report: &ViolationReport) -> Result<(), PipelineError> {
    if report.is_clean() {
        Ok(())
    } else {
        Err(PipelineError::Violation {
            count: report.violation_count,
            samples: report.samples,
            max_ratio: report.max_ratio,
        })
    }
}

/// Runs `validate` and writes its report; a violation is returned as an error after writing.
pub fn run_validate(cfg: &RunConfig, analysis: &Analysis, dir: &Path, written: &mut Written) -> Result<ViolationReport, PipelineError> {
    let level = bounds_for_level(cfg, analysis, primary_level(cfg))?;
    let report = validate_bound(cfg, analysis, &level)?;
    write_json(&out(dir, "validation.json", written), &report)?;
    emit(
        dir,
        "validation.csv",
        &[
            Series::new("X_nonlinear", &level.nonlinear.grid, &level.nonlinear.values),
            Series::new("norm_measured", &report.grid, &report.measured_max),
        ],
        written,
    )?;
    info!(
        "validated {} samples at X0 = {}: {} violations, max ratio {:.6}",
        report.samples, level.x0, report.violation_count, report.max_ratio
    );
    Ok(report)
}

/// Reproduces one figure into `dir`.
pub fn reproduce(name: &str, cfg: &RunConfig, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    match name {
        "fig1" => reproduce_fig1(cfg, dir, written),
        "fig2_1" | "fig2_2" => reproduce_fig2(cfg, dir, written),
        "fig4_1" | "fig4_2" | "fig4_3" => reproduce_fig4(cfg, dir, written),
        "fig5" => {
            let analysis = analyze(cfg)?;
            write_analysis(dir, &analysis, written)
        }
        "fig6" => reproduce_fig6(cfg, dir, written),
        other => Err(ConfigError::UnknownPreset(other.to_string()).into()),
    }
}

fn p_curves(path: &FundamentalPath) -> [Series; 2] {
    [
        Series::new("p", &path.grid, &path.p),
        Series::new("p_running_avg", &path.grid, &p_running_average(path)),
    ]
}

fn reproduce_fig1(cfg: &RunConfig, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    let s = &cfg.system;
    let mut summary = serde_json::Map::new();
    for (mode, file) in [(NormalizationMode::Identity, "p_identity.csv"), (NormalizationMode::Spectral, "p_spectral.csv")] {
        let path = compute_fundamental(&s.a, s.t0, s.horizon, mode, &cfg.tolerances)?;
        let avg = *p_running_average(&path).last().unwrap_or(&f64::NAN);
        info!("{mode:?}: running average of p at t = {} is {avg:.6}", s.t0 + s.horizon);
        summary.insert(format!("{mode:?}").to_lowercase(), json!({"p_running_avg_final": avg}));
        emit(dir, file, &p_curves(&path), written)?;
    }
    // frozen stiffness: constant A with the same ω₀ and α₁
    let params = OscillatorParams {
        a1: 0.0,
        a2: 0.0,
        ..preset_params("fig1")?
    };
    let frozen = super::config::parse_config(
        json!({"system": params.system_json(s.horizon)}).to_string().as_bytes(),
    )?;
    let path = compute_fundamental(&frozen.system.a, s.t0, s.horizon, cfg.normalization, &cfg.tolerances)?;
    let avg = *p_running_average(&path).last().unwrap_or(&f64::NAN);
    summary.insert("constant".into(), json!({"p_running_avg_final": avg}));
    emit(dir, "p_constant.csv", &p_curves(&path), written)?;
    write_json(&out(dir, "fig1.json", written), &summary)?;
    Ok(())
}

fn reproduce_fig2(cfg: &RunConfig, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    let analysis = analyze(cfg)?;
    let levels = bound_levels(cfg, &analysis)?;
    let primary = levels.last().expect("at least one level");
    let report = validate_bound(cfg, &analysis, primary)?;
    emit(
        dir,
        "bounds.csv",
        &[
            Series::new("X_linear", &primary.linear.grid, &primary.linear.values),
            Series::new("X_nonlinear", &primary.nonlinear.grid, &primary.nonlinear.values),
            Series::new("norm_measured", &report.grid, &report.measured_max),
        ],
        written,
    )?;
    write_levels(dir, &levels, written)?;
    let crit = criteria(cfg, &analysis)?;
    write_json(&out(dir, "criteria.json", written), &crit)?;
    write_json(&out(dir, "validation.json", written), &report)?;
    write_json(&out(dir, "analysis.json", written), &analysis.summary())?;
    violation_error(&report)
}

fn reproduce_fig4(cfg: &RunConfig, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    let analysis = analyze(cfg)?;
    let report = regions(cfg, &analysis)?;
    for r in &report.regions {
        info!("{:?} at level {:?} (mu = {})", r.kind, r.level, r.mu);
    }
    write_json(&out(dir, "regions.json", written), &report)?;
    let level = bounds_for_level(cfg, &analysis, primary_level(cfg))?;
    emit(
        dir,
        "bounds.csv",
        &[
            Series::new("X_nonlinear", &level.nonlinear.grid, &level.nonlinear.values),
            Series::new("X_autonomous_sup", &level.autonomous.grid, &level.autonomous.values),
        ],
        written,
    )?;
    let hint = report.certified_level().unwrap_or_else(|| primary_level(cfg));
    match trace(cfg, &analysis, hint) {
        Ok(t) => {
            let hull = trace_hull(cfg, &analysis, &t, hint);
            write_trace(dir, &t, hint, hull, written)?
        }
        Err(PipelineError::Validate(e @ ValidateError::NoFiniteBoundary(_))) => warn!("boundary trace: {e}"),
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Hull containment for 2-D systems, logged when incomplete.
pub fn trace_hull(cfg: &RunConfig, analysis: &Analysis, trace: &BoundaryTrace, level: f64) -> Option<f64> {
    if cfg.system.dim() != 2 || trace.tail_cloud.len() < 3 {
        return None;
    }
    match certificate_hull_fraction(cfg, analysis, trace, level) {
        Ok(f) => {
            if f < 1.0 {
                warn!("{:.1}% of certified interior samples lie outside the traced hull", 100.0 * (1.0 - f));
            }
            Some(f)
        }
        Err(e) => {
            warn!("hull containment not computed: {e}");
            None
        }
    }
}

fn reproduce_fig6(cfg: &RunConfig, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    let s = &cfg.system;
    let base = preset_params("fig6")?;
    let mut variants = Vec::new();
    for duffing in [true, false] {
        let params = OscillatorParams { duffing, ..base };
        let c = super::config::parse_config(json!({"system": params.system_json(s.horizon)}).to_string().as_bytes())?;
        variants.push(c.system);
    }
    let (duffing, vdp): (&SystemSpec, &SystemSpec) = (&variants[0], &variants[1]);
    let env_d = derive_envelope(&duffing.f);
    let env_v = derive_envelope(&vdp.f);
    if env_d != env_v {
        return Err(PipelineError::Numerical("Duffing and Van der Pol envelopes differ".into()));
    }
    info!("envelope identity holds: Duffing and Van der Pol fields share L(t, rho) = {:?}", env_d.sup_coefficients());

    let analysis = analyze(cfg)?;
    let x0_level = primary_level(cfg);
    let bound = solve_nonlinear_aux(&analysis.coeffs, x0_level, &aux_options(cfg))?;
    let v = &cfg.validation;
    let samples = sample_ellipsoid(analysis.path.w_t0(), x0_level, 1, SampleMode::Surface, v.seed)?;
    let x0 = &samples.points[0];
    let grid = &analysis.path.grid;
    let mut curves = Vec::new();
    for (name, sys) in [("norm_duffing", duffing), ("norm_vdp", vdp)] {
        let traj = ode::integrate_on(|t, x, dx| sys.rhs_into(t, x, dx), grid, x0, &ode_options(cfg))?;
        let norms: Vec<f64> = traj.states().map(norm2).collect();
        curves.push(Series::new(name, traj.times(), &norms));
    }
    curves.push(Series::new("X_nonlinear", &bound.grid, &bound.values));
    emit(dir, "norms.csv", &curves, written)?;
    write_json(
        &out(dir, "fig6.json", written),
        &json!({
            "envelope_identity": true,
            "envelope": env_d.sup_coefficients(),
            "x0": x0,
            "x0_level": x0_level,
        }),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_failure_class() {
        let v = PipelineError::Violation {
            count: 1,
            samples: 10,
            max_ratio: 1.2,
        };
        assert_eq!(v.exit_code(), 3);
        assert_eq!(PipelineError::Numerical("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::from(ConfigError::UnknownPreset("x".into())).exit_code(), 1);
        let clean = ViolationReport {
            samples: 1,
            violations: vec![],
            violation_count: 0,
            max_ratio: 0.5,
            decayed_fraction: 1.0,
            seed: 0,
            rel_slack: 1e-3,
            grid: vec![],
            measured_max: vec![],
        };
        assert!(violation_error(&clean).is_ok());
        let dirty = ViolationReport {
            violations: vec![crate::validate::Violation {
                sample: 0,
                time: 1.0,
                measured: 2.0,
                bound: 1.0,
            }],
            violation_count: 2,
            ..clean
        };
        assert_eq!(violation_error(&dirty).unwrap_err().exit_code(), 3);
    }
}
