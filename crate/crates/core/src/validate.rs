//! Monte-Carlo checks of bounds and region certificates against direct
//! integration of the full system, and reverse-time boundary tracing.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxiliary::BoundCurve;
use crate::model::SystemSpec;
use crate::ode::{self, norm2, OdeError, OdeOptions, Outcome};

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("all {0} seeds escaped in reverse time; no finite boundary")]
    NoFiniteBoundary(usize),
    #[error(transparent)]
    Integration(#[from] OdeError),
}

pub const DEFAULT_REL_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Surface,
    Volume,
}

/// Initial states `x₀ = W(t₀)z` with `‖z‖ = level` (surface) or `‖z‖ ≤ level` (volume).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub level: f64,
    pub mode: SampleMode,
    pub seed: u64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Draws `count` points of `ω(t₀, level) = {x₀ : ‖W⁻¹(t₀)x₀‖ ≤ level}`; deterministic in `seed`.
pub fn sample_ellipsoid(
    w_t0: &DMatrix<f64>,
    level: f64,
    count: usize,
    mode: SampleMode,
    seed: u64,
) -> Result<SampleSet, ValidateError> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(ValidateError::InvalidArgument(format!("level must be finite and >= 0, got {level}")));
    }
    if count == 0 {
        return Err(ValidateError::InvalidArgument("count must be >= 1".into()));
    }
    let n = w_t0.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..count)
        .map(|_| {
            let mut z: DVector<f64> = loop {
                let g = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
                if g.norm() > 1e-12 {
                    break g.normalize();
                }
            };
            let radius = match mode {
                SampleMode::Surface => level,
                SampleMode::Volume => level * rng.random::<f64>().powf(1.0 / n as f64),
            };
            z *= radius;
            (w_t0 * z).iter().copied().collect()
        })
        .collect();
    Ok(SampleSet {
        points,
        level,
        mode,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub sample: usize,
    pub time: f64,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationReport {
    pub samples: usize,
    /// First violation of each offending sample, in sample order.
    pub violations: Vec<Violation>,
    /// Grid points violated, over all samples.
    pub violation_count: usize,
    /// `max ‖x(tᵢ)‖ / X(tᵢ)` over samples and grid points.
    pub max_ratio: f64,
    /// Fraction of samples with `‖x(T)‖ < 10⁻²‖x₀‖` at the end of the bound grid.
    pub decayed_fraction: f64,
    pub seed: u64,
    pub rel_slack: f64,
    #[serde(skip)]
    pub grid: Vec<f64>,
    /// Pointwise max of `‖x(tᵢ)‖` over samples.
    #[serde(skip)]
    pub measured_max: Vec<f64>,
}

impl ViolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const DECAY_THRESHOLD: f64 = 1e-2;

struct SampleRun {
    norms: Vec<f64>,
    escaped_at: Option<f64>,
}

fn run_sample(spec: &SystemSpec, times: &[f64], x0: &[f64], opts: &OdeOptions) -> Result<SampleRun, OdeError> {
    let traj = ode::integrate_on(|t, x, dx| spec.rhs_into(t, x, dx), times, x0, opts)?;
    Ok(SampleRun {
        norms: traj.norms(),
        escaped_at: match traj.outcome {
            Outcome::Escaped { time } => Some(time),
            Outcome::Completed => None,
        },
    })
}

/// Integrates every sample with the full system on the bound's grid and flags
/// points where `‖x(tᵢ)‖ > (1 + rel_slack)·X(tᵢ)`.
pub fn check_bound(
    spec: &SystemSpec,
    bound: &BoundCurve,
    samples: &SampleSet,
    rel_slack: f64,
    opts: &OdeOptions,
) -> Result<ViolationReport, ValidateError> {
    if !(rel_slack >= 0.0) {
        return Err(ValidateError::InvalidArgument(format!("rel_slack must be >= 0, got {rel_slack}")));
    }
    if bound.grid.len() < 2 {
        return Err(ValidateError::InvalidArgument("bound curve needs at least two points".into()));
    }
    let runs: Vec<Result<SampleRun, OdeError>> = samples
        .points
        .par_iter()
        .map(|x0| run_sample(spec, &bound.grid, x0, opts))
        .collect();

    let len = bound.grid.len();
    let mut report = ViolationReport {
        samples: samples.len(),
        violations: Vec::new(),
        violation_count: 0,
        max_ratio: 0.0,
        decayed_fraction: 0.0,
        seed: samples.seed,
        rel_slack,
        grid: bound.grid.clone(),
        measured_max: vec![0.0; len],
    };
    let mut decayed = 0usize;
    for (idx, run) in runs.into_iter().enumerate() {
        let run = run?;
        let mut first: Option<Violation> = None;
        for (i, &measured) in run.norms.iter().enumerate() {
            let x = bound.values[i];
            report.measured_max[i] = report.measured_max[i].max(measured);
            let ratio = if x > 0.0 {
                measured / x
            } else if measured > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            report.max_ratio = report.max_ratio.max(ratio);
            if measured > (1.0 + rel_slack) * x {
                report.violation_count += 1;
                first.get_or_insert(Violation {
                    sample: idx,
                    time: bound.grid[i],
                    measured,
                    bound: x,
                });
            }
        }
        if let Some(te) = run.escaped_at {
            report.violation_count += 1;
            report.max_ratio = f64::INFINITY;
            first.get_or_insert(Violation {
                sample: idx,
                time: te,
                measured: f64::INFINITY,
                bound: bound.values[run.norms.len().min(len) - 1],
            });
        } else {
            let n0 = norm2(&samples.points[idx]);
            if *run.norms.last().unwrap() < DECAY_THRESHOLD * n0 || n0 == 0.0 {
                decayed += 1;
            }
        }
        report.violations.extend(first);
    }
    report.decayed_fraction = decayed as f64 / samples.len().max(1) as f64;
    Ok(report)
}

/// Fraction of samples with `‖x(t₀ + T)‖ < threshold·‖x₀‖`; zero states count as decayed.
pub fn check_decay(
    spec: &SystemSpec,
    samples: &SampleSet,
    t_final: f64,
    threshold: f64,
    opts: &OdeOptions,
) -> Result<f64, ValidateError> {
    if !(t_final > 0.0) {
        return Err(ValidateError::InvalidArgument(format!("decay horizon must be positive, got {t_final}")));
    }
    let times = [spec.t0, spec.t0 + t_final];
    let decayed: Vec<Result<bool, OdeError>> = samples
        .points
        .par_iter()
        .map(|x0| {
            let n0 = norm2(x0);
            if n0 == 0.0 {
                return Ok(true);
            }
            let run = run_sample(spec, &times, x0, opts)?;
            Ok(run.escaped_at.is_none() && run.norms.len() == 2 && run.norms[1] < threshold * n0)
        })
        .collect();
    let mut count = 0usize;
    for d in decayed {
        count += usize::from(d?);
    }
    Ok(count as f64 / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracedTrajectory {
    pub seed_index: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub escaped: bool,
}

/// Reverse-time trajectories from interior seeds and the point cloud they
/// accumulate on near the region boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryTrace {
    pub trajectories: Vec<TracedTrajectory>,
    /// States from the trailing 25% of every non-escaped trajectory.
    pub tail_cloud: Vec<Vec<f64>>,
    /// Max over seeds of `|r₄ − r₃|/r₄`, `rⱼ` the mean radius over the `j`-th quarter.
    pub loop_drift: f64,
    pub escaped: usize,
}

impl BoundaryTrace {
    /// Tail cloud projected onto the state coordinates `(i, j)`.
    pub fn projection(&self, i: usize, j: usize) -> Vec<[f64; 2]> {
        self.tail_cloud.iter().map(|x| [x[i], x[j]]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub n_seeds: usize,
    pub seed: u64,
    pub output_step: f64,
    pub ode: OdeOptions,
}

/// Integrates `n_seeds` points of the ellipsoid at `0.9·level_hint` backward
/// over `horizon_reverse`, with escape radius `10³·level_hint`.
pub fn trace_boundary(
    spec: &SystemSpec,
    w_t0: &DMatrix<f64>,
    level_hint: f64,
    horizon_reverse: f64,
    opts: &TraceOptions,
) -> Result<BoundaryTrace, ValidateError> {
    if opts.n_seeds == 0 {
        return Err(ValidateError::InvalidArgument("n_seeds must be >= 1".into()));
    }
    if !(level_hint > 0.0) || !(horizon_reverse > 0.0) {
        return Err(ValidateError::InvalidArgument(
            "level hint and reverse horizon must be positive".into(),
        ));
    }
    let seeds = sample_ellipsoid(w_t0, 0.9 * level_hint, opts.n_seeds, SampleMode::Surface, opts.seed)?;
    let ode_opts = opts.ode.with_escape_radius(1e3 * level_hint);
    let t0 = spec.t0;
    let runs: Vec<Result<TracedTrajectory, OdeError>> = seeds
        .points
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let traj = ode::integrate(
                |t, x, dx| spec.rhs_into(t, x, dx),
                t0,
                t0 - horizon_reverse,
                x0,
                &ode_opts,
                opts.output_step,
            )?;
            Ok(TracedTrajectory {
                seed_index: i,
                times: traj.times().to_vec(),
                states: traj.states().map(|s| s.to_vec()).collect(),
                escaped: traj.escaped(),
            })
        })
        .collect();
    let trajectories = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let escaped = trajectories.iter().filter(|t| t.escaped).count();
    if escaped == trajectories.len() {
        return Err(ValidateError::NoFiniteBoundary(escaped));
    }

    let mut tail_cloud = Vec::new();
    let mut loop_drift = 0.0_f64;
    for tr in trajectories.iter().filter(|t| !t.escaped) {
        let len = tr.states.len();
        let quarter = len / 4;
        if quarter == 0 {
            continue;
        }
        tail_cloud.extend(tr.states[len - quarter..].iter().cloned());
        let mean_radius = |range: &[Vec<f64>]| range.iter().map(|x| norm2(x)).sum::<f64>() / range.len() as f64;
        let r3 = mean_radius(&tr.states[len - 2 * quarter..len - quarter]);
        let r4 = mean_radius(&tr.states[len - quarter..]);
        if r4 > 0.0 {
            loop_drift = loop_drift.max((r4 - r3).abs() / r4);
        }
    }
    Ok(BoundaryTrace {
        trajectories,
        tail_cloud,
        loop_drift,
        escaped,
    })
}

/// Convex hull (counter-clockwise, Andrew's monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

pub fn hull_contains(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Fraction of `points` (projected on `(i, j)`) inside the hull of the trace's tail cloud.
pub fn hull_containment(trace: &BoundaryTrace, points: &[Vec<f64>], i: usize, j: usize) -> f64 {
    let hull = convex_hull(&trace.projection(i, j));
    if points.is_empty() {
        return 1.0;
    }
    let inside = points.iter().filter(|x| hull_contains(&hull, [x[i], x[j]])).count();
    inside as f64 / points.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxiliary::BoundKind;
    use crate::model::{ForcingTerm, MatrixFunction, Monomial, PolynomialField, TrigAffineScalar};
    use approx::assert_relative_eq;

    fn linear(m: &[f64], n: usize) -> SystemSpec {
        SystemSpec::new(
            MatrixFunction::constant(&DMatrix::from_row_slice(n, n, m)),
            PolynomialField::zero(n),
            ForcingTerm::zero(n),
            0.0,
            20.0,
            None,
        )
        .unwrap()
    }

    fn opts() -> OdeOptions {
        OdeOptions::new(1e-10, 1e-12)
    }

    #[test]
    fn surface_samples_lie_on_the_ellipsoid() {
        let id = DMatrix::identity(2, 2);
        let s = sample_ellipsoid(&id, 1.0, 50, SampleMode::Surface, 7).unwrap();
        assert!(s.points.iter().all(|x| (norm2(x) - 1.0).abs() < 1e-12));
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let winv = w.clone().try_inverse().unwrap();
        let s = sample_ellipsoid(&w, 1.0, 50, SampleMode::Surface, 7).unwrap();
        for x in &s.points {
            let z = &winv * DVector::from_column_slice(x);
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
        let v = sample_ellipsoid(&w, 1.0, 200, SampleMode::Volume, 7).unwrap();
        assert!(v.points.iter().all(|x| (&winv * DVector::from_column_slice(x)).norm() <= 1.0 + 1e-12));
        assert_eq!(s, sample_ellipsoid(&w, 1.0, 50, SampleMode::Surface, 7).unwrap());
        assert_ne!(s.points, sample_ellipsoid(&w, 1.0, 50, SampleMode::Surface, 8).unwrap().points);
    }

    #[test]
    fn zero_system_never_violates() {
        let spec = linear(&[0.0; 4], 2);
        let grid = ode::uniform_grid(0.0, 5.0, 0.1);
        let bound = BoundCurve {
            values: vec![1.0; grid.len()],
            grid,
            x0: 1.0,
            kind: BoundKind::LinearAux,
            blow_up_time: None,
        };
        let s = sample_ellipsoid(&DMatrix::identity(2, 2), 1.0, 20, SampleMode::Surface, 1).unwrap();
        let r = check_bound(&spec, &bound, &s, DEFAULT_REL_SLACK, &opts()).unwrap();
        assert!(r.is_clean());
        assert!(r.max_ratio <= 1.0 + 1e-12);
    }

    #[test]
    fn tight_scalar_bound() {
        let spec = linear(&[-1.0], 1);
        let grid = ode::uniform_grid(0.0, 5.0, 0.01);
        let bound = BoundCurve {
            values: grid.iter().map(|t| 2.0 * (-t).exp()).collect(),
            grid,
            x0: 2.0,
            kind: BoundKind::LinearAux,
            blow_up_time: None,
        };
        let s = SampleSet {
            points: vec![vec![2.0]],
            level: 2.0,
            mode: SampleMode::Surface,
            seed: 0,
        };
        let r = check_bound(&spec, &bound, &s, DEFAULT_REL_SLACK, &opts()).unwrap();
        assert_relative_eq!(r.max_ratio, 1.0, epsilon = 1e-6);
        assert!(r.is_clean());
        let loose = BoundCurve {
            values: bound.values.iter().map(|v| 0.5 * v).collect(),
            ..bound
        };
        let r = check_bound(&spec, &loose, &s, DEFAULT_REL_SLACK, &opts()).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].time, 0.0);
    }

    #[test]
    fn decay_fractions() {
        let s = sample_ellipsoid(&DMatrix::identity(2, 2), 1.0, 30, SampleMode::Volume, 3).unwrap();
        let stable = linear(&[-1.0, 0.0, 0.0, -2.0], 2);
        assert_eq!(check_decay(&stable, &s, 20.0, 1e-2, &opts()).unwrap(), 1.0);
        let unstable = linear(&[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(check_decay(&unstable, &s, 20.0, 1e-2, &opts()).unwrap(), 0.0);
        let zeros = SampleSet {
            points: vec![vec![0.0, 0.0]; 3],
            level: 0.0,
            mode: SampleMode::Volume,
            seed: 0,
        };
        assert_eq!(check_decay(&unstable, &zeros, 20.0, 1e-2, &opts()).unwrap(), 1.0);
    }

    #[test]
    fn globally_stable_system_has_no_finite_boundary() {
        let spec = linear(&[-1.0, 0.0, 0.0, -2.0], 2);
        let topts = TraceOptions {
            n_seeds: 4,
            seed: 1,
            output_step: 0.05,
            ode: opts(),
        };
        let r = trace_boundary(&spec, &DMatrix::identity(2, 2), 1.0, 50.0, &topts);
        assert!(matches!(r, Err(ValidateError::NoFiniteBoundary(4))));
    }

    #[test]
    fn reverse_van_der_pol_cycle_is_traced() {
        // ẍ + 0.2ẋ − 0.05ẋ³ + 4x = 0 has an unstable cycle that attracts in reverse time
        let c = TrigAffineScalar::constant;
        let spec = SystemSpec::new(
            MatrixFunction::from_rows(vec![vec![c(0.0), c(1.0)], vec![c(-4.0), c(-0.2)]]).unwrap(),
            PolynomialField::new(vec![vec![], vec![Monomial::new(c(0.05), vec![0, 3])]]).unwrap(),
            ForcingTerm::zero(2),
            0.0,
            100.0,
            None,
        )
        .unwrap();
        let topts = TraceOptions {
            n_seeds: 6,
            seed: 11,
            output_step: 0.01,
            ode: opts(),
        };
        let w0 = DMatrix::identity(2, 2);
        let trace = trace_boundary(&spec, &w0, 1.0, 150.0, &topts).unwrap();
        assert_eq!(trace.escaped, 0);
        assert!(trace.loop_drift < 0.05, "{}", trace.loop_drift);
        let again = trace_boundary(&spec, &w0, 1.0, 150.0, &topts).unwrap();
        assert_eq!(trace, again);
        let inner = sample_ellipsoid(&w0, 0.5, 50, SampleMode::Volume, 2).unwrap();
        assert_eq!(hull_containment(&trace, &inner.points, 0, 1), 1.0);
    }

    #[test]
    fn hull_of_square() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(hull_contains(&hull, [0.5, 0.5]));
        assert!(hull_contains(&hull, [1.0, 0.5]));
        assert!(!hull_contains(&hull, [1.5, 0.5]));
    }
}
