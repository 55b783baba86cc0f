//! Strict JSON run configuration and the built-in presets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;

use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{ForcingTerm, MatrixFunction, ModelError, Monomial, PolynomialField, SystemSpec, TrigAffineScalar};
use crate::regions::ReductionMode;
use crate::transition::{NormalizationMode, TransitionOptions};
use crate::validate::SampleMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON for the schema at '{path}': {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at '{path}': {message}")]
    Invalid { path: String, message: String },
    #[error("unknown preset '{0}'; valid presets: {names}", names = PRESETS.join(", "))]
    UnknownPreset(String),
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

/// A trig-affine scalar written either as a bare number or as
/// `{"constant": c, "harmonics": [{"amplitude", "frequency", "phase"}]}`.
#[derive(Debug, Clone, PartialEq)]
struct Scalar(TrigAffineScalar);

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ScalarVisitor;

        impl<'de> Visitor<'de> for ScalarVisitor {
            type Value = Scalar;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or an object with 'constant' and 'harmonics'")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Scalar, E> {
                Ok(Scalar(TrigAffineScalar::constant(v)))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Scalar, E> {
                Ok(Scalar(TrigAffineScalar::constant(v as f64)))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Scalar, E> {
                Ok(Scalar(TrigAffineScalar::constant(v as f64)))
            }

            fn visit_map<M: MapAccess<'de>>(self, map: M) -> Result<Scalar, M::Error> {
                TrigAffineScalar::deserialize(de::value::MapAccessDeserializer::new(map)).map(Scalar)
            }
        }

        deserializer.deserialize_any(ScalarVisitor)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonomial {
    coefficient: Scalar,
    exponents: Vec<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(rename = "A")]
    a: Vec<Vec<Scalar>>,
    #[serde(default)]
    f: Option<Vec<Vec<RawMonomial>>>,
    #[serde(rename = "F", default)]
    forcing: Option<Vec<Scalar>>,
    #[serde(default)]
    t0: Option<f64>,
    horizon: f64,
    #[serde(default)]
    omega2_radius: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    rel: Option<f64>,
    abs: Option<f64>,
    output_step: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    t_star_fraction: Option<f64>,
    restarts: Option<usize>,
    window: Option<[f64; 2]>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBounds {
    x0_levels: Option<Vec<f64>>,
    lipschitz_radius: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegions {
    mode: Option<ReductionMode>,
    mu_window: Option<[f64; 2]>,
    trace_horizon: Option<f64>,
    trace_seeds: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValidation {
    samples: Option<usize>,
    seed: Option<u64>,
    rel_slack: Option<f64>,
    sample_mode: Option<SampleMode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: RawSystem,
    #[serde(default)]
    normalization: Option<NormalizationMode>,
    #[serde(default)]
    tolerances: Option<RawTolerances>,
    #[serde(default)]
    analysis: Option<RawAnalysis>,
    #[serde(default)]
    bounds: Option<RawBounds>,
    #[serde(default)]
    regions: Option<RawRegions>,
    #[serde(default)]
    validation: Option<RawValidation>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub t_star_fraction: f64,
    pub restarts: usize,
    /// Reduction window; `None` is the whole horizon.
    pub window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsConfig {
    pub x0_levels: Vec<f64>,
    /// Classical Lipschitz radius; `None` derives `R = κ·X₀` per level.
    pub lipschitz_radius: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionsConfig {
    pub mode: ReductionMode,
    pub mu_window: Option<[f64; 2]>,
    pub trace_horizon: f64,
    pub trace_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationConfig {
    pub samples: usize,
    pub seed: u64,
    pub rel_slack: f64,
    pub sample_mode: SampleMode,
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// The `system` block as written, echoed into outputs.
    pub system_json: Value,
    pub normalization: NormalizationMode,
    pub tolerances: TransitionOptions,
    pub analysis: AnalysisConfig,
    pub bounds: BoundsConfig,
    pub regions: RegionsConfig,
    pub validation: ValidationConfig,
    pub output_dir: PathBuf,
    /// Every default that was applied, by JSON path.
    pub provenance: BTreeMap<String, Value>,
}

impl RunConfig {
    /// Resolved configuration as JSON; `defaults_applied` lists what was not given explicitly.
    pub fn to_json(&self) -> Value {
        json!({
            "system": self.system_json,
            "normalization": self.normalization,
            "tolerances": {
                "rel": self.tolerances.rel_tol,
                "abs": self.tolerances.abs_tol,
                "output_step": self.tolerances.output_step,
            },
            "analysis": self.analysis,
            "bounds": self.bounds,
            "regions": self.regions,
            "validation": self.validation,
            "output_dir": self.output_dir,
            "defaults_applied": self.provenance,
        })
    }

    pub fn t_star(&self) -> f64 {
        self.system.t0 + self.analysis.t_star_fraction * self.system.horizon
    }

    pub fn window(&self) -> (f64, f64) {
        match self.analysis.window {
            Some([a, b]) => (a, b),
            None => (self.system.t0, self.system.t0 + self.system.horizon),
        }
    }
}

struct Defaults<'a>(&'a mut BTreeMap<String, Value>);

impl Defaults<'_> {
    fn take<T: Serialize + Clone>(&mut self, path: &str, given: Option<T>, default: T) -> T {
        match given {
            Some(v) => v,
            None => {
                self.0.insert(path.to_string(), serde_json::to_value(&default).unwrap_or(Value::Null));
                default
            }
        }
    }
}

pub const DEFAULT_SEED: u64 = 42;

/// Parses and validates a UTF-8 JSON configuration.
pub fn parse_config(text: &[u8]) -> Result<RunConfig, ConfigError> {
    let value: Value = serde_json::from_slice(text).map_err(|e| ConfigError::Schema {
        path: ".".into(),
        message: e.to_string(),
    })?;
    let raw: RawConfig = serde_path_to_error::deserialize(&value).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let system_json = value.get("system").cloned().unwrap_or(Value::Null);

    let mut provenance = BTreeMap::new();
    let mut d = Defaults(&mut provenance);
    let system = build_system(raw.system, &mut d)?;

    let normalization = d.take("normalization", raw.normalization, NormalizationMode::Spectral);
    let tol = raw.tolerances.unwrap_or_default();
    let base = TransitionOptions::default();
    let tolerances = TransitionOptions {
        rel_tol: positive("tolerances.rel", d.take("tolerances.rel", tol.rel, base.rel_tol))?,
        abs_tol: positive("tolerances.abs", d.take("tolerances.abs", tol.abs, base.abs_tol))?,
        output_step: positive("tolerances.output_step", d.take("tolerances.output_step", tol.output_step, base.output_step))?,
    };
    if tolerances.output_step >= system.horizon {
        return Err(invalid("tolerances.output_step", "must be smaller than the horizon"));
    }

    let an = raw.analysis.unwrap_or_default();
    let analysis = AnalysisConfig {
        t_star_fraction: d.take("analysis.t_star_fraction", an.t_star_fraction, 0.1),
        restarts: d.take("analysis.restarts", an.restarts, 8),
        window: an.window,
    };
    if !(0.0..1.0).contains(&analysis.t_star_fraction) {
        return Err(invalid("analysis.t_star_fraction", "must lie in [0, 1)"));
    }
    if analysis.restarts == 0 {
        return Err(invalid("analysis.restarts", "must be >= 1"));
    }
    let t_end = system.t0 + system.horizon;
    check_window("analysis.window", analysis.window, system.t0, t_end)?;

    let b = raw.bounds.unwrap_or_default();
    let bounds = BoundsConfig {
        x0_levels: d.take("bounds.x0_levels", b.x0_levels, vec![0.1]),
        lipschitz_radius: b.lipschitz_radius,
    };
    if bounds.x0_levels.is_empty() || bounds.x0_levels.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(invalid("bounds.x0_levels", "needs at least one positive finite level"));
    }
    match bounds.lipschitz_radius {
        Some(r) => {
            positive("bounds.lipschitz_radius", r)?;
        }
        None => {
            d.0.insert("bounds.lipschitz_radius".into(), json!("kappa * X0 (energy-norm stand-in)"));
        }
    }

    let r = raw.regions.unwrap_or_default();
    let regions = RegionsConfig {
        mode: d.take("regions.mode", r.mode, ReductionMode::Sup),
        mu_window: r.mu_window,
        trace_horizon: positive("regions.trace_horizon", d.take("regions.trace_horizon", r.trace_horizon, system.horizon))?,
        trace_seeds: d.take("regions.trace_seeds", r.trace_seeds, 8),
    };
    check_window("regions.mu_window", regions.mu_window, system.t0, t_end)?;
    if regions.trace_seeds == 0 {
        return Err(invalid("regions.trace_seeds", "must be >= 1"));
    }

    let v = raw.validation.unwrap_or_default();
    let validation = ValidationConfig {
        samples: d.take("validation.samples", v.samples, 100),
        seed: d.take("validation.seed", v.seed, DEFAULT_SEED),
        rel_slack: d.take("validation.rel_slack", v.rel_slack, crate::validate::DEFAULT_REL_SLACK),
        sample_mode: d.take("validation.sample_mode", v.sample_mode, SampleMode::Surface),
    };
    if validation.samples == 0 {
        return Err(invalid("validation.samples", "must be >= 1"));
    }
    if !(validation.rel_slack >= 0.0) {
        return Err(invalid("validation.rel_slack", "must be >= 0"));
    }
    let output_dir = d.take("output_dir", raw.output_dir, PathBuf::from("out"));

    Ok(RunConfig {
        system,
        system_json,
        normalization,
        tolerances,
        analysis,
        bounds,
        regions,
        validation,
        output_dir,
        provenance,
    })
}

fn positive(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(path, format!("must be positive and finite, got {v}")))
    }
}

fn check_window(path: &str, w: Option<[f64; 2]>, t0: f64, t_end: f64) -> Result<(), ConfigError> {
    if let Some([a, b]) = w {
        if !(a < b && a >= t0 && b <= t_end) {
            return Err(invalid(path, format!("window [{a}, {b}] must be increasing and inside [{t0}, {t_end}]")));
        }
    }
    Ok(())
}

fn model_error(path: &str, e: ModelError) -> ConfigError {
    let path = match &e {
        ModelError::ConstantMonomial { component } => format!("{path}[{component}]"),
        _ => path.to_string(),
    };
    ConfigError::Invalid {
        path,
        message: e.to_string(),
    }
}

fn build_system(raw: RawSystem, d: &mut Defaults) -> Result<SystemSpec, ConfigError> {
    let rows: Vec<Vec<TrigAffineScalar>> = raw.a.into_iter().map(|r| r.into_iter().map(|s| s.0).collect()).collect();
    let a = MatrixFunction::from_rows(rows).map_err(|e| model_error("system.A", e))?;
    let n = a.dim();
    let f = match raw.f {
        Some(components) => PolynomialField::new(
            components
                .into_iter()
                .map(|c| c.into_iter().map(|m| Monomial::new(m.coefficient.0, m.exponents)).collect())
                .collect(),
        )
        .map_err(|e| model_error("system.f", e))?,
        None => {
            d.0.insert("system.f".into(), json!("zero"));
            PolynomialField::zero(n)
        }
    };
    let forcing = match raw.forcing {
        Some(c) => ForcingTerm::new(c.into_iter().map(|s| s.0).collect()).map_err(|e| model_error("system.F", e))?,
        None => {
            d.0.insert("system.F".into(), json!("zero"));
            ForcingTerm::zero(n)
        }
    };
    let t0 = d.take("system.t0", raw.t0, 0.0);
    SystemSpec::new(a, f, forcing, t0, raw.horizon, raw.omega2_radius).map_err(|e| model_error("system", e))
}

pub const PRESETS: [&str; 8] = ["fig1", "fig2_1", "fig2_2", "fig4_1", "fig4_2", "fig4_3", "fig5", "fig6"];

/// Parameters of the forced oscillator family
/// `ẋ₁ = x₂`, `ẋ₂ = −(ω₀² + a₁ sin r₁t + a₂ sin r₂t)x₁ − α₁x₂ − α₂·(x₂³ or x₁³) + a sin ω₂t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OscillatorParams {
    pub omega0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub omega2: f64,
    pub a1: f64,
    pub a2: f64,
    pub r1: f64,
    pub r2: f64,
    pub a: f64,
    /// Cubic acts on `x₁` (Duffing-like) instead of `x₂` (Van der Pol-like).
    pub duffing: bool,
}

impl OscillatorParams {
    const FIG2: Self = Self {
        omega0: 2.0,
        alpha1: 0.2,
        alpha2: 0.1,
        omega2: 2.0 * PI,
        a1: 0.5,
        a2: 0.5,
        r1: PI,
        r2: 7.0,
        a: 0.0,
        duffing: false,
    };

    const FIG4: Self = Self {
        alpha2: -0.05,
        r1: 3.2 * PI,
        r2: 13.0,
        a1: 0.1,
        a2: 0.1,
        ..Self::FIG2
    };

    /// JSON `system` block for this oscillator.
    pub fn system_json(&self, horizon: f64) -> Value {
        let harmonic = |amp: f64, freq: f64| json!({"amplitude": amp, "frequency": freq, "phase": 0.0});
        let mut stiffness = vec![];
        for (amp, freq) in [(self.a1, self.r1), (self.a2, self.r2)] {
            if amp != 0.0 {
                stiffness.push(harmonic(-amp, freq));
            }
        }
        let exps = if self.duffing { [3, 0] } else { [0, 3] };
        let forcing = if self.a != 0.0 {
            json!({"constant": 0.0, "harmonics": [harmonic(self.a, self.omega2)]})
        } else {
            json!(0.0)
        };
        json!({
            "A": [[0.0, 1.0], [{"constant": -self.omega0 * self.omega0, "harmonics": stiffness}, -self.alpha1]],
            "f": [[], [{"coefficient": -self.alpha2, "exponents": exps}]],
            "F": [0.0, forcing],
            "t0": 0.0,
            "horizon": horizon,
        })
    }
}

/// Oscillator parameters behind each preset.
pub fn preset_params(name: &str) -> Result<OscillatorParams, ConfigError> {
    let p = OscillatorParams::FIG2;
    let q = OscillatorParams::FIG4;
    Ok(match name {
        "fig1" | "fig2_1" => p,
        "fig2_2" => OscillatorParams { a: 0.01, ..p },
        "fig4_1" => q,
        "fig4_2" => OscillatorParams { a1: 5.0, a2: 5.0, ..q },
        "fig4_3" => OscillatorParams { a1: 5.0, a2: 5.0, a: 0.3, ..q },
        "fig5" => OscillatorParams { a1: 5.0, a2: 5.0, ..q },
        "fig6" => OscillatorParams { duffing: true, ..p },
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    })
}

/// Full configuration JSON of a preset.
pub fn preset_json(name: &str) -> Result<Value, ConfigError> {
    let params = preset_params(name)?;
    let (horizon, levels, mode): (f64, Vec<f64>, &str) = match name {
        "fig1" => (200.0, vec![0.25], "sup"),
        "fig2_1" | "fig2_2" => (50.0, vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4], "sup"),
        "fig4_1" => (200.0, vec![0.3], "sup"),
        "fig4_2" | "fig4_3" => (200.0, vec![0.1], "avg"),
        "fig5" => (200.0, vec![0.1], "avg"),
        "fig6" => (50.0, vec![0.4], "sup"),
        _ => unreachable!("preset_params validated the name"),
    };
    Ok(json!({
        "system": params.system_json(horizon),
        "normalization": "spectral",
        "bounds": {"x0_levels": levels},
        "regions": {"mode": mode},
        "output_dir": format!("out/{name}"),
    }))
}

pub fn preset_config(name: &str) -> Result<RunConfig, ConfigError> {
    let v = preset_json(name)?;
    parse_config(v.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"system": {"A": [[0, 1], [-4, -0.2]], "horizon": 10}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL.as_bytes()).unwrap();
        assert_eq!(c.system.dim(), 2);
        assert!(c.system.f.components().iter().all(|m| m.is_empty()));
        assert_eq!(c.normalization, NormalizationMode::Spectral);
        assert_eq!(c.validation.seed, DEFAULT_SEED);
        for key in [
            "tolerances.rel",
            "validation.seed",
            "analysis.restarts",
            "system.F",
            "system.f",
            "regions.mode",
            "bounds.lipschitz_radius",
        ] {
            assert!(c.provenance.contains_key(key), "{key}");
        }
        let echoed = c.to_json();
        assert_eq!(echoed["tolerances"]["rel"], json!(1e-10));
        assert_eq!(echoed["tolerances"]["abs"], json!(1e-16));
        assert!(echoed["defaults_applied"].get("validation.samples").is_some());
    }

    #[test]
    fn constant_monomial_rejected() {
        let text = r#"{"system": {"A": [[0, 1], [-4, -0.2]], "horizon": 10,
            "f": [[], [{"coefficient": 1, "exponents": [0, 0]}]]}}"#;
        let err = parse_config(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("system.f"), "{msg}");
        assert!(msg.contains("f(t, 0) = 0"), "{msg}");
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let text = r#"{"system": {"A": [[0, 1], [-4, -0.2]], "horizon": 10}, "tolerances": {"rell": 1e-8}}"#;
        let msg = parse_config(text.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("tolerances"), "{msg}");
        assert!(msg.contains("rell"), "{msg}");
        let text = r#"{"system": {"A": [[0, {"constant": 1, "harmonic": []}], [-4, -0.2]], "horizon": 10}}"#;
        let msg = parse_config(text.as_bytes()).unwrap_err().to_string();
        assert!(msg.contains("system.A[0][1]"), "{msg}");
    }

    #[test]
    fn bad_values_rejected() {
        for (text, path) in [
            (r#"{"system": {"A": [[-1]], "horizon": 10}, "tolerances": {"rel": 0}}"#, "tolerances.rel"),
            (r#"{"system": {"A": [[-1]], "horizon": 10}, "bounds": {"x0_levels": [-1]}}"#, "bounds.x0_levels"),
            (r#"{"system": {"A": [[-1]], "horizon": 10}, "analysis": {"window": [5, 20]}}"#, "analysis.window"),
            (r#"{"system": {"A": [[-1, 0]], "horizon": 10}}"#, "system.A"),
            (r#"{"system": {"A": [[-1]], "horizon": -1}}"#, "system"),
        ] {
            let msg = parse_config(text.as_bytes()).unwrap_err().to_string();
            assert!(msg.contains(path), "{path}: {msg}");
        }
        assert!(parse_config(b"not json").is_err());
    }

    #[test]
    fn fig2_1_preset_parameters() {
        let p = preset_params("fig2_1").unwrap();
        assert_eq!((p.omega0, p.alpha1, p.alpha2), (2.0, 0.2, 0.1));
        assert_eq!((p.omega2, p.a1, p.a2, p.r1, p.r2, p.a), (2.0 * PI, 0.5, 0.5, PI, 7.0, 0.0));
        let c = preset_config("fig2_1").unwrap();
        let a = c.system.a.entry(1, 0);
        assert_eq!(a.constant, -4.0);
        assert_eq!(a.harmonics.len(), 2);
        assert_eq!(c.system.a.entry(1, 1).constant, -0.2);
        assert!(c.system.forcing.is_zero());
        assert_eq!(preset_config("fig2_2").unwrap().system.forcing.amplitude_hat(), 0.01);
    }

    #[test]
    fn every_preset_parses() {
        for name in PRESETS {
            preset_config(name).unwrap();
        }
        let msg = preset_config("fig3").unwrap_err().to_string();
        assert!(msg.contains("fig2_1") && msg.contains("fig6"), "{msg}");
    }
}
