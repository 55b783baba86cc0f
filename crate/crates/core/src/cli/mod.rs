//! Command-line front end: configuration, dispatch and the run manifest.

pub mod config;
pub mod output;
pub mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::regions::ReductionMode;
use crate::transition::NormalizationMode;
use config::{parse_config, preset_config, ConfigError, RunConfig};
use output::write_json;
use pipeline::{PipelineError, Written};

#[derive(Debug, Parser)]
#[command(name = "normbound", version, about = "Norm bounds and stability regions for time-varying nonlinear ODEs")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Built-in parameter set used when no config is given.
    #[arg(long, global = true, value_name = "NAME")]
    pub preset: Option<String>,
    /// Output directory (overrides the config).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Random seed for ellipsoid sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Integration tolerances `REL` or `REL,ABS`.
    #[arg(long, global = true, value_name = "REL[,ABS]")]
    pub tol: Option<String>,
    /// Autonomous reduction mode.
    #[arg(long, global = true, value_name = "sup|avg")]
    pub mode: Option<ReductionMode>,
    /// Normalization of `W(t₀)`.
    #[arg(long, global = true, value_name = "identity|spectral")]
    pub normalization: Option<NormalizationMode>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fundamental matrix, p(t), k(t) and exponent estimates.
    Analyze,
    /// Linear, nonlinear and autonomous auxiliary bound curves.
    Bound,
    /// Decay criteria next to the classical ones.
    Criteria,
    /// Fixed points of the autonomous reduction and region certificates.
    Regions,
    /// Monte-Carlo check of the nonlinear bound; exit code 3 on violation.
    Validate,
    /// Reverse-time trajectories from the certified region.
    TraceBoundary,
    /// Run the full pipeline of one figure preset.
    Reproduce {
        /// fig1, fig2_1, fig2_2, fig4_1, fig4_2, fig4_3, fig5 or fig6.
        name: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Analyze => "analyze",
            Self::Bound => "bound",
            Self::Criteria => "criteria",
            Self::Regions => "regions",
            Self::Validate => "validate",
            Self::TraceBoundary => "trace-boundary",
            Self::Reproduce { .. } => "reproduce",
        }
    }
}

fn usage(path: &str, message: impl Into<String>) -> PipelineError {
    ConfigError::Invalid {
        path: path.into(),
        message: message.into(),
    }
    .into()
}

fn parse_tol(text: &str) -> Result<(f64, Option<f64>), PipelineError> {
    let mut parts = text.split(',');
    let parse = |s: Option<&str>| -> Result<Option<f64>, PipelineError> {
        s.map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| *v > 0.0 && v.is_finite())
                .ok_or_else(|| usage("--tol", format!("'{s}' is not a positive number")))
        })
        .transpose()
    };
    let rel = parse(parts.next())?.ok_or_else(|| usage("--tol", "missing REL"))?;
    let abs = parse(parts.next())?;
    if parts.next().is_some() {
        return Err(usage("--tol", "expected REL or REL,ABS"));
    }
    Ok((rel, abs))
}

impl Cli {
    fn base_config(&self) -> Result<(RunConfig, Option<String>), PipelineError> {
        let preset = match &self.command {
            Command::Reproduce { name } => Some(name.clone()),
            _ => self.preset.clone(),
        };
        match (&self.config, &preset) {
            (Some(path), _) => {
                let text = fs::read(path).map_err(|source| output::OutputError {
                    path: path.clone(),
                    source,
                })?;
                Ok((parse_config(&text)?, preset))
            }
            (None, Some(name)) => Ok((preset_config(name)?, preset)),
            (None, None) => Err(usage("--config", "either --config or --preset is required")),
        }
    }

    /// Configuration with command-line overrides applied and recorded.
    pub fn resolve(&self) -> Result<(RunConfig, Option<String>, Value), PipelineError> {
        let (mut cfg, preset) = self.base_config()?;
        let mut overrides = serde_json::Map::new();
        if let Some(dir) = &self.out {
            cfg.output_dir = dir.clone();
            overrides.insert("output_dir".into(), json!(dir));
        }
        if let Some(seed) = self.seed {
            cfg.validation.seed = seed;
            overrides.insert("validation.seed".into(), json!(seed));
        }
        if let Some(text) = &self.tol {
            let (rel, abs) = parse_tol(text)?;
            cfg.tolerances.rel_tol = rel;
            overrides.insert("tolerances.rel".into(), json!(rel));
            if let Some(abs) = abs {
                cfg.tolerances.abs_tol = abs;
                overrides.insert("tolerances.abs".into(), json!(abs));
            }
        }
        if let Some(mode) = self.mode {
            cfg.regions.mode = mode;
            overrides.insert("regions.mode".into(), json!(mode));
        }
        if let Some(n) = self.normalization {
            cfg.normalization = n;
            overrides.insert("normalization".into(), json!(n));
        }
        for key in overrides.keys() {
            cfg.provenance.remove(key);
        }
        Ok((cfg, preset, Value::Object(overrides)))
    }
}

/// SHA-256 of the canonical resolved configuration, excluding where outputs go.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut v = cfg.to_json();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("defaults_applied");
        obj.remove("output_dir");
    }
    // serde_json maps are ordered by key, so the serialization is canonical
    let digest = Sha256::digest(v.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    dir: &Path,
    cli: &Cli,
    cfg: &RunConfig,
    preset: Option<&str>,
    overrides: &Value,
    written: &Written,
    status: &str,
) -> Result<(), PipelineError> {
    let manifest = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": cli.command.name(),
        "preset": preset,
        "config_sha256": config_hash(cfg),
        "seed": cfg.validation.seed,
        "config": cfg.to_json(),
        "overrides": overrides,
        "files": written,
        "status": status,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}

/// Runs one parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let (cfg, preset, overrides) = cli.resolve()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|source| output::OutputError {
        path: dir.clone(),
        source,
    })?;
    let mut written = Written::new();
    let result = dispatch(cli, &cfg, preset.as_deref(), &dir, &mut written);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    write_manifest(&dir, cli, &cfg, preset.as_deref(), &overrides, &written, &status)?;
    result
}

fn dispatch(cli: &Cli, cfg: &RunConfig, preset: Option<&str>, dir: &Path, written: &mut Written) -> Result<(), PipelineError> {
    use pipeline::*;
    match &cli.command {
        Command::Reproduce { name } => reproduce(name, cfg, dir, written),
        Command::Analyze => write_analysis(dir, &analyze(cfg)?, written),
        Command::Bound => {
            let analysis = analyze(cfg)?;
            write_bounds(dir, &bound_levels(cfg, &analysis)?, written)
        }
        Command::Criteria => {
            let report = criteria(cfg, &analyze(cfg)?)?;
            written.push("criteria.json".into());
            Ok(write_json(&dir.join("criteria.json"), &report)?)
        }
        Command::Regions => {
            let report = regions(cfg, &analyze(cfg)?)?;
            written.push("regions.json".into());
            Ok(write_json(&dir.join("regions.json"), &report)?)
        }
        Command::Validate => {
            let analysis = analyze(cfg)?;
            let report = run_validate(cfg, &analysis, dir, written)?;
            violation_error(&report)
        }
        Command::TraceBoundary => {
            let analysis = analyze(cfg)?;
            let report = regions(cfg, &analysis)?;
            let hint = report.certified_level().unwrap_or_else(|| primary_level(cfg));
            log::info!("tracing from level {hint} ({})", preset.unwrap_or("config"));
            let t = trace(cfg, &analysis, hint)?;
            let hull = trace_hull(cfg, &analysis, &t, hint);
            write_trace(dir, &t, hint, hull, written)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("normbound").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn tol_flag_parses() {
        assert_eq!(parse_tol("1e-8").unwrap(), (1e-8, None));
        assert_eq!(parse_tol("1e-8,1e-11").unwrap(), (1e-8, Some(1e-11)));
        assert!(parse_tol("0").is_err());
        assert!(parse_tol("1e-8,x").is_err());
        assert!(parse_tol("1,2,3").is_err());
    }

    #[test]
    fn flags_override_and_are_recorded() {
        let c = cli(&["--preset", "fig4_2", "--seed", "7", "--tol", "1e-9,1e-11", "--mode", "sup", "analyze"]);
        let (cfg, preset, overrides) = c.resolve().unwrap();
        assert_eq!(preset.as_deref(), Some("fig4_2"));
        assert_eq!(cfg.validation.seed, 7);
        assert_eq!(cfg.tolerances.rel_tol, 1e-9);
        assert_eq!(cfg.tolerances.abs_tol, 1e-11);
        assert_eq!(cfg.regions.mode, ReductionMode::Sup);
        assert_eq!(overrides["validation.seed"], json!(7));
        assert!(!cfg.provenance.contains_key("validation.seed"));
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let err = cli(&["analyze"]).resolve().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = cli(&["reproduce", "fig9"]).resolve().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("fig4_1"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = preset_config("fig2_1").unwrap();
        let b = preset_config("fig2_1").unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = preset_config("fig2_2").unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
        let moved = RunConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(config_hash(&a), config_hash(&moved));
    }
}
