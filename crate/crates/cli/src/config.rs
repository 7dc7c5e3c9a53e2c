//! JSON run configuration. Every key is optional; missing keys fall back to
//! the bundled data and the defaults of the compute modules. Unknown keys are
//! rejected and every validation message names the offending key path.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nosd_core::asymptotics::KWeighting;
use nosd_core::design::{CostParams, DesignGroupSpec, SwarmConfig};
use nosd_core::estimation::EstimatorSpec;
use nosd_core::simulation::{ContaminantKind, ContaminationSpec};
use nosd_core::tuning::{TuningGrid, TuningMethod};
use nosd_core::TuningParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Simulate,
    Tune,
    Design,
    Gof,
    Cov,
    Influence,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Fit => "fit",
            Self::Simulate => "simulate",
            Self::Tune => "tune",
            Self::Design => "design",
            Self::Gof => "gof",
            Self::Cov => "cov",
            Self::Influence => "influence",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// A configuration problem; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(path: &str, msg: impl fmt::Display) -> Result<T, ConfigError> {
    Err(ConfigError(format!("{path}: {msg}")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    /// Plan JSON `{"groups": [{"n", "nu", "tau"}]}`; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_path: Option<PathBuf>,
    /// `group,failure_time` CSV, or JSON `{"failures": [[...]]}` with interval counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<EstimatorSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<TuningGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<TuningMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contamination: Option<ContaminationSpec>,
    /// True parameters (simulate, design) or the evaluation point (cov, influence).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swarm: Option<SwarmConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<Vec<DesignGroupSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Monte-Carlo replications (simulate).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    /// Bootstrap resamples (fit, gof).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap_reps: Option<usize>,
    /// Confidence level of the Wald intervals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_weighting: Option<KWeighting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    /// Per-iteration CPSO log (design).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// Parses a config document. Structural errors carry the JSON path.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            ConfigError(format!("config: {inner}"))
        } else {
            ConfigError(format!("{path}: {inner}"))
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.plan_path, &mut cfg.data_path, &mut cfg.output_path, &mut cfg.trace_path]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

fn check_tuning(path: &str, t: &TuningParams) -> Result<(), ConfigError> {
    if !t.alpha.is_finite() {
        return err(&format!("{path}.alpha"), format!("must be finite, got {}", t.alpha));
    }
    if !(0.0..=1.0).contains(&t.beta) {
        return err(&format!("{path}.beta"), format!("must lie in [0, 1], got {}", t.beta));
    }
    if !(t.gamma.is_finite() && t.gamma >= 0.0) {
        return err(&format!("{path}.gamma"), format!("must be nonnegative, got {}", t.gamma));
    }
    if t.beta > 0.0 && t.alpha == 0.0 {
        return err(&format!("{path}.alpha"), "must be nonzero when beta > 0");
    }
    Ok(())
}

fn check_positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        err(path, format!("must be positive, got {v}"))
    }
}

fn check_nonnegative(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        err(path, format!("must be nonnegative, got {v}"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(t) = &self.tuning {
            check_tuning("tuning", t)?;
        }
        if let Some(es) = &self.estimators {
            if es.is_empty() {
                return err("estimators", "must not be empty");
            }
            for (k, e) in es.iter().enumerate() {
                if let EstimatorSpec::Mepde { tuning } = e {
                    check_tuning(&format!("estimators[{k}].tuning"), tuning)?;
                }
            }
        }
        if let Some(g) = &self.grid {
            for (name, axis) in [("alphas", &g.alphas), ("betas", &g.betas), ("gammas", &g.gammas)] {
                if axis.is_empty() {
                    return err(&format!("grid.{name}"), "must not be empty");
                }
            }
            for (k, &a) in g.alphas.iter().enumerate() {
                if !a.is_finite() || (a == 0.0 && g.betas.iter().any(|&b| b > 0.0)) {
                    return err(&format!("grid.alphas[{k}]"), format!("must be finite and nonzero, got {a}"));
                }
            }
            for (k, &b) in g.betas.iter().enumerate() {
                if !(0.0..=1.0).contains(&b) {
                    return err(&format!("grid.betas[{k}]"), format!("must lie in [0, 1], got {b}"));
                }
            }
            for (k, &v) in g.gammas.iter().enumerate() {
                check_nonnegative(&format!("grid.gammas[{k}]"), v)?;
            }
        }
        if let Some(c) = &self.contamination {
            if !(0.0..=1.0).contains(&c.epsilon) {
                return err("contamination.epsilon", format!("must lie in [0, 1], got {}", c.epsilon));
            }
            let used = match c.kind {
                ContaminantKind::LinkedWeibull => 3,
                ContaminantKind::PlainWeibull => 2,
            };
            for (k, &v) in c.contaminant_params.iter().take(used).enumerate() {
                check_positive(&format!("contamination.contaminant_params[{k}]"), v)?;
            }
        }
        if let Some(th) = &self.theta {
            for (k, &v) in th.iter().enumerate() {
                check_positive(&format!("theta[{k}]"), v)?;
            }
        }
        if let Some(c) = &self.cost {
            for (name, v) in [("ca", c.ca), ("cu", c.cu), ("c0", c.c0), ("cs", c.cs), ("cv", c.cv)] {
                check_nonnegative(&format!("cost.{name}"), v)?;
            }
            if c.cv >= c.cu {
                return err("cost.cv", "must be below cost.cu");
            }
            if !(c.budget > c.ca) {
                return err("cost.budget", "must exceed cost.ca");
            }
            check_positive("cost.tau_max", c.tau_max)?;
        }
        if let Some(s) = &self.swarm {
            for (name, v) in [("size", s.size), ("max_iter", s.max_iter), ("stall_window", s.stall_window)] {
                if v == 0 {
                    return err(&format!("swarm.{name}"), "must be positive");
                }
            }
            for (name, v) in [("w", s.w), ("c1", s.c1), ("c2", s.c2), ("tol", s.tol)] {
                check_nonnegative(&format!("swarm.{name}"), v)?;
            }
        }
        if let Some(gs) = &self.groups {
            if gs.is_empty() {
                return err("groups", "must not be empty");
            }
            for (i, g) in gs.iter().enumerate() {
                check_positive(&format!("groups[{i}].nu"), g.nu)?;
                if g.n_inspections == 0 {
                    return err(&format!("groups[{i}].n_inspections"), "must be positive");
                }
                if g.n_max == 0 {
                    return err(&format!("groups[{i}].n_max"), "must be positive");
                }
            }
        }
        if self.reps == Some(0) {
            return err("reps", "must be positive");
        }
        if let Some(l) = self.level {
            if !(l > 0.0 && l < 1.0) {
                return err("level", format!("must lie in (0, 1), got {l}"));
            }
        }
        if self.threads == Some(0) {
            return err("threads", "must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let c = parse_config(r#"{"plan_path": "plan.json", "data_path": "data.csv"}"#).unwrap();
        assert_eq!(c.plan_path, Some(PathBuf::from("plan.json")));
        assert!(c.tuning.is_none());
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn out_of_range_beta_names_the_key() {
        let e = parse_config(r#"{"tuning": {"alpha": 1, "beta": 1.5, "gamma": 0.2}}"#).unwrap_err();
        assert!(e.0.starts_with("tuning.beta:"), "{e}");
        let e = parse_config(r#"{"estimators": [{"kind": "mle"}, {"kind": "mepde", "tuning": {"alpha": 1, "beta": 2, "gamma": 0.2}}]}"#)
            .unwrap_err();
        assert!(e.0.starts_with("estimators[1].tuning.beta:"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_paths() {
        let e = parse_config(r#"{"tuning": {"alpha": 1, "beta": 0.5, "gama": 0.2}}"#).unwrap_err();
        assert!(e.0.starts_with("tuning"), "{e}");
        assert!(e.0.contains("gama"));
        let e = parse_config(r#"{"swarm": {"size": 10, "speed": 2}}"#).unwrap_err();
        assert!(e.0.starts_with("swarm"), "{e}");
        let e = parse_config(r#"{"colour": 1}"#).unwrap_err();
        assert!(e.0.contains("colour"));
        let e = parse_config(r#"{"cost": {"ca": 1, "cu": 1, "c0": 1, "cs": 1, "cv": 2, "budget": 10, "tau_max": 1}}"#).unwrap_err();
        assert!(e.0.starts_with("cost.cv"));
    }

    #[test]
    fn round_trip_is_idempotent() {
        let doc = r#"{"command": "design", "seed": 7, "theta": [1.6, 1.1, 2.7],
            "tuning": {"alpha": 0.0, "beta": 0.0, "gamma": 0.3},
            "cost": {"ca": 850, "cu": 120, "c0": 55, "cs": 15, "cv": 50, "budget": 10000, "tau_max": 1},
            "swarm": {"size": 20, "w": 0.3, "c1": 0.5, "c2": 0.5, "max_iter": 500, "tol": 1e-8, "seed": 3},
            "groups": [{"nu": 3, "n_inspections": 3, "n_max": 75}], "format": "json", "k_weighting": "proportional"}"#;
        let a = parse_config(doc).unwrap();
        let b = parse_config(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
