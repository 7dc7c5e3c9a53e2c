//! One function per subcommand. Each returns the rendered primary output plus
//! any side files; nothing is written until every computation has succeeded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nosd_core::asymptotics::{asym_covariance, influence_lattice, wald_intervals, KWeighting, SandwichMatrices};
use nosd_core::design::{cpso, trace_csv, CostParams, DesignGroupSpec, DesignProblem};
use nosd_core::estimation::{default_start, log_likelihood, mle, EstimatorSpec};
use nosd_core::format::{csv_field, sig9};
use nosd_core::simulation::{
    bootstrap, gof_test, lightbulb_counts, lightbulb_plan, mc_report_csv, parse_lifetimes_csv, run_simulation, reference_plan,
    BootstrapReport, ContaminationSpec, McReport, REFERENCE_THETA,
};
use nosd_core::tuning::{scores_csv, select, GridScore, TuningMethod};
use nosd_core::{FitResult, ModelParams, ObservedCounts, TestPlan, TuningParams};
use serde::{Deserialize, Serialize};

use crate::config::{Command, ConfigError, Format, RunConfig};
use crate::output::to_json;

pub const DEFAULT_SIM_REPS: usize = 1000;
pub const DEFAULT_GOF_REPS: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Compute(String),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e)
    }
}

impl From<nosd_core::Error> for RunError {
    fn from(e: nosd_core::Error) -> Self {
        Self::Compute(e.to_string())
    }
}

pub struct Outcome {
    pub primary: String,
    pub side_files: Vec<(PathBuf, String)>,
}

impl Outcome {
    fn only(primary: String) -> Self {
        Self {
            primary,
            side_files: Vec::new(),
        }
    }
}

pub fn default_format(cmd: Command) -> Format {
    match cmd {
        Command::Simulate | Command::Influence => Format::Csv,
        _ => Format::Json,
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Outcome, RunError> {
    let format = cfg.format.unwrap_or_else(|| default_format(cmd));
    match cmd {
        Command::Fit => fit(cfg, format),
        Command::Simulate => simulate(cfg, format),
        Command::Tune => tune(cfg, format),
        Command::Design => design(cfg, format),
        Command::Gof => gof(cfg, format),
        Command::Cov => cov(cfg, format),
        Command::Influence => influence(cfg, format),
    }
}

fn cfg_err(key: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{key}: {msg}"))
}

fn read_file(key: &str, path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| cfg_err(key, format!("{}: {e}", path.display())))
}

fn parse_json_file<T: serde::de::DeserializeOwned>(key: &str, path: &Path) -> Result<T, ConfigError> {
    let text = read_file(key, path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        cfg_err(key, format!("{} at {at}: {}", path.display(), e.into_inner()))
    })
}

fn load_plan(cfg: &RunConfig) -> Result<Option<TestPlan>, ConfigError> {
    let Some(path) = &cfg.plan_path else {
        return Ok(None);
    };
    let plan: TestPlan = parse_json_file("plan_path", path)?;
    plan.validate().map_err(|e| cfg_err("plan_path", e))?;
    Ok(Some(plan))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FailureCounts {
    failures: Vec<Vec<u32>>,
}

/// Plan and counts from the config, or the bundled light-bulb data.
fn load_data(cfg: &RunConfig) -> Result<(TestPlan, ObservedCounts), ConfigError> {
    match (load_plan(cfg)?, &cfg.data_path) {
        (None, None) => Ok((lightbulb_plan(), lightbulb_counts())),
        (Some(_), None) => Err(cfg_err("data_path", "required when plan_path is set")),
        (None, Some(_)) => Err(cfg_err("plan_path", "required when data_path is set")),
        (Some(plan), Some(path)) => {
            let counts = if path.extension().is_some_and(|e| e == "json") {
                let f: FailureCounts = parse_json_file("data_path", path)?;
                ObservedCounts::from_failures(&plan, f.failures)
            } else {
                let text = read_file("data_path", path)?;
                parse_lifetimes_csv(&text, plan.groups.len()).and_then(|l| ObservedCounts::from_lifetimes(&plan, &l))
            }
            .map_err(|e| cfg_err("data_path", e))?;
            Ok((plan, counts))
        }
    }
}

fn theta_from(key: &str, v: [f64; 3]) -> Result<ModelParams, ConfigError> {
    ModelParams::from_array(v).map_err(|e| cfg_err(key, e))
}

/// MLE for `beta = gamma = 0`, i.e. the KL limit.
pub fn kl_tuning() -> TuningParams {
    TuningParams {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
    }
}

fn estimator_tuning(e: &EstimatorSpec) -> TuningParams {
    match e {
        EstimatorSpec::Mle => kl_tuning(),
        EstimatorSpec::Mepde { tuning } => *tuning,
    }
}

/// Configured estimators, else the MLE plus the minimum-EPD estimator at `tuning`.
fn estimators(cfg: &RunConfig) -> Vec<EstimatorSpec> {
    if let Some(es) = &cfg.estimators {
        return es.clone();
    }
    let mut v = vec![EstimatorSpec::Mle];
    if let Some(t) = cfg.tuning {
        v.push(EstimatorSpec::Mepde { tuning: t });
    }
    v
}

fn weighting(cfg: &RunConfig) -> KWeighting {
    cfg.k_weighting.unwrap_or_default()
}

fn seed(cfg: &RunConfig) -> u64 {
    cfg.seed.unwrap_or(0)
}

/// MLE from the default start; minimum-EPD fits warm-started at that MLE.
fn fit_all(counts: &ObservedCounts, plan: &TestPlan, ests: &[EstimatorSpec]) -> Result<Vec<FitResult>, RunError> {
    let pilot = mle(counts, plan, &default_start())?;
    ests.iter()
        .map(|e| match e {
            EstimatorSpec::Mle => Ok(pilot.clone()),
            EstimatorSpec::Mepde { .. } => Ok(e.fit(counts, plan, &pilot.theta_hat)?),
        })
        .collect()
}

#[derive(Serialize)]
struct Interval {
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct FitRow {
    estimator: String,
    tuning: Option<TuningParams>,
    estimate: ModelParams,
    converged: bool,
    iterations: usize,
    objective: f64,
    log_likelihood: f64,
    gradient_norm: f64,
    se: Option<[f64; 3]>,
    ci: Option<[Interval; 3]>,
    /// Why `se`/`ci` are missing, e.g. a singular `J` at a boundary estimate.
    #[serde(skip_serializing_if = "Option::is_none")]
    cov_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap: Option<BootstrapReport>,
}

#[derive(Serialize)]
struct FitReport {
    n_total: u64,
    level: f64,
    k_weighting: KWeighting,
    estimators: Vec<FitRow>,
}

fn intervals(theta: &ModelParams, m: &SandwichMatrices, level: f64) -> Result<[Interval; 3], nosd_core::Error> {
    let ci = wald_intervals(theta, &m.cov, level)?;
    Ok(ci.map(|(lower, upper)| Interval { lower, upper }))
}

fn fit(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let (plan, counts) = load_data(cfg)?;
    let ests = estimators(cfg);
    let level = cfg.level.unwrap_or(DEFAULT_LEVEL);
    let n_total = plan.total_units();
    let fits = fit_all(&counts, &plan, &ests)?;
    let b_reps = cfg.bootstrap_reps.unwrap_or(0);
    let mut rows = Vec::new();
    for (e, f) in ests.iter().zip(fits) {
        let tuning = estimator_tuning(e);
        let (se, ci, cov_error) = match asym_covariance(&f.theta_hat, &plan, &tuning, n_total, weighting(cfg))
            .and_then(|m| Ok((m.std_errors(), intervals(&f.theta_hat, &m, level)?)))
        {
            Ok((se, ci)) => (Some(se), Some(ci), None),
            Err(err) => (None, None, Some(err.to_string())),
        };
        let bootstrap = if b_reps > 0 {
            Some(bootstrap(&counts, &plan, e, b_reps, seed(cfg))?)
        } else {
            None
        };
        rows.push(FitRow {
            estimator: e.label(),
            tuning: matches!(e, EstimatorSpec::Mepde { .. }).then_some(tuning),
            estimate: f.theta_hat,
            converged: f.converged,
            iterations: f.iterations,
            objective: f.objective_value,
            log_likelihood: log_likelihood(&f.theta_hat, &counts, &plan)?,
            gradient_norm: f.gradient_norm,
            se,
            ci,
            cov_error,
            bootstrap,
        });
    }
    let report = FitReport {
        n_total,
        level,
        k_weighting: weighting(cfg),
        estimators: rows,
    };
    Ok(Outcome::only(match format {
        Format::Json => to_json(&report),
        Format::Csv => fit_csv(&report),
    }))
}

fn opt(v: Option<f64>) -> String {
    v.map(sig9).unwrap_or_default()
}

fn fit_csv(r: &FitReport) -> String {
    let mut s = String::from("estimator,param,estimate,se,lower,upper,bt_bias,bt_rmse\n");
    for row in &r.estimators {
        let th = row.estimate.to_array();
        let name = csv_field(&row.estimator);
        for (l, p) in ["a", "b", "mu"].iter().enumerate() {
            let _ = writeln!(
                s,
                "{name},{p},{},{},{},{},{},{}",
                sig9(th[l]),
                opt(row.se.map(|v| v[l])),
                opt(row.ci.as_ref().map(|c| c[l].lower)),
                opt(row.ci.as_ref().map(|c| c[l].upper)),
                opt(row.bootstrap.as_ref().map(|b| b.bias[l])),
                opt(row.bootstrap.as_ref().map(|b| b.rmse[l])),
            );
        }
        if let Some(b) = &row.bootstrap {
            let _ = writeln!(s, "{name},rmse_plus,,,,,,{}", sig9(b.rmse_plus));
        }
    }
    s
}

#[derive(Serialize)]
struct SimReport<'a> {
    theta0: ModelParams,
    contamination: ContaminationSpec,
    reps: usize,
    seed: u64,
    reports: &'a [McReport],
}

fn simulate(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let theta0 = theta_from("theta", cfg.theta.unwrap_or(REFERENCE_THETA))?;
    let plan = load_plan(cfg)?.unwrap_or_else(reference_plan);
    let spec = cfg.contamination.unwrap_or_default();
    let reps = cfg.reps.unwrap_or(DEFAULT_SIM_REPS);
    let reports = run_simulation(&theta0, &plan, &spec, &estimators(cfg), reps, seed(cfg))?;
    Ok(Outcome::only(match format {
        Format::Csv => mc_report_csv(&reports),
        Format::Json => to_json(&SimReport {
            theta0,
            contamination: spec,
            reps,
            seed: seed(cfg),
            reports: &reports,
        }),
    }))
}

#[derive(Serialize)]
struct TuneReport<'a> {
    method: TuningMethod,
    k_weighting: KWeighting,
    tuning: TuningParams,
    estimate: ModelParams,
    score: f64,
    iterations: usize,
    cycled: bool,
    scores: &'a [GridScore],
}

fn tune(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let method = cfg
        .method
        .ok_or_else(|| cfg_err("method", "required for tune (csm, iwj, wj, amax, mae or amed)"))?;
    let (plan, counts) = load_data(cfg)?;
    let grid = cfg.grid.clone().unwrap_or_default();
    let sel = select(method, &counts, &plan, &grid, weighting(cfg))?;
    Ok(Outcome::only(match format {
        Format::Csv => scores_csv(&sel.scores),
        Format::Json => to_json(&TuneReport {
            method,
            k_weighting: weighting(cfg),
            tuning: sel.tuning,
            estimate: sel.theta,
            score: sel.score,
            iterations: sel.iterations,
            cycled: sel.cycled,
            scores: &sel.scores,
        }),
    }))
}

pub fn default_cost() -> CostParams {
    CostParams {
        ca: 850.0,
        cu: 120.0,
        c0: 55.0,
        cs: 15.0,
        cv: 50.0,
        budget: 10000.0,
        tau_max: 1.0,
    }
}

pub fn default_design_groups() -> Vec<DesignGroupSpec> {
    [3.0, 8.0, 10.0]
        .into_iter()
        .map(|nu| DesignGroupSpec {
            nu,
            n_inspections: 3,
            n_max: 75,
        })
        .collect()
}

pub fn default_design_tuning() -> TuningParams {
    TuningParams {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.3,
    }
}

#[derive(Serialize)]
struct DesignReport {
    feasible: bool,
    iterations: usize,
    objective: f64,
    cost: f64,
    violation: f64,
    allocation: Vec<u32>,
    inspection_times: Vec<Vec<f64>>,
    tuning: TuningParams,
    k_weighting: KWeighting,
    seed: u64,
}

fn design(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let problem = DesignProblem {
        theta: theta_from("theta", cfg.theta.unwrap_or(REFERENCE_THETA))?,
        tuning: cfg.tuning.unwrap_or_else(default_design_tuning),
        cost: cfg.cost.unwrap_or_else(default_cost),
        groups: cfg.groups.clone().unwrap_or_else(default_design_groups),
        weighting: weighting(cfg),
    };
    let mut swarm = cfg.swarm.unwrap_or_default();
    if let Some(s) = cfg.seed {
        swarm.seed = s;
    }
    let out = cpso(&problem, &swarm)?;
    let report = DesignReport {
        feasible: out.feasible,
        iterations: out.iterations,
        objective: out.best.objective,
        cost: out.best.cost,
        violation: out.best.violation,
        allocation: out.best.allocation.clone(),
        inspection_times: out.best.inspection_times.clone(),
        tuning: problem.tuning,
        k_weighting: problem.weighting,
        seed: swarm.seed,
    };
    let primary = match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let mut s = String::from("group,nu,n,inspection,tau\n");
            for (i, (g, taus)) in problem.groups.iter().zip(&report.inspection_times).enumerate() {
                for (j, t) in taus.iter().enumerate() {
                    let _ = writeln!(s, "{},{},{},{},{}", i + 1, sig9(g.nu), report.allocation[i], j + 1, sig9(*t));
                }
            }
            s
        }
    };
    let trace_path = cfg.trace_path.clone().or_else(|| {
        cfg.output_path.as_ref().map(|p| {
            let mut os = p.clone().into_os_string();
            os.push(".trace.csv");
            PathBuf::from(os)
        })
    });
    Ok(Outcome {
        primary,
        side_files: trace_path.map(|p| (p, trace_csv(&out.trace))).into_iter().collect(),
    })
}

fn gof(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let (plan, counts) = load_data(cfg)?;
    let b = cfg.bootstrap_reps.unwrap_or(DEFAULT_GOF_REPS);
    let r = gof_test(&counts, &plan, b, seed(cfg))?;
    Ok(Outcome::only(match format {
        Format::Json => to_json(&r),
        Format::Csv => format!("ts,p_value,used,dropped\n{},{},{},{}\n", sig9(r.ts), sig9(r.p_value), r.used, r.dropped),
    }))
}

/// Evaluation point for cov/influence: `theta` from the config, else the fit
/// at `tuning` on the data. Returns the plan the point refers to.
fn evaluation_point(cfg: &RunConfig, tuning: &TuningParams) -> Result<(TestPlan, ModelParams), RunError> {
    if let Some(th) = cfg.theta {
        let plan = load_plan(cfg)?.unwrap_or_else(lightbulb_plan);
        return Ok((plan, theta_from("theta", th)?));
    }
    let (plan, counts) = load_data(cfg)?;
    let est = if *tuning == kl_tuning() {
        EstimatorSpec::Mle
    } else {
        EstimatorSpec::Mepde { tuning: *tuning }
    };
    let f = fit_all(&counts, &plan, &[est])?.remove(0);
    Ok((plan, f.theta_hat))
}

#[derive(Serialize)]
struct CovReport {
    theta: ModelParams,
    tuning: TuningParams,
    k_weighting: KWeighting,
    n_total: u64,
    level: f64,
    j: [[f64; 3]; 3],
    k: [[f64; 3]; 3],
    cov: [[f64; 3]; 3],
    trace: f64,
    se: [f64; 3],
    ci: [Interval; 3],
}

fn cov(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let tuning = cfg.tuning.unwrap_or_else(kl_tuning);
    let (plan, theta) = evaluation_point(cfg, &tuning)?;
    let level = cfg.level.unwrap_or(DEFAULT_LEVEL);
    let n_total = plan.total_units();
    let m = asym_covariance(&theta, &plan, &tuning, n_total, weighting(cfg))?;
    let report = CovReport {
        theta,
        tuning,
        k_weighting: weighting(cfg),
        n_total,
        level,
        trace: m.trace(),
        se: m.std_errors(),
        ci: intervals(&theta, &m, level)?,
        j: m.j_mat,
        k: m.k_mat,
        cov: m.cov,
    };
    Ok(Outcome::only(match format {
        Format::Json => to_json(&report),
        Format::Csv => {
            let th = theta.to_array();
            let mut s = String::from("param,estimate,se,lower,upper\n");
            for (l, p) in ["a", "b", "mu"].iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{p},{},{},{},{}",
                    sig9(th[l]),
                    sig9(report.se[l]),
                    sig9(report.ci[l].lower),
                    sig9(report.ci[l].upper)
                );
            }
            s
        }
    }))
}

#[derive(Serialize)]
struct InfluenceRow {
    /// 1-based outlier cell per group.
    cells: Vec<usize>,
    influence: [f64; 3],
    norm: f64,
}

#[derive(Serialize)]
struct InfluenceReport {
    theta: ModelParams,
    tuning: TuningParams,
    max_norm: f64,
    rows: Vec<InfluenceRow>,
}

fn influence(cfg: &RunConfig, format: Format) -> Result<Outcome, RunError> {
    let tuning = cfg.tuning.unwrap_or_else(kl_tuning);
    let (plan, theta) = evaluation_point(cfg, &tuning)?;
    let lattice = influence_lattice(&theta, &plan, &tuning)?;
    Ok(Outcome::only(match format {
        Format::Csv => nosd_core::asymptotics::influence_csv(&lattice),
        Format::Json => {
            let rows: Vec<InfluenceRow> = lattice
                .iter()
                .map(|(o, v)| InfluenceRow {
                    cells: o.cells.iter().map(|c| c + 1).collect(),
                    influence: *v,
                    norm: v.iter().map(|x| x * x).sum::<f64>().sqrt(),
                })
                .collect();
            to_json(&InfluenceReport {
                theta,
                tuning,
                max_norm: rows.iter().map(|r| r.norm).fold(0.0, f64::max),
                rows,
            })
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_formats() {
        assert_eq!(default_format(Command::Simulate), Format::Csv);
        assert_eq!(default_format(Command::Influence), Format::Csv);
        assert_eq!(default_format(Command::Fit), Format::Json);
    }

    #[test]
    fn estimator_defaults_follow_tuning() {
        let mut cfg = RunConfig::default();
        assert_eq!(estimators(&cfg), vec![EstimatorSpec::Mle]);
        cfg.tuning = Some(TuningParams::new(1.0, 0.5, 0.2).unwrap());
        assert_eq!(estimators(&cfg).len(), 2);
    }

    #[test]
    fn plan_without_data_is_a_config_error() {
        let cfg = RunConfig {
            plan_path: Some(PathBuf::from("/nonexistent/plan.json")),
            ..RunConfig::default()
        };
        let e = load_data(&cfg).unwrap_err();
        assert!(e.0.starts_with("plan_path:"), "{e}");
    }

    #[test]
    fn fit_csv_quotes_labels() {
        let cfg = RunConfig {
            tuning: Some(TuningParams::new(1.0, 0.5, 0.2).unwrap()),
            ..RunConfig::default()
        };
        let out = fit(&cfg, Format::Csv).unwrap();
        assert!(out.primary.lines().any(|l| l.starts_with("\"MEPDE(1,0.5,0.2)\",a,")));
        assert_eq!(out.primary.lines().count(), 7);
    }
}
