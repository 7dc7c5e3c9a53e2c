//! Data generation, Monte-Carlo studies, the parametric bootstrap and the
//! goodness-of-fit test, plus the bundled light-bulb data set.
//!
//! Randomness comes from one root seed. Replicate `r` draws from ChaCha8
//! stream `r` of that seed, so results do not depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{default_start, interval_index, mle, EstimatorSpec, FitResult, ObservedCounts};
use crate::format::{csv_field, sig9};
use crate::model::{cell_probabilities_unchecked, sample_lifetime_unchecked, GroupPlan, ModelParams, TestPlan};

/// RNG for replicate `stream` under `seed`.
pub fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// How contaminating lifetimes are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminantKind {
    /// Weibull kernel under the same stress link:
    /// `S(t) = exp(-((a* nu^b*) t)^mu*)` with `(a*, b*, mu*)` the contaminant parameters.
    #[default]
    LinkedWeibull,
    /// Stress-free Weibull with shape `params[0]` and scale `params[1]`.
    PlainWeibull,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContaminationSpec {
    pub epsilon: f64,
    #[serde(default = "default_contaminant")]
    pub contaminant_params: [f64; 3],
    #[serde(default)]
    pub kind: ContaminantKind,
}

fn default_contaminant() -> [f64; 3] {
    [1.4, 1.0, 2.6]
}

impl Default for ContaminationSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl ContaminationSpec {
    pub fn clean() -> Self {
        Self::with_epsilon(0.0)
    }

    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            contaminant_params: default_contaminant(),
            kind: ContaminantKind::LinkedWeibull,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Domain(format!("epsilon must lie in [0, 1], got {}", self.epsilon)));
        }
        let used = match self.kind {
            ContaminantKind::LinkedWeibull => &self.contaminant_params[..],
            ContaminantKind::PlainWeibull => &self.contaminant_params[..2],
        };
        if used.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("contaminant parameters must be positive".into()));
        }
        Ok(())
    }

    fn sample(&self, nu: f64, u: f64) -> f64 {
        let [p0, p1, p2] = self.contaminant_params;
        match self.kind {
            ContaminantKind::LinkedWeibull => (-u.ln()).powf(1.0 / p2) / (p0 * nu.powf(p1)),
            ContaminantKind::PlainWeibull => p1 * (-u.ln()).powf(1.0 / p0),
        }
    }
}

fn draw_group(theta: &ModelParams, g: &GroupPlan, spec: &ContaminationSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut f = vec![0u32; g.inspection_times.len()];
    for _ in 0..g.n_units {
        // both draws are always taken so the stream layout does not depend on epsilon
        let c: f64 = rng.gen();
        let u = open_unit(rng);
        let t = if c < spec.epsilon {
            spec.sample(g.stress_rate, u)
        } else {
            sample_lifetime_unchecked(theta, g.stress_rate, u)
        };
        if let Some(j) = interval_index(&g.inspection_times, t) {
            f[j] += 1;
        }
    }
    f
}

fn generate_with(theta: &ModelParams, plan: &TestPlan, spec: &ContaminationSpec, rng: &mut ChaCha8Rng) -> ObservedCounts {
    let failures = plan.groups.iter().map(|g| draw_group(theta, g, spec, rng)).collect();
    ObservedCounts::from_failures(plan, failures).expect("generated counts match the plan")
}

/// Each unit's lifetime comes from the model with probability `1 - epsilon`
/// and from the contaminant otherwise; lifetimes are then tabulated against
/// the group's inspection times. Uses stream 0 of `seed`.
pub fn generate_dataset(theta: &ModelParams, plan: &TestPlan, spec: &ContaminationSpec, seed: u64) -> Result<ObservedCounts> {
    theta.validate()?;
    plan.validate()?;
    spec.validate()?;
    Ok(generate_with(theta, plan, spec, &mut replicate_rng(seed, 0)))
}

/// Multinomial draw of the cell counts at the model cells of `theta`.
fn resample_counts(theta: &ModelParams, plan: &TestPlan, rng: &mut ChaCha8Rng) -> ObservedCounts {
    let p = cell_probabilities_unchecked(theta, plan);
    let cells = p
        .iter()
        .zip(&plan.groups)
        .map(|(pg, g)| {
            let mut c = vec![0.0; pg.len()];
            for _ in 0..g.n_units {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut k = pg.len() - 1;
                for (j, &pj) in pg.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                c[k] += 1.0;
            }
            c
        })
        .collect();
    ObservedCounts::from_cells(plan, cells).expect("resampled counts match the plan")
}

/// Bias, RMSE and RMSE+ of one estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub estimator: String,
    pub reps: usize,
    pub used: usize,
    pub dropped: usize,
    /// `|mean(theta_hat) - theta0|` per parameter.
    pub abs_bias: [f64; 3],
    pub rmse: [f64; 3],
    pub rmse_plus: f64,
    /// More than 20% of the replicates were dropped.
    pub flagged: bool,
}

fn summarize(label: String, reps: usize, estimates: &[[f64; 3]], truth: &[f64; 3]) -> McReport {
    let used = estimates.len();
    let mut abs_bias = [f64::NAN; 3];
    let mut rmse = [f64::NAN; 3];
    if used > 0 {
        for l in 0..3 {
            let mean = estimates.iter().map(|e| e[l]).sum::<f64>() / used as f64;
            let mse = estimates.iter().map(|e| (e[l] - truth[l]).powi(2)).sum::<f64>() / used as f64;
            abs_bias[l] = (mean - truth[l]).abs();
            rmse[l] = mse.sqrt();
        }
    }
    let dropped = reps - used;
    McReport {
        estimator: label,
        reps,
        used,
        dropped,
        abs_bias,
        rmse,
        rmse_plus: rmse.iter().sum(),
        flagged: dropped as f64 > 0.2 * reps as f64,
    }
}

fn usable(fit: &Result<FitResult>) -> Option<[f64; 3]> {
    match fit {
        Ok(f) if f.converged && f.theta_hat.to_array().iter().all(|v| v.is_finite()) => Some(f.theta_hat.to_array()),
        _ => None,
    }
}

/// Estimates of every estimator on every replicate (`None` for dropped fits).
/// The MLE is started at `theta0`; minimum-EPD fits start at that MLE.
pub fn simulate_estimates(
    theta0: &ModelParams,
    plan: &TestPlan,
    spec: &ContaminationSpec,
    estimators: &[EstimatorSpec],
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<Option<[f64; 3]>>>> {
    theta0.validate()?;
    plan.validate()?;
    spec.validate()?;
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    Ok((0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let counts = generate_with(theta0, plan, spec, &mut replicate_rng(seed, r));
            fit_all(&counts, plan, estimators, theta0)
        })
        .collect())
}

fn fit_all(counts: &ObservedCounts, plan: &TestPlan, estimators: &[EstimatorSpec], start: &ModelParams) -> Vec<Option<[f64; 3]>> {
    let pilot = mle(counts, plan, start);
    let warm = pilot.as_ref().map_or(*start, |f| f.theta_hat);
    estimators
        .iter()
        .map(|e| match e {
            EstimatorSpec::Mle => usable(&pilot),
            EstimatorSpec::Mepde { .. } => usable(&e.fit(counts, plan, &warm)),
        })
        .collect()
}

/// Monte-Carlo study: bias, RMSE and RMSE+ against `theta0` for each estimator.
/// Failed or non-converged fits are dropped and counted.
pub fn run_simulation(
    theta0: &ModelParams,
    plan: &TestPlan,
    spec: &ContaminationSpec,
    estimators: &[EstimatorSpec],
    reps: usize,
    seed: u64,
) -> Result<Vec<McReport>> {
    let est = simulate_estimates(theta0, plan, spec, estimators, reps, seed)?;
    let truth = theta0.to_array();
    Ok(estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let ok: Vec<[f64; 3]> = est.iter().filter_map(|row| row[k]).collect();
            summarize(e.label(), reps, &ok, &truth)
        })
        .collect())
}

/// CSV rows `estimator,param,bias,rmse` (bias signed-free, i.e. absolute).
pub fn mc_report_csv(reports: &[McReport]) -> String {
    let mut s = String::from("estimator,param,bias,rmse\n");
    for r in reports {
        for (l, name) in ["a", "b", "mu"].iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", csv_field(&r.estimator), name, sig9(r.abs_bias[l]), sig9(r.rmse[l])));
        }
        s.push_str(&format!("{},rmse_plus,,{}\n", csv_field(&r.estimator), sig9(r.rmse_plus)));
    }
    s
}

/// Parametric bootstrap summary around the original estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapReport {
    pub estimator: String,
    pub theta_hat: [f64; 3],
    /// `mean(theta*) - theta_hat`.
    pub bias: [f64; 3],
    pub rmse: [f64; 3],
    pub rmse_plus: f64,
    /// 2.5% and 97.5% percentiles of `theta*`.
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub used: usize,
    pub dropped: usize,
}

fn percentile(sorted: &[f64], prob: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn fit_from(spec: &EstimatorSpec, counts: &ObservedCounts, plan: &TestPlan, start: &ModelParams) -> Result<FitResult> {
    match spec {
        EstimatorSpec::Mle => mle(counts, plan, start),
        EstimatorSpec::Mepde { .. } => {
            let warm = mle(counts, plan, start)?.theta_hat;
            spec.fit(counts, plan, &warm)
        }
    }
}

/// Fits `estimator` to `counts` (MLE from the default start, minimum-EPD from
/// that MLE), then refits on `b_reps` multinomial resamples drawn at the estimate.
pub fn bootstrap(
    counts: &ObservedCounts,
    plan: &TestPlan,
    estimator: &EstimatorSpec,
    b_reps: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    if b_reps == 0 {
        return Err(Error::InvalidInput("bootstrap needs at least one replicate".into()));
    }
    let fit = fit_from(estimator, counts, plan, &default_start())?;
    let theta_hat = fit.theta_hat;
    let stars: Vec<Option<[f64; 3]>> = (0..b_reps as u64)
        .into_par_iter()
        .map(|b| {
            let c = resample_counts(&theta_hat, plan, &mut replicate_rng(seed, b));
            usable(&fit_from(estimator, &c, plan, &theta_hat))
        })
        .collect();
    let ok: Vec<[f64; 3]> = stars.into_iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::AllFitsFailed);
    }
    let th = theta_hat.to_array();
    let n = ok.len() as f64;
    let mut bias = [0.0; 3];
    let mut rmse = [0.0; 3];
    let mut lower = [0.0; 3];
    let mut upper = [0.0; 3];
    for l in 0..3 {
        let mut v: Vec<f64> = ok.iter().map(|e| e[l]).collect();
        bias[l] = v.iter().sum::<f64>() / n - th[l];
        rmse[l] = (v.iter().map(|x| (x - th[l]).powi(2)).sum::<f64>() / n).sqrt();
        v.sort_by(f64::total_cmp);
        lower[l] = percentile(&v, 0.025);
        upper[l] = percentile(&v, 0.975);
    }
    Ok(BootstrapReport {
        estimator: estimator.label(),
        theta_hat: th,
        bias,
        rmse,
        rmse_plus: rmse.iter().sum(),
        lower,
        upper,
        used: ok.len(),
        dropped: b_reps - ok.len(),
    })
}

/// `TS = sum_i sum_j |n_ij - N_i p_ij| / (N_i p_ij)` over every cell,
/// survivors included.
pub fn gof_statistic(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<f64> {
    let p = cell_probabilities_unchecked(theta, plan);
    let mut ts = 0.0;
    for (i, ((pg, cg), g)) in p.iter().zip(counts.cells()).zip(&plan.groups).enumerate() {
        for (j, (&pij, &nij)) in pg.iter().zip(cg).enumerate() {
            let expected = f64::from(g.n_units) * pij;
            if !(expected > 0.0) {
                return Err(Error::ZeroExpectedCount { group: i, cell: j });
            }
            ts += (nij - expected).abs() / expected;
        }
    }
    Ok(ts)
}

/// Fraction of bootstrap statistics at least as large as the observed one.
pub fn bootstrap_p_value(ts_obs: f64, ts_star: &[f64]) -> f64 {
    if ts_star.is_empty() {
        return f64::NAN;
    }
    ts_star.iter().filter(|&&t| t >= ts_obs).count() as f64 / ts_star.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GofReport {
    pub ts: f64,
    pub p_value: f64,
    pub theta_hat: [f64; 3],
    pub expected: Vec<Vec<f64>>,
    pub used: usize,
    pub dropped: usize,
}

/// Distance-based goodness-of-fit test at the MLE with a parametric-bootstrap
/// p-value (MLE refitted on every resample).
pub fn gof_test(counts: &ObservedCounts, plan: &TestPlan, b_reps: usize, seed: u64) -> Result<GofReport> {
    let fit = mle(counts, plan, &default_start())?;
    let theta_hat = fit.theta_hat;
    let ts = gof_statistic(&theta_hat, counts, plan)?;
    let stars: Vec<Option<f64>> = (0..b_reps as u64)
        .into_par_iter()
        .map(|b| {
            let c = resample_counts(&theta_hat, plan, &mut replicate_rng(seed, b));
            let f = mle(&c, plan, &theta_hat).ok().filter(|f| f.converged)?;
            gof_statistic(&f.theta_hat, &c, plan).ok()
        })
        .collect();
    let ok: Vec<f64> = stars.into_iter().flatten().collect();
    let p = cell_probabilities_unchecked(&theta_hat, plan);
    let expected = p
        .iter()
        .zip(&plan.groups)
        .map(|(pg, g)| pg.iter().map(|v| v * f64::from(g.n_units)).collect())
        .collect();
    Ok(GofReport {
        ts,
        p_value: if b_reps == 0 { f64::NAN } else { bootstrap_p_value(ts, &ok) },
        theta_hat: theta_hat.to_array(),
        expected,
        used: ok.len(),
        dropped: b_reps - ok.len(),
    })
}

/// Light-bulb failure times, already rescaled (times x 0.01).
pub const LIGHTBULBS_CSV: &str = include_str!("../data/lightbulbs.csv");
/// Plan for the light-bulb data (stress rates x 0.1).
pub const LIGHTBULBS_PLAN_JSON: &str = include_str!("../data/lightbulbs_plan.json");

/// Parses `group,failure_time` rows (groups numbered from 1).
pub fn parse_lifetimes_csv(text: &str, n_groups: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); n_groups];
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = || Error::InvalidInput(format!("line {}: expected `group,failure_time`, got {line:?}", line_no + 1));
        let (g, t) = line.split_once(',').ok_or_else(bad)?;
        let g: usize = g.trim().parse().map_err(|_| bad())?;
        let t: f64 = t.trim().parse().map_err(|_| bad())?;
        if g == 0 || g > n_groups {
            return Err(Error::InvalidInput(format!("line {}: group {g} not in the plan", line_no + 1)));
        }
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::InvalidInput(format!("line {}: failure time must be positive", line_no + 1)));
        }
        out[g - 1].push(t);
    }
    Ok(out)
}

pub fn lightbulb_plan() -> TestPlan {
    serde_json::from_str::<TestPlan>(LIGHTBULBS_PLAN_JSON).expect("bundled plan parses")
}

pub fn lightbulb_lifetimes() -> Vec<Vec<f64>> {
    parse_lifetimes_csv(LIGHTBULBS_CSV, 2).expect("bundled data parses")
}

pub fn lightbulb_counts() -> ObservedCounts {
    ObservedCounts::from_lifetimes(&lightbulb_plan(), &lightbulb_lifetimes()).expect("bundled data matches its plan")
}

/// True parameters of the simulation layout.
pub const REFERENCE_THETA: [f64; 3] = [1.6, 1.1, 2.7];

/// Three groups of 20/25/30 units at stress rates 3/8/10.
pub fn reference_plan() -> TestPlan {
    TestPlan::new(vec![
        GroupPlan::new(20, 3.0, vec![0.4, 0.5, 0.7]),
        GroupPlan::new(25, 8.0, vec![0.2, 0.4, 0.8]),
        GroupPlan::new(30, 10.0, vec![0.2, 0.3, 0.5]),
    ])
    .expect("static plan is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta0() -> ModelParams {
        ModelParams::from_array(REFERENCE_THETA).unwrap()
    }

    #[test]
    fn bundled_data_shape() {
        let lt = lightbulb_lifetimes();
        assert_eq!(lt[0].len(), 62);
        assert_eq!(lt[1].len(), 61);
        let c = lightbulb_counts();
        assert_eq!(c.group_total(0), 62.0);
        assert!(c.is_integral());
    }

    #[test]
    fn parse_errors() {
        assert!(parse_lifetimes_csv("group,failure_time\n3,0.1\n", 2).is_err());
        assert!(parse_lifetimes_csv("group,failure_time\n1,abc\n", 2).is_err());
        assert!(parse_lifetimes_csv("group,failure_time\n1,-1\n", 2).is_err());
    }

    #[test]
    fn same_seed_same_counts() {
        let spec = ContaminationSpec::with_epsilon(0.2);
        let a = generate_dataset(&theta0(), &reference_plan(), &spec, 9).unwrap();
        let b = generate_dataset(&theta0(), &reference_plan(), &spec, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&theta0(), &reference_plan(), &spec, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn contaminant_samplers_invert_their_survival() {
        let spec = ContaminationSpec::with_epsilon(1.0);
        let t = spec.sample(3.0, 0.3);
        let s = (-(1.4 * 3.0 * t).powf(2.6)).exp();
        assert!((s - 0.3).abs() < 1e-12);
        let plain = ContaminationSpec {
            kind: ContaminantKind::PlainWeibull,
            ..spec
        };
        let t = plain.sample(3.0, 0.3);
        assert!(((-t.powf(1.4)).exp() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_rep_rmse_equals_bias() {
        let r = run_simulation(&theta0(), &reference_plan(), &ContaminationSpec::clean(), &[EstimatorSpec::Mle], 1, 3).unwrap();
        assert_eq!(r[0].used, 1);
        for l in 0..3 {
            assert!((r[0].rmse[l] - r[0].abs_bias[l]).abs() <= 1e-15 * r[0].rmse[l].max(1.0));
        }
        assert_eq!(r[0].rmse_plus, r[0].rmse.iter().sum::<f64>());
    }

    #[test]
    fn p_value_monotone() {
        let star = [0.5, 1.0, 2.0, 3.0];
        assert_eq!(bootstrap_p_value(0.0, &star), 1.0);
        assert_eq!(bootstrap_p_value(1.5, &star), 0.5);
        assert!(bootstrap_p_value(2.5, &star) <= bootstrap_p_value(1.5, &star));
    }

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 0.125), 1.5);
    }
}
