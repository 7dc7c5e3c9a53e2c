//! Likelihood and exponential-polynomial divergence (EPD) estimation.
//!
//! The EPD is the Bregman divergence generated by
//!
//! ```text
//! B(x) = (beta/alpha^2)(e^(alpha x) - 1 - alpha x) + ((1-beta)/gamma)(x^(gamma+1) - x)
//! ```
//!
//! between the model cells `p_ij(theta)` and the empirical proportions
//! `q_ij = n_ij / N_i`. `beta = 0` gives the density power divergence,
//! `beta = 1` the Bregman exponential divergence, and `beta = 0, gamma -> 0`
//! the Kullback-Leibler divergence. Groups enter through their proportions
//! only, so the objective is not weighted by `N_i`.

mod solver;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    cell_gradients_unchecked, cell_probabilities_unchecked, CellGradients, ModelParams, TestPlan,
    PROB_FLOOR,
};

pub use solver::{FitOptions, PARAM_LOWER, PARAM_UPPER, VALUE_NOISE};
pub(crate) use solver::{minimize, Objective};

/// `(alpha, beta, gamma)`. `gamma = 0` with `beta < 1` selects the
/// Kullback-Leibler limit of the polynomial part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TuningParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let t = Self { alpha, beta, gamma };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be finite, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Domain(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.beta > 0.0 && self.alpha == 0.0 {
            return Err(Error::Domain("alpha must be nonzero when beta > 0".into()));
        }
        Ok(())
    }

    fn kl_limit(&self) -> bool {
        self.gamma == 0.0
    }

    /// `beta e^(alpha p) + (1-beta)(gamma+1) p^(gamma-1)`, the per-cell weight
    /// shared by the estimating equation, `J`, `K` and the influence function.
    pub fn cell_weight(&self, p: f64) -> f64 {
        let pf = p.max(PROB_FLOOR);
        let exp_part = if self.beta > 0.0 { self.beta * (self.alpha * pf).exp() } else { 0.0 };
        let poly_part = if self.beta < 1.0 {
            (1.0 - self.beta) * (self.gamma + 1.0) * pf.powf(self.gamma - 1.0)
        } else {
            0.0
        };
        exp_part + poly_part
    }

    /// Cell term of the divergence with the parameter-free constant
    /// `((gamma+1)/gamma)(1-beta) q` added back, which keeps small `gamma`
    /// free of the `1/gamma` cancellation. At `gamma = 0` this is the KL limit.
    fn shifted_term(&self, p: f64, q: f64) -> f64 {
        let pf = p.max(PROB_FLOOR);
        let mut v = 0.0;
        if self.beta < 1.0 {
            let poly = if self.kl_limit() {
                pf - q * pf.ln()
            } else {
                let g = self.gamma;
                pf.powf(g + 1.0) - (g + 1.0) * (g * pf.ln()).exp_m1() / g * q
            };
            v += (1.0 - self.beta) * poly;
        }
        if self.beta > 0.0 {
            let a = self.alpha;
            let e = (a * pf).exp();
            v += self.beta / a * e * (pf - 1.0 / a) - self.beta / a * e * q;
        }
        v
    }

    fn shift_constant(&self, q: f64) -> f64 {
        if self.kl_limit() || self.beta >= 1.0 {
            0.0
        } else {
            (self.gamma + 1.0) / self.gamma * (1.0 - self.beta) * q
        }
    }
}

/// Observed cell counts per group: `J_i` interval counts followed by the
/// survivor count. Counts are stored as reals so that expected-count data
/// sets (`N_i p_ij`) can be fed through the same estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedCounts {
    cells: Vec<Vec<f64>>,
}

impl ObservedCounts {
    /// Builds counts from full cell vectors (failures then survivors).
    pub fn from_cells(plan: &TestPlan, cells: Vec<Vec<f64>>) -> Result<Self> {
        plan.validate()?;
        if cells.len() != plan.groups.len() {
            return Err(Error::InvalidInput(format!(
                "counts have {} groups, plan has {}",
                cells.len(),
                plan.groups.len()
            )));
        }
        for (i, (c, g)) in cells.iter().zip(&plan.groups).enumerate() {
            if c.len() != g.n_cells() {
                return Err(Error::InvalidInput(format!(
                    "group {i}: expected {} cells, got {}",
                    g.n_cells(),
                    c.len()
                )));
            }
            if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidInput(format!("group {i}: counts must be nonnegative")));
            }
            let total: f64 = c.iter().sum();
            if (total - f64::from(g.n_units)).abs() > 1e-9 * total.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "group {i}: counts sum to {total}, plan has N = {}",
                    g.n_units
                )));
            }
        }
        Ok(Self { cells })
    }

    /// Builds counts from interval failure counts; survivors are `N_i - n_i`.
    pub fn from_failures(plan: &TestPlan, failures: Vec<Vec<u32>>) -> Result<Self> {
        if failures.len() != plan.groups.len() {
            return Err(Error::InvalidInput("failure counts do not match the plan".into()));
        }
        let mut cells = Vec::with_capacity(failures.len());
        for (i, (f, g)) in failures.into_iter().zip(&plan.groups).enumerate() {
            let n: u32 = f.iter().sum();
            if n > g.n_units {
                return Err(Error::InvalidInput(format!(
                    "group {i}: {n} failures exceed N = {}",
                    g.n_units
                )));
            }
            let mut c: Vec<f64> = f.iter().map(|&v| f64::from(v)).collect();
            c.push(f64::from(g.n_units - n));
            cells.push(c);
        }
        Self::from_cells(plan, cells)
    }

    /// Tabulates lifetimes into `(tau_(j-1), tau_j]` cells; the group sizes
    /// come from the plan, and units without a recorded lifetime inside the
    /// test window count as survivors.
    pub fn from_lifetimes(plan: &TestPlan, lifetimes: &[Vec<f64>]) -> Result<Self> {
        if lifetimes.len() != plan.groups.len() {
            return Err(Error::InvalidInput("lifetimes do not match the plan".into()));
        }
        let mut failures = Vec::with_capacity(lifetimes.len());
        for (i, (ts, g)) in lifetimes.iter().zip(&plan.groups).enumerate() {
            if ts.len() > g.n_units as usize {
                return Err(Error::InvalidInput(format!(
                    "group {i}: {} lifetimes exceed N = {}",
                    ts.len(),
                    g.n_units
                )));
            }
            let mut f = vec![0u32; g.inspection_times.len()];
            for &t in ts {
                if let Some(j) = interval_index(&g.inspection_times, t) {
                    f[j] += 1;
                }
            }
            failures.push(f);
        }
        Self::from_failures(plan, failures)
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    pub fn group_total(&self, i: usize) -> f64 {
        self.cells[i].iter().sum()
    }

    /// `q_ij = n_ij / N_i`, survivor cell last.
    pub fn proportions(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|c| {
                let n: f64 = c.iter().sum();
                c.iter().map(|v| v / n).collect()
            })
            .collect()
    }

    pub fn is_integral(&self) -> bool {
        self.cells.iter().flatten().all(|v| v.fract() == 0.0)
    }

    fn check_plan(&self, plan: &TestPlan) -> Result<()> {
        if self.cells.len() != plan.groups.len()
            || self.cells.iter().zip(&plan.groups).any(|(c, g)| c.len() != g.n_cells())
        {
            return Err(Error::InvalidInput("counts do not match the plan layout".into()));
        }
        Ok(())
    }
}

/// Index of the failure interval `(tau_(j-1), tau_j]` containing `t`, or
/// `None` for a survivor (`t > tau_J`).
pub fn interval_index(tau: &[f64], t: f64) -> Option<usize> {
    let mut lo = 0.0;
    for (j, &hi) in tau.iter().enumerate() {
        if t > lo && t <= hi {
            return Some(j);
        }
        lo = hi;
    }
    None
}

/// Outcome of one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(rename = "theta", with = "theta_array")]
    pub theta_hat: ModelParams,
    #[serde(rename = "objective")]
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    #[serde(rename = "grad_norm")]
    pub gradient_norm: f64,
    /// Objective after each coordinate-descent cycle, starting value first.
    #[serde(skip)]
    pub cycle_objectives: Vec<f64>,
}

mod theta_array {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::model::ModelParams;

    pub fn serialize<S: Serializer>(theta: &ModelParams, s: S) -> Result<S::Ok, S::Error> {
        theta.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ModelParams, D::Error> {
        let v = <[f64; 3]>::deserialize(d)?;
        Ok(ModelParams {
            a: v[0],
            b: v[1],
            mu: v[2],
        })
    }
}

fn params(x: &[f64; 3]) -> Option<ModelParams> {
    if x.iter().all(|v| v.is_finite() && *v > 0.0) {
        Some(ModelParams {
            a: x[0],
            b: x[1],
            mu: x[2],
        })
    } else {
        None
    }
}

/// Convex generator `B(x)` of the divergence; `gamma = 0` uses the
/// `(1-beta) x ln x` limit of the polynomial part.
pub fn generator_b(x: f64, tuning: &TuningParams) -> Result<f64> {
    tuning.validate()?;
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("B(x) is defined on [0, 1], got {x}")));
    }
    let mut v = 0.0;
    if tuning.beta > 0.0 {
        let a = tuning.alpha;
        v += tuning.beta / (a * a) * ((a * x).exp_m1() - a * x);
    }
    if tuning.beta < 1.0 {
        let poly = if tuning.kl_limit() {
            if x == 0.0 {
                0.0
            } else {
                x * x.ln()
            }
        } else {
            (x.powf(tuning.gamma + 1.0) - x) / tuning.gamma
        };
        v += (1.0 - tuning.beta) * poly;
    }
    Ok(v)
}

/// Log-likelihood up to the multinomial coefficient:
/// `sum_i [sum_j n_ij ln p_ij + (N_i - n_i) ln p_is]`.
pub fn log_likelihood(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<f64> {
    theta.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    Ok(log_likelihood_unchecked(theta, counts, plan))
}

fn log_likelihood_unchecked(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> f64 {
    let cells = cell_probabilities_unchecked(theta, plan);
    cells
        .iter()
        .zip(&counts.cells)
        .flat_map(|(p, n)| p.iter().zip(n))
        .filter(|(_, &n)| n > 0.0)
        .map(|(&p, &n)| n * p.max(PROB_FLOOR).ln())
        .sum()
}

/// Gradient of [`log_likelihood`]: `sum n_ij u_ij`.
pub fn log_likelihood_gradient(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<[f64; 3]> {
    theta.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    Ok(ll_gradient_unchecked(theta, counts, plan))
}

fn ll_gradient_unchecked(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> [f64; 3] {
    let cells = cell_probabilities_unchecked(theta, plan);
    let grads = cell_gradients_unchecked(theta, plan);
    let mut g = [0.0; 3];
    for ((p, dp), n) in cells.iter().zip(&grads).zip(&counts.cells) {
        for ((&pij, d), &nij) in p.iter().zip(dp).zip(n) {
            if nij > 0.0 {
                let w = nij / pij.max(PROB_FLOOR);
                for k in 0..3 {
                    g[k] += w * d[k];
                }
            }
        }
    }
    g
}

struct NegLogLikelihood<'a> {
    counts: &'a ObservedCounts,
    plan: &'a TestPlan,
}

impl Objective for NegLogLikelihood<'_> {
    fn value(&self, x: &[f64; 3]) -> f64 {
        params(x).map_or(f64::INFINITY, |th| -log_likelihood_unchecked(&th, self.counts, self.plan))
    }

    fn gradient(&self, x: &[f64; 3]) -> [f64; 3] {
        params(x).map_or([f64::NAN; 3], |th| {
            ll_gradient_unchecked(&th, self.counts, self.plan).map(|v| -v)
        })
    }
}

/// Maximum likelihood estimate. The returned objective is the maximized
/// log-likelihood and the gradient norm is that of the projected gradient.
pub fn mle(counts: &ObservedCounts, plan: &TestPlan, init: &ModelParams) -> Result<FitResult> {
    mle_with(counts, plan, init, &FitOptions::default())
}

pub fn mle_with(counts: &ObservedCounts, plan: &TestPlan, init: &ModelParams, opts: &FitOptions) -> Result<FitResult> {
    init.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    let obj = NegLogLikelihood { counts, plan };
    let out = minimize(&obj, init.to_array(), opts);
    Ok(FitResult {
        theta_hat: params(&out.x).ok_or_else(|| Error::NoConvergence("MLE left the parameter space".into()))?,
        objective_value: -out.value,
        converged: out.converged,
        iterations: out.cycles,
        gradient_norm: out.grad_norm,
        cycle_objectives: out.cycle_values.iter().map(|v| -v).collect(),
    })
}

fn shifted_objective(p_cells: &[Vec<f64>], q: &[Vec<f64>], tuning: &TuningParams) -> f64 {
    p_cells
        .iter()
        .zip(q)
        .flat_map(|(p, q)| p.iter().zip(q))
        .map(|(&p, &q)| tuning.shifted_term(p, q))
        .sum()
}

/// EPD between the model cells and the empirical proportions, with the
/// parameter-free terms dropped:
///
/// ```text
/// sum_i sum_j (1-beta) p^(gamma+1) + (beta/alpha) e^(alpha p)(p - 1/alpha)
///             - {(beta/alpha) e^(alpha p) + ((gamma+1)/gamma)(1-beta) p^gamma} q
/// ```
///
/// For `gamma = 0` the polynomial part is replaced by its KL limit
/// `(1-beta)(p - q ln p)`.
pub fn epd_objective(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan, tuning: &TuningParams) -> Result<f64> {
    theta.validate()?;
    tuning.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    let p = cell_probabilities_unchecked(theta, plan);
    let q = counts.proportions();
    let shift: f64 = q.iter().flatten().map(|&v| tuning.shift_constant(v)).sum();
    Ok(shifted_objective(p.groups(), &q, tuning) - shift)
}

fn residual_from(p: &[Vec<f64>], dp: &CellGradients, q: &[Vec<f64>], tuning: &TuningParams) -> [f64; 3] {
    let mut r = [0.0; 3];
    for ((pi, dpi), qi) in p.iter().zip(dp).zip(q) {
        for ((&pij, d), &qij) in pi.iter().zip(dpi).zip(qi) {
            let w = tuning.cell_weight(pij) * (qij - pij);
            for k in 0..3 {
                r[k] += w * d[k];
            }
        }
    }
    r
}

/// Estimating function of the minimum-EPD estimator,
/// `sum_i sum_j p_ij {(1-beta)(gamma+1) p_ij^(gamma-1) + beta e^(alpha p_ij)} (q_ij - p_ij) u_ij`.
/// It equals minus the gradient of [`epd_objective`].
pub fn epd_estimating_residual(
    theta: &ModelParams,
    counts: &ObservedCounts,
    plan: &TestPlan,
    tuning: &TuningParams,
) -> Result<[f64; 3]> {
    theta.validate()?;
    tuning.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    let p = cell_probabilities_unchecked(theta, plan);
    if let Some((i, j, v)) = p
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.iter().enumerate().map(move |(j, &v)| (i, j, v)))
        .find(|(_, _, v)| *v <= PROB_FLOOR)
    {
        return Err(Error::SingularCell { group: i, cell: j, value: v });
    }
    let dp = cell_gradients_unchecked(theta, plan);
    Ok(residual_from(p.groups(), &dp, &counts.proportions(), tuning))
}

struct EpdObjective<'a> {
    q: Vec<Vec<f64>>,
    plan: &'a TestPlan,
    tuning: TuningParams,
}

impl Objective for EpdObjective<'_> {
    fn value(&self, x: &[f64; 3]) -> f64 {
        params(x).map_or(f64::INFINITY, |th| {
            let p = cell_probabilities_unchecked(&th, self.plan);
            shifted_objective(p.groups(), &self.q, &self.tuning)
        })
    }

    fn gradient(&self, x: &[f64; 3]) -> [f64; 3] {
        params(x).map_or([f64::NAN; 3], |th| {
            let p = cell_probabilities_unchecked(&th, self.plan);
            let dp = cell_gradients_unchecked(&th, self.plan);
            residual_from(p.groups(), &dp, &self.q, &self.tuning).map(|v| -v)
        })
    }
}

/// Minimum-EPD estimate. Starts from the MLE unless `init` is given.
pub fn mepde(counts: &ObservedCounts, plan: &TestPlan, tuning: &TuningParams, init: Option<&ModelParams>) -> Result<FitResult> {
    mepde_with(counts, plan, tuning, init, &FitOptions::default())
}

pub fn mepde_with(
    counts: &ObservedCounts,
    plan: &TestPlan,
    tuning: &TuningParams,
    init: Option<&ModelParams>,
    opts: &FitOptions,
) -> Result<FitResult> {
    tuning.validate()?;
    plan.validate()?;
    counts.check_plan(plan)?;
    let start = match init {
        Some(t) => {
            t.validate()?;
            *t
        }
        None => mle_with(counts, plan, &default_start(), opts)?.theta_hat,
    };
    let q = counts.proportions();
    let shift: f64 = q.iter().flatten().map(|&v| tuning.shift_constant(v)).sum();
    let obj = EpdObjective {
        q,
        plan,
        tuning: *tuning,
    };
    let out = minimize(&obj, start.to_array(), opts);
    Ok(FitResult {
        theta_hat: params(&out.x).ok_or_else(|| Error::NoConvergence("fit left the parameter space".into()))?,
        objective_value: out.value - shift,
        converged: out.converged,
        iterations: out.cycles,
        gradient_norm: out.grad_norm,
        cycle_objectives: out.cycle_values.iter().map(|v| v - shift).collect(),
    })
}

/// Starting point used when no warm start is supplied.
pub fn default_start() -> ModelParams {
    ModelParams {
        a: 1.0,
        b: 1.0,
        mu: 1.0,
    }
}

/// Which estimator to run: the MLE or the minimum-EPD estimator at a tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EstimatorSpec {
    Mle,
    Mepde { tuning: TuningParams },
}

impl EstimatorSpec {
    pub fn fit(&self, counts: &ObservedCounts, plan: &TestPlan, init: &ModelParams) -> Result<FitResult> {
        match self {
            EstimatorSpec::Mle => mle(counts, plan, init),
            EstimatorSpec::Mepde { tuning } => mepde(counts, plan, tuning, Some(init)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Mle => "MLE".into(),
            EstimatorSpec::Mepde { tuning } => {
                format!("MEPDE({},{},{})", tuning.alpha, tuning.beta, tuning.gamma)
            }
        }
    }
}

/// Runs `fit` from every start and keeps the smallest objective, breaking ties
/// on the lexicographically smallest estimate.
pub fn best_of_starts<F>(starts: &[ModelParams], mut fit: F) -> Result<FitResult>
where
    F: FnMut(&ModelParams) -> Result<FitResult>,
{
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    for s in starts {
        match fit(s) {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        r.objective_value < b.objective_value
                            || (r.objective_value == b.objective_value
                                && r.theta_hat.to_array() < b.theta_hat.to_array())
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::AllFitsFailed))
}
