//! Log-logistic lifetimes under a ramp (progressive) stress with a tampered
//! failure rate link.
//!
//! For a group tested at stress rate `nu` the survival function is
//!
//! ```text
//! S(t) = [1 + (a nu^b)^mu t^(mu (b+1))]^(-1/(b+1))
//! ```
//!
//! Inspections at `0 = tau_0 < tau_1 <= ... <= tau_J` split each group into
//! `J` failure cells and one survivor cell. Everything here is evaluated in
//! log space through `ln A1 = mu (ln a + b ln nu) + mu (b+1) ln t`, which
//! keeps large shape exponents from overflowing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities at or below this value are treated as empty cells whenever a
/// logarithm or a negative power of the probability is needed.
pub const PROB_FLOOR: f64 = 1e-12;

/// `theta = (a, b, mu)`: inverse-power-law coefficient and exponent, and the
/// Log-logistic shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub a: f64,
    pub b: f64,
    pub mu: f64,
}

impl ModelParams {
    pub fn new(a: f64, b: f64, mu: f64) -> Result<Self> {
        let theta = Self { a, b, mu };
        theta.validate()?;
        Ok(theta)
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.mu]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a", self.a), ("b", self.b), ("mu", self.mu)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }
}

/// One stress group: `n` devices on a ramp with rate `nu`, inspected at `tau`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPlan {
    #[serde(rename = "n")]
    pub n_units: u32,
    #[serde(rename = "nu")]
    pub stress_rate: f64,
    #[serde(rename = "tau")]
    pub inspection_times: Vec<f64>,
}

impl GroupPlan {
    pub fn new(n_units: u32, stress_rate: f64, inspection_times: Vec<f64>) -> Self {
        Self {
            n_units,
            stress_rate,
            inspection_times,
        }
    }

    /// Failure cells plus the survivor cell.
    pub fn n_cells(&self) -> usize {
        self.inspection_times.len() + 1
    }

    pub fn termination_time(&self) -> f64 {
        *self.inspection_times.last().unwrap_or(&0.0)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::InvalidInput(format!("groups[{index}].n must be positive")));
        }
        if !(self.stress_rate.is_finite() && self.stress_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "groups[{index}].nu must be positive, got {}",
                self.stress_rate
            )));
        }
        if self.inspection_times.is_empty() {
            return Err(Error::InvalidInput(format!("groups[{index}].tau is empty")));
        }
        let mut prev = 0.0;
        for (j, &t) in self.inspection_times.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "groups[{index}].tau[{j}] must be positive, got {t}"
                )));
            }
            if t < prev {
                return Err(Error::InvalidInput(format!(
                    "groups[{index}].tau must be nondecreasing (tau[{j}] = {t} < {prev})"
                )));
            }
            prev = t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestPlan {
    pub groups: Vec<GroupPlan>,
}

impl TestPlan {
    pub fn new(groups: Vec<GroupPlan>) -> Result<Self> {
        let plan = Self { groups };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::InvalidInput("plan has no groups".into()));
        }
        self.groups
            .iter()
            .enumerate()
            .try_for_each(|(i, g)| g.validate(i))
    }

    pub fn total_units(&self) -> u64 {
        self.groups.iter().map(|g| u64::from(g.n_units)).sum()
    }

    pub fn total_cells(&self) -> usize {
        self.groups.iter().map(GroupPlan::n_cells).sum()
    }
}

/// Per group: `J_i` failure-cell probabilities followed by the survivor cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellProbabilities {
    groups: Vec<Vec<f64>>,
}

impl CellProbabilities {
    pub fn group(&self, i: usize) -> &[f64] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.groups.iter().map(Vec::as_slice)
    }

    pub fn survival_cell(&self, i: usize) -> f64 {
        *self.groups[i].last().expect("groups always carry a survivor cell")
    }
}

/// `u_ij = d ln p_ij / d theta`, laid out like [`CellProbabilities`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVectors {
    groups: Vec<Vec<[f64; 3]>>,
}

impl ScoreVectors {
    pub fn group(&self, i: usize) -> &[[f64; 3]] {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[Vec<[f64; 3]>] {
        &self.groups
    }
}

/// `d p_ij / d theta` for every cell. Finite even for empty cells.
pub type CellGradients = Vec<Vec<[f64; 3]>>;

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln A1(t)` where `A1 = (a nu^b)^mu t^(mu(b+1))`. `-inf` at `t = 0`.
fn ln_a1(theta: &ModelParams, nu: f64, t: f64) -> f64 {
    if t == 0.0 {
        return f64::NEG_INFINITY;
    }
    theta.mu * (theta.a.ln() + theta.b * nu.ln()) + theta.mu * (theta.b + 1.0) * t.ln()
}

fn check_time(nu: f64, t: f64) -> Result<()> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::Domain(format!("stress rate must be positive, got {nu}")));
    }
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    Ok(())
}

fn survival_unchecked(theta: &ModelParams, nu: f64, t: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    (-softplus(ln_a1(theta, nu, t)) / (theta.b + 1.0)).exp()
}

/// `S_i(t)`; exactly 1 at `t = 0`.
pub fn survival(theta: &ModelParams, nu: f64, t: f64) -> Result<f64> {
    theta.validate()?;
    check_time(nu, t)?;
    Ok(survival_unchecked(theta, nu, t))
}

/// `H_i(t) = ln[1 + A1(t)] / (b+1)`, so that `exp(-H) = S`.
pub fn cumulative_hazard(theta: &ModelParams, nu: f64, t: f64) -> Result<f64> {
    theta.validate()?;
    check_time(nu, t)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(softplus(ln_a1(theta, nu, t)) / (theta.b + 1.0))
}

/// `h_i(t) = dH/dt = mu A1 / (t (1 + A1))`.
pub fn hazard(theta: &ModelParams, nu: f64, t: f64) -> Result<f64> {
    theta.validate()?;
    check_time(nu, t)?;
    if t == 0.0 {
        return Err(Error::Domain("hazard requires t > 0".into()));
    }
    let x = ln_a1(theta, nu, t);
    // A1 / (1 + A1) = logistic(x)
    let ratio = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    Ok(theta.mu * ratio / t)
}

/// `d S(t) / d theta` in closed form through the `A1`, `A2`, `A3` terms:
///
/// ```text
/// A3 = A1 (1 + A1)^(-(b+2)/(b+1))
/// ln A2 = mu (b+1) ln(t nu) - (1 + 1/A1) ln(1 + A1)
/// dS/da  = -(mu / a) A3 / (b+1)
/// dS/db  = -A3 ln A2 / (b+1)^2
/// dS/dmu = -A3 ln A1 / ((b+1) mu)
/// ```
fn survival_gradient(theta: &ModelParams, nu: f64, t: f64) -> [f64; 3] {
    if t == 0.0 {
        return [0.0; 3];
    }
    let bp1 = theta.b + 1.0;
    let x = ln_a1(theta, nu, t);
    let sp = softplus(x);
    let a3 = (x - (theta.b + 2.0) / bp1 * sp).exp();
    if a3 == 0.0 {
        return [0.0; 3];
    }
    // ln(1 + A1) / A1, which tends to 1 as A1 -> 0
    let sp_over_a1 = if x < -30.0 { 1.0 - 0.5 * x.exp() } else { sp / x.exp() };
    let ln_a2 = theta.mu * bp1 * (t * nu).ln() - sp - sp_over_a1;
    [
        -(theta.mu / theta.a) * a3 / bp1,
        -a3 * ln_a2 / (bp1 * bp1),
        -a3 * x / (bp1 * theta.mu),
    ]
}

fn group_cells(theta: &ModelParams, g: &GroupPlan) -> Vec<f64> {
    let mut cells = Vec::with_capacity(g.n_cells());
    let mut prev = 1.0;
    for &t in &g.inspection_times {
        let s = survival_unchecked(theta, g.stress_rate, t);
        cells.push(prev - s);
        prev = s;
    }
    cells.push(prev);
    cells
}

/// `p_ij = S_i(tau_i(j-1)) - S_i(tau_ij)` for the failure cells and
/// `p_is = S_i(tau_iJ)` for the survivor cell.
pub fn cell_probabilities(theta: &ModelParams, plan: &TestPlan) -> Result<CellProbabilities> {
    theta.validate()?;
    plan.validate()?;
    Ok(cell_probabilities_unchecked(theta, plan))
}

pub(crate) fn cell_probabilities_unchecked(theta: &ModelParams, plan: &TestPlan) -> CellProbabilities {
    CellProbabilities {
        groups: plan.groups.iter().map(|g| group_cells(theta, g)).collect(),
    }
}

/// `d p_ij / d theta` for every cell, from the closed-form survival gradient.
pub fn cell_gradients(theta: &ModelParams, plan: &TestPlan) -> Result<CellGradients> {
    theta.validate()?;
    plan.validate()?;
    Ok(cell_gradients_unchecked(theta, plan))
}

pub(crate) fn cell_gradients_unchecked(theta: &ModelParams, plan: &TestPlan) -> CellGradients {
    plan.groups
        .iter()
        .map(|g| {
            let mut out = Vec::with_capacity(g.n_cells());
            let mut prev = [0.0; 3];
            for &t in &g.inspection_times {
                let ds = survival_gradient(theta, g.stress_rate, t);
                out.push([prev[0] - ds[0], prev[1] - ds[1], prev[2] - ds[2]]);
                prev = ds;
            }
            out.push(prev);
            out
        })
        .collect()
}

/// `u_ij = d ln p_ij / d theta`. Fails on any cell at or below [`PROB_FLOOR`].
pub fn score_vectors(theta: &ModelParams, plan: &TestPlan) -> Result<ScoreVectors> {
    let cells = cell_probabilities(theta, plan)?;
    let grads = cell_gradients_unchecked(theta, plan);
    let mut groups = Vec::with_capacity(plan.groups.len());
    for (i, (p, dp)) in cells.groups.iter().zip(&grads).enumerate() {
        let mut g = Vec::with_capacity(p.len());
        for (j, (&pij, d)) in p.iter().zip(dp).enumerate() {
            if pij <= PROB_FLOOR {
                return Err(Error::SingularCell {
                    group: i,
                    cell: j,
                    value: pij,
                });
            }
            g.push([d[0] / pij, d[1] / pij, d[2] / pij]);
        }
        groups.push(g);
    }
    Ok(ScoreVectors { groups })
}

/// Inverse-transform draw: the lifetime whose survival probability is
/// `uniform_draw`.
pub fn sample_lifetime(theta: &ModelParams, nu: f64, uniform_draw: f64) -> Result<f64> {
    theta.validate()?;
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::Domain(format!("stress rate must be positive, got {nu}")));
    }
    if !(uniform_draw > 0.0 && uniform_draw < 1.0) {
        return Err(Error::Domain(format!(
            "uniform draw must lie in (0, 1), got {uniform_draw}"
        )));
    }
    Ok(sample_lifetime_unchecked(theta, nu, uniform_draw))
}

pub(crate) fn sample_lifetime_unchecked(theta: &ModelParams, nu: f64, u: f64) -> f64 {
    let bp1 = theta.b + 1.0;
    // u^-(b+1) - 1 = expm1(-(b+1) ln u)
    let ln_num = (-bp1 * u.ln()).exp_m1().ln();
    let ln_scale = theta.mu * (theta.a.ln() + theta.b * nu.ln());
    ((ln_num - ln_scale) / (theta.mu * bp1)).exp()
}

/// CSV with header `group,cell,p,du_da,du_db,du_dmu`, groups and cells
/// numbered from 1, the survivor cell last.
pub fn cells_scores_csv(cells: &CellProbabilities, scores: &ScoreVectors) -> String {
    use crate::format::sig9;
    let mut out = String::from("group,cell,p,du_da,du_db,du_dmu\n");
    for (i, (p, u)) in cells.groups.iter().zip(&scores.groups).enumerate() {
        for (j, (pij, uij)) in p.iter().zip(u).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                j + 1,
                sig9(*pij),
                sig9(uij[0]),
                sig9(uij[1]),
                sig9(uij[2])
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference_plan() -> TestPlan {
        TestPlan::new(vec![
            GroupPlan::new(20, 3.0, vec![0.4, 0.5, 0.7]),
            GroupPlan::new(25, 8.0, vec![0.2, 0.4, 0.8]),
            GroupPlan::new(30, 10.0, vec![0.2, 0.3, 0.5]),
        ])
        .unwrap()
    }

    fn theta0() -> ModelParams {
        ModelParams::new(1.6, 1.1, 2.7).unwrap()
    }

    #[test]
    fn survival_is_one_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let th = ModelParams::new(rng.gen_range(0.1..5.0), rng.gen_range(0.1..3.0), rng.gen_range(0.2..6.0)).unwrap();
            assert_eq!(survival(&th, rng.gen_range(0.1..20.0), 0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn survival_matches_direct_formula() {
        let th = theta0();
        let (nu, t) = (3.0_f64, 0.7_f64);
        let direct = (1.0 + (th.a * nu.powf(th.b)).powf(th.mu) * t.powf(th.mu * (th.b + 1.0)))
            .powf(-1.0 / (th.b + 1.0));
        let s = survival(&th, nu, t).unwrap();
        assert!((s - direct).abs() <= 1e-13 * direct);
    }

    #[test]
    fn domain_errors() {
        let th = theta0();
        assert!(survival(&th, 0.0, 1.0).is_err());
        assert!(survival(&th, -1.0, 1.0).is_err());
        assert!(survival(&th, 1.0, -0.1).is_err());
        assert!(hazard(&th, 1.0, 0.0).is_err());
        assert!(sample_lifetime(&th, 1.0, 0.0).is_err());
        assert!(sample_lifetime(&th, 1.0, 1.0).is_err());
        assert!(ModelParams::new(0.0, 1.0, 1.0).is_err());
        assert!(ModelParams::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn cumulative_hazard_starts_at_zero() {
        assert_eq!(cumulative_hazard(&theta0(), 3.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn hazard_is_derivative_of_cumulative_hazard() {
        let th = theta0();
        for &t in &[0.05, 0.3, 0.7, 1.5] {
            let h = 1e-6 * t;
            let fd = (cumulative_hazard(&th, 3.0, t + h).unwrap()
                - cumulative_hazard(&th, 3.0, t - h).unwrap())
                / (2.0 * h);
            let an = hazard(&th, 3.0, t).unwrap();
            assert!((fd - an).abs() <= 1e-6 * an, "t={t}: {fd} vs {an}");
        }
    }

    #[test]
    fn single_inspection_cells_sum_to_one() {
        let plan = TestPlan::new(vec![GroupPlan::new(10, 2.0, vec![0.5])]).unwrap();
        let c = cell_probabilities(&theta0(), &plan).unwrap();
        assert_eq!(c.group(0).len(), 2);
        assert!((c.group(0)[0] + c.group(0)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_width_interval_is_exactly_empty() {
        let plan = TestPlan::new(vec![GroupPlan::new(10, 2.0, vec![0.3, 0.3, 0.6])]).unwrap();
        let c = cell_probabilities(&theta0(), &plan).unwrap();
        assert_eq!(c.group(0)[1], 0.0);
        assert!(matches!(
            score_vectors(&theta0(), &plan),
            Err(Error::SingularCell { group: 0, cell: 1, .. })
        ));
    }

    #[test]
    fn plan_validation() {
        assert!(TestPlan::new(vec![]).is_err());
        assert!(TestPlan::new(vec![GroupPlan::new(5, 1.0, vec![])]).is_err());
        assert!(TestPlan::new(vec![GroupPlan::new(5, 1.0, vec![0.5, 0.4])]).is_err());
        assert!(TestPlan::new(vec![GroupPlan::new(5, 1.0, vec![0.0, 0.4])]).is_err());
        assert!(TestPlan::new(vec![GroupPlan::new(0, 1.0, vec![0.4])]).is_err());
    }

    #[test]
    fn scores_sum_to_zero_when_weighted_by_cells() {
        let plan = reference_plan();
        let c = cell_probabilities(&theta0(), &plan).unwrap();
        let u = score_vectors(&theta0(), &plan).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let s: f64 = c.group(i).iter().zip(u.group(i)).map(|(p, u)| p * u[k]).sum();
                assert!(s.abs() < 1e-10, "group {i} component {k}: {s}");
            }
        }
    }

    #[test]
    fn sample_lifetime_inverts_survival() {
        let th = theta0();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            let t = sample_lifetime(&th, 8.0, u).unwrap();
            assert!((survival(&th, 8.0, t).unwrap() - u).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_lifetime_decreases_in_u() {
        let th = theta0();
        let ts: Vec<f64> = [0.1, 0.5, 0.9, 0.999, 1.0 - 1e-9]
            .iter()
            .map(|&u| sample_lifetime(&th, 3.0, u).unwrap())
            .collect();
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert!(ts[4] < 0.05);
    }

    #[test]
    fn large_exponents_do_not_overflow() {
        let th = ModelParams::new(50.0, 4.0, 40.0).unwrap();
        let s = survival(&th, 20.0, 5.0).unwrap();
        assert!(s >= 0.0 && s < 1e-10);
        let g = survival_gradient(&th, 20.0, 5.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_layout() {
        let plan = TestPlan::new(vec![GroupPlan::new(10, 2.0, vec![0.5])]).unwrap();
        let c = cell_probabilities(&theta0(), &plan).unwrap();
        let u = score_vectors(&theta0(), &plan).unwrap();
        let csv = cells_scores_csv(&c, &u);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "group,cell,p,du_da,du_db,du_dmu");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("1,2,"));
    }
}
