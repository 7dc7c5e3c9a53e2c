//! Sandwich covariance of the minimum-EPD estimator, Wald intervals and the
//! influence function.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimation::{FitResult, TuningParams};
use crate::format::sig9;
use crate::linalg::{from_rows, outer, spd_inverse, symmetrize, to_rows, Mat3};
use crate::model::{cell_gradients_unchecked, cell_probabilities_unchecked, ModelParams, TestPlan, PROB_FLOOR};

/// How the per-group variance matrices are aggregated into `K`.
///
/// `Literal` sums `K^(i)` as they stand. `Proportional` weights group `i` by
/// `N / N_i`, which is what the variance of the unweighted estimating
/// equation actually is when group sizes differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KWeighting {
    #[default]
    Literal,
    Proportional,
}

impl FromStr for KWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "proportional" => Ok(Self::Proportional),
            other => Err(Error::InvalidInput(format!(
                "unknown K weighting {other:?} (expected literal or proportional)"
            ))),
        }
    }
}

/// `J`, `K` and `cov = J^-1 K J^-1 / N`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichMatrices {
    pub j_mat: [[f64; 3]; 3],
    pub k_mat: [[f64; 3]; 3],
    pub cov: [[f64; 3]; 3],
}

impl SandwichMatrices {
    pub fn trace(&self) -> f64 {
        (0..3).map(|l| self.cov[l][l]).sum()
    }

    pub fn std_errors(&self) -> [f64; 3] {
        [0, 1, 2].map(|l| self.cov[l][l].max(0.0).sqrt())
    }
}

struct Cells {
    p: Vec<Vec<f64>>,
    dp: Vec<Vec<[f64; 3]>>,
}

fn checked_cells(theta: &ModelParams, plan: &TestPlan, tuning: &TuningParams) -> Result<Cells> {
    theta.validate()?;
    plan.validate()?;
    tuning.validate()?;
    let p = cell_probabilities_unchecked(theta, plan);
    for (i, g) in p.iter().enumerate() {
        if let Some((j, &v)) = g.iter().enumerate().find(|(_, v)| **v <= PROB_FLOOR) {
            return Err(Error::SingularCell { group: i, cell: j, value: v });
        }
    }
    Ok(Cells {
        p: p.groups().to_vec(),
        dp: cell_gradients_unchecked(theta, plan),
    })
}

fn j_from(cells: &Cells, tuning: &TuningParams) -> Mat3 {
    let mut j = Mat3::zeros();
    for (p, dp) in cells.p.iter().zip(&cells.dp) {
        for (&pij, d) in p.iter().zip(dp) {
            j += outer(d, d) * tuning.cell_weight(pij);
        }
    }
    j
}

fn k_group_from(p: &[f64], dp: &[[f64; 3]], tuning: &TuningParams) -> Mat3 {
    let mut second = Mat3::zeros();
    let mut mean = [0.0; 3];
    for (&pij, d) in p.iter().zip(dp) {
        let w = tuning.cell_weight(pij);
        second += outer(d, d) * (w * w * pij);
        for l in 0..3 {
            mean[l] += w * pij * d[l];
        }
    }
    symmetrize(&(second - outer(&mean, &mean)))
}

/// `J = sum_i sum_j w(p_ij) dp_ij dp_ij^T` with
/// `w(p) = beta e^(alpha p) + (1-beta)(gamma+1) p^(gamma-1)`.
pub fn j_matrix(theta: &ModelParams, plan: &TestPlan, tuning: &TuningParams) -> Result<Mat3> {
    let cells = checked_cells(theta, plan, tuning)?;
    Ok(j_from(&cells, tuning))
}

/// Variance of the per-draw score `Y = sum_j w(p_j) dp_j 1{draw = j}` under a
/// single multinomial draw from group `group`.
pub fn k_matrix_group(theta: &ModelParams, plan: &TestPlan, tuning: &TuningParams, group: usize) -> Result<Mat3> {
    if group >= plan.groups.len() {
        return Err(Error::InvalidInput(format!("group index {group} out of range")));
    }
    let cells = checked_cells(theta, plan, tuning)?;
    Ok(k_group_from(&cells.p[group], &cells.dp[group], tuning))
}

/// `K = sum_i c_i K^(i)` with `c_i = 1` (literal) or `N / N_i` (proportional).
pub fn k_matrix(theta: &ModelParams, plan: &TestPlan, tuning: &TuningParams, weighting: KWeighting) -> Result<Mat3> {
    let cells = checked_cells(theta, plan, tuning)?;
    Ok(k_from(&cells, plan, tuning, weighting))
}

fn k_from(cells: &Cells, plan: &TestPlan, tuning: &TuningParams, weighting: KWeighting) -> Mat3 {
    let n_total = plan.total_units() as f64;
    let mut k = Mat3::zeros();
    for ((p, dp), g) in cells.p.iter().zip(&cells.dp).zip(&plan.groups) {
        let c = match weighting {
            KWeighting::Literal => 1.0,
            KWeighting::Proportional => n_total / f64::from(g.n_units),
        };
        k += k_group_from(p, dp, tuning) * c;
    }
    k
}

/// Sandwich covariance `J^-1 K J^-1 / n_total`.
pub fn asym_covariance(
    theta: &ModelParams,
    plan: &TestPlan,
    tuning: &TuningParams,
    n_total: u64,
    weighting: KWeighting,
) -> Result<SandwichMatrices> {
    if n_total == 0 {
        return Err(Error::InvalidInput("n_total must be positive".into()));
    }
    let cells = checked_cells(theta, plan, tuning)?;
    let j = j_from(&cells, tuning);
    let k = k_from(&cells, plan, tuning, weighting);
    let j_inv = spd_inverse(&j)?;
    let cov = symmetrize(&(j_inv * k * j_inv)) / n_total as f64;
    Ok(SandwichMatrices {
        j_mat: to_rows(&j),
        k_mat: to_rows(&k),
        cov: to_rows(&cov),
    })
}

/// Wald intervals `theta_l +- z sqrt(cov_ll)` at the given two-sided level.
pub fn confidence_intervals(fit: &FitResult, cov: &[[f64; 3]; 3], level: f64) -> Result<[(f64, f64); 3]> {
    wald_intervals(&fit.theta_hat, cov, level)
}

pub fn wald_intervals(theta: &ModelParams, cov: &[[f64; 3]; 3], level: f64) -> Result<[(f64, f64); 3]> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level must lie in (0, 1), got {level}")));
    }
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf((1.0 + level) / 2.0);
    let th = theta.to_array();
    let mut out = [(0.0, 0.0); 3];
    for l in 0..3 {
        let v = cov[l][l];
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("negative variance {v} for parameter {l}")));
        }
        let hw = z * v.sqrt();
        out[l] = (th[l] - hw, th[l] + hw);
    }
    Ok(out)
}

/// One contaminating observation per group, given as the index of the cell
/// it falls in (the position of the 1 in the one-hot vector `t_i`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierPoint {
    pub cells: Vec<usize>,
}

impl OutlierPoint {
    pub fn new(plan: &TestPlan, cells: Vec<usize>) -> Result<Self> {
        if cells.len() != plan.groups.len() {
            return Err(Error::InvalidInput(format!(
                "outlier has {} groups, plan has {}",
                cells.len(),
                plan.groups.len()
            )));
        }
        for (i, (&c, g)) in cells.iter().zip(&plan.groups).enumerate() {
            if c >= g.n_cells() {
                return Err(Error::InvalidInput(format!("group {i}: outlier cell {c} out of range")));
            }
        }
        Ok(Self { cells })
    }

    pub fn one_hot(&self, plan: &TestPlan) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .zip(&plan.groups)
            .map(|(&c, g)| (0..g.n_cells()).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
            .collect()
    }
}

/// Every combination of one outlier cell per group, in odometer order with
/// the last group varying fastest.
pub fn outlier_lattice(plan: &TestPlan) -> Vec<OutlierPoint> {
    let sizes: Vec<usize> = plan.groups.iter().map(|g| g.n_cells()).collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; sizes.len()];
    loop {
        out.push(OutlierPoint { cells: idx.clone() });
        let mut k = sizes.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < sizes[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn if_from(cells: &Cells, j_inv: &Mat3, outlier: &OutlierPoint, tuning: &TuningParams) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (i, (p, dp)) in cells.p.iter().zip(&cells.dp).enumerate() {
        for (j, (&pij, d)) in p.iter().zip(dp).enumerate() {
            let delta = if outlier.cells[i] == j { 1.0 } else { 0.0 };
            let w = tuning.cell_weight(pij) * (delta - pij);
            for l in 0..3 {
                s[l] += w * d[l];
            }
        }
    }
    let v = j_inv * crate::linalg::Vec3::from(s);
    [v[0], v[1], v[2]]
}

/// `J^-1 sum_i sum_j pi_ij (delta_ij - p_ij)` with `pi_ij = w(p_ij) dp_ij`.
pub fn influence_function(
    outlier: &OutlierPoint,
    theta: &ModelParams,
    plan: &TestPlan,
    tuning: &TuningParams,
) -> Result<[f64; 3]> {
    let outlier = OutlierPoint::new(plan, outlier.cells.clone())?;
    let cells = checked_cells(theta, plan, tuning)?;
    let j_inv = spd_inverse(&j_from(&cells, tuning))?;
    Ok(if_from(&cells, &j_inv, &outlier, tuning))
}

/// Influence function over the full outlier lattice.
pub fn influence_lattice(
    theta: &ModelParams,
    plan: &TestPlan,
    tuning: &TuningParams,
) -> Result<Vec<(OutlierPoint, [f64; 3])>> {
    let cells = checked_cells(theta, plan, tuning)?;
    let j_inv = spd_inverse(&j_from(&cells, tuning))?;
    Ok(outlier_lattice(plan)
        .into_iter()
        .map(|o| {
            let v = if_from(&cells, &j_inv, &o, tuning);
            (o, v)
        })
        .collect())
}

/// Largest Euclidean norm of the influence function over the lattice.
pub fn max_influence_norm(theta: &ModelParams, plan: &TestPlan, tuning: &TuningParams) -> Result<f64> {
    Ok(influence_lattice(theta, plan, tuning)?
        .iter()
        .map(|(_, v)| norm3(v))
        .fold(0.0, f64::max))
}

fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// CSV with one row per lattice point: 1-based outlier cell per group, then
/// the influence vector and its norm.
pub fn influence_csv(rows: &[(OutlierPoint, [f64; 3])]) -> String {
    let k = rows.first().map_or(0, |(o, _)| o.cells.len());
    let mut s = String::new();
    for i in 0..k {
        s.push_str(&format!("g{},", i + 1));
    }
    s.push_str("if_a,if_b,if_mu,norm\n");
    for (o, v) in rows {
        for c in &o.cells {
            s.push_str(&format!("{},", c + 1));
        }
        s.push_str(&format!("{},{},{},{}\n", sig9(v[0]), sig9(v[1]), sig9(v[2]), sig9(norm3(v))));
    }
    s
}

/// Row-major to `Mat3`, for callers holding serialized matrices.
pub fn matrix(rows: &[[f64; 3]; 3]) -> Mat3 {
    from_rows(rows)
}
