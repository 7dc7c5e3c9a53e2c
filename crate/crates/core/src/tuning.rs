//! Data-driven choice of the EPD tuning parameters `(alpha, beta, gamma)`.
//!
//! Every selector fits the minimum-EPD estimator at each grid point (in
//! parallel, MLE warm start) and then scores the fits:
//!
//! - Warwick-Jones (WJ): estimated MSE `|theta_hat - pilot|^2 + tr(cov)`,
//!   with the MLE as pilot; IWJ repeats with the selected estimate as pilot.
//! - minAMAX / minMAE / minAMED: max, mean and median of `|p_ij - q_ij|`.
//! - Concrete score matching (CSM) on the chain of one-hot cell outcomes.
//!
//! Ties are broken by the smallest `(|alpha|, beta, gamma)`.

use std::cmp::Ordering;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{asym_covariance, KWeighting};
use crate::error::{Error, Result};
use crate::estimation::{mepde, mle, default_start, FitResult, ObservedCounts, TuningParams};
use crate::format::sig9;
use crate::model::{cell_probabilities_unchecked, ModelParams, TestPlan, PROB_FLOOR};

/// Rectangular grid of tuning values. Points where a coordinate has no effect
/// are collapsed: `beta = 0` ignores `alpha`, `beta = 1` ignores `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub gammas: Vec<f64>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl Default for TuningGrid {
    fn default() -> Self {
        let mut gammas: Vec<f64> = (0..25).map(|k| round2(0.02 + 0.04 * f64::from(k))).collect();
        gammas.push(1.0);
        Self {
            alphas: vec![-15.0, -10.0, -8.0, -6.0, -4.0, -2.0, -1.0, 1.0, 2.0, 4.0, 6.0, 9.0],
            betas: (0..=10).map(|k| f64::from(k) / 10.0).collect(),
            gammas,
        }
    }
}

impl TuningGrid {
    pub fn new(alphas: Vec<f64>, betas: Vec<f64>, gammas: Vec<f64>) -> Result<Self> {
        let g = Self { alphas, betas, gammas };
        g.validate()?;
        Ok(g)
    }

    /// A one-point grid.
    pub fn single(t: TuningParams) -> Self {
        Self {
            alphas: vec![t.alpha],
            betas: vec![t.beta],
            gammas: vec![t.gamma],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() || self.gammas.is_empty() {
            return Err(Error::InvalidInput("tuning grid axes must be nonempty".into()));
        }
        for p in self.points_unchecked() {
            p.validate()?;
        }
        Ok(())
    }

    /// Deduplicated grid points in `(beta, alpha, gamma)` order.
    pub fn points(&self) -> Result<Vec<TuningParams>> {
        self.validate()?;
        Ok(self.points_unchecked())
    }

    fn points_unchecked(&self) -> Vec<TuningParams> {
        let mut betas = self.betas.clone();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        let mut alphas = self.alphas.clone();
        alphas.sort_by(f64::total_cmp);
        alphas.dedup();
        let mut gammas = self.gammas.clone();
        gammas.sort_by(f64::total_cmp);
        gammas.dedup();
        // representative for collapsed axes: the value earliest in tie order
        let alpha_rep = alphas
            .iter()
            .cloned()
            .min_by(|x, y| x.abs().total_cmp(&y.abs()).then(x.total_cmp(y)))
            .unwrap_or(0.0);
        let gamma_rep = gammas.first().cloned().unwrap_or(0.0);
        let mut out = Vec::new();
        for &beta in &betas {
            let a_axis: &[f64] = if beta == 0.0 { std::slice::from_ref(&alpha_rep) } else { &alphas };
            let g_axis: &[f64] = if beta == 1.0 { std::slice::from_ref(&gamma_rep) } else { &gammas };
            for &alpha in a_axis {
                for &gamma in g_axis {
                    out.push(TuningParams { alpha, beta, gamma });
                }
            }
        }
        out
    }

    pub fn contains(&self, t: &TuningParams) -> bool {
        self.points_unchecked().iter().any(|p| p == t)
    }
}

/// `(|alpha|, beta, gamma)` ordering used to break score ties.
pub fn tie_order(x: &TuningParams, y: &TuningParams) -> Ordering {
    x.alpha
        .abs()
        .total_cmp(&y.alpha.abs())
        .then(x.beta.total_cmp(&y.beta))
        .then(x.gamma.total_cmp(&y.gamma))
        .then(x.alpha.total_cmp(&y.alpha))
}

/// A grid point together with its fit.
#[derive(Debug, Clone)]
pub struct GridFit {
    pub tuning: TuningParams,
    pub fit: Option<FitResult>,
}

/// Fits the minimum-EPD estimator at every grid point from the MLE.
/// Failed fits are kept as `None` and excluded by the selectors.
pub fn fit_grid(counts: &ObservedCounts, plan: &TestPlan, grid: &TuningGrid) -> Result<(FitResult, Vec<GridFit>)> {
    let points = grid.points()?;
    let pilot = mle(counts, plan, &default_start())?;
    let start = pilot.theta_hat;
    let fits = points
        .par_iter()
        .map(|t| GridFit {
            tuning: *t,
            fit: mepde(counts, plan, t, Some(&start)).ok(),
        })
        .collect();
    Ok((pilot, fits))
}

/// Score of one grid point under a selector. `score` is `+inf` for failed fits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridScore {
    pub tuning: TuningParams,
    pub theta: Option<ModelParams>,
    pub converged: bool,
    pub score: f64,
}

/// Result of a selector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub tuning: TuningParams,
    pub theta: ModelParams,
    pub score: f64,
    /// Pilot iterations used (IWJ), 1 otherwise.
    pub iterations: usize,
    /// IWJ ended in a period-2 cycle.
    pub cycled: bool,
    #[serde(skip)]
    pub scores: Vec<GridScore>,
}

fn argmin(scores: &[GridScore]) -> Result<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.score.is_finite())
        .min_by(|(_, x), (_, y)| x.score.total_cmp(&y.score).then(tie_order(&x.tuning, &y.tuning)))
        .map(|(i, _)| i)
        .ok_or(Error::AllFitsFailed)
}

fn selection(scores: Vec<GridScore>, iterations: usize, cycled: bool) -> Result<Selection> {
    let i = argmin(&scores)?;
    Ok(Selection {
        tuning: scores[i].tuning,
        theta: scores[i].theta.expect("finite score implies a fit"),
        score: scores[i].score,
        iterations,
        cycled,
        scores,
    })
}

/// WJ estimated MSE split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WjScore {
    pub bias_term: f64,
    pub trace_term: f64,
    pub total: f64,
}

fn wj_from_fit(
    theta_hat: &ModelParams,
    tuning: &TuningParams,
    pilot: &ModelParams,
    plan: &TestPlan,
    weighting: KWeighting,
) -> Result<WjScore> {
    let cov = asym_covariance(theta_hat, plan, tuning, plan.total_units(), weighting)?;
    let bias_term: f64 = theta_hat
        .to_array()
        .iter()
        .zip(pilot.to_array())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace_term = cov.trace();
    Ok(WjScore {
        bias_term,
        trace_term,
        total: bias_term + trace_term,
    })
}

/// `|theta_EP - pilot|^2 + tr(J^-1 K J^-1) / N` at the minimum-EPD fit for
/// `tuning` (warm-started from the pilot).
pub fn wj_mse(
    tuning: &TuningParams,
    pilot: &ModelParams,
    counts: &ObservedCounts,
    plan: &TestPlan,
    weighting: KWeighting,
) -> Result<WjScore> {
    let fit = mepde(counts, plan, tuning, Some(pilot))?;
    wj_from_fit(&fit.theta_hat, tuning, pilot, plan, weighting)
}

fn wj_scores(fits: &[GridFit], pilot: &ModelParams, plan: &TestPlan, weighting: KWeighting) -> Vec<GridScore> {
    fits.par_iter()
        .map(|gf| {
            let score = gf
                .fit
                .as_ref()
                .and_then(|f| wj_from_fit(&f.theta_hat, &gf.tuning, pilot, plan, weighting).ok())
                .map_or(f64::INFINITY, |s| s.total);
            grid_score(gf, score)
        })
        .collect()
}

fn grid_score(gf: &GridFit, score: f64) -> GridScore {
    GridScore {
        tuning: gf.tuning,
        theta: gf.fit.as_ref().map(|f| f.theta_hat),
        converged: gf.fit.as_ref().is_some_and(|f| f.converged),
        score: if score.is_nan() { f64::INFINITY } else { score },
    }
}

/// Single WJ pass with the MLE as pilot.
pub fn wj_select(counts: &ObservedCounts, plan: &TestPlan, grid: &TuningGrid, weighting: KWeighting) -> Result<Selection> {
    let (pilot, fits) = fit_grid(counts, plan, grid)?;
    selection(wj_scores(&fits, &pilot.theta_hat, plan, weighting), 1, false)
}

/// Iterated WJ: the pilot is replaced by the current selection until the
/// selection repeats (at most 20 passes). A period-2 cycle returns the member
/// of the pair with the smaller score under the latest pilot and sets `cycled`.
/// `iterations` counts the selections made; the confirming pass is not counted.
pub fn iwj_select(counts: &ObservedCounts, plan: &TestPlan, grid: &TuningGrid, weighting: KWeighting) -> Result<Selection> {
    let (pilot, fits) = fit_grid(counts, plan, grid)?;
    iwj_from_fits(&fits, pilot.theta_hat, plan, weighting)
}

/// IWJ on precomputed grid fits starting from the given pilot.
pub fn iwj_from_fits(fits: &[GridFit], pilot: ModelParams, plan: &TestPlan, weighting: KWeighting) -> Result<Selection> {
    const MAX_PASSES: usize = 20;
    let mut pilot = pilot;
    let mut history: Vec<usize> = Vec::new();
    for pass in 1..=MAX_PASSES {
        let scores = wj_scores(fits, &pilot, plan, weighting);
        let sel = argmin(&scores)?;
        if history.last() == Some(&sel) {
            return selection(scores, pass - 1, false);
        }
        if history.len() >= 2 && history[history.len() - 2] == sel {
            let other = history[history.len() - 1];
            let pick = if scores[other].score < scores[sel].score
                || (scores[other].score == scores[sel].score
                    && tie_order(&scores[other].tuning, &scores[sel].tuning) == Ordering::Less)
            {
                other
            } else {
                sel
            };
            return Ok(Selection {
                tuning: scores[pick].tuning,
                theta: scores[pick].theta.expect("selected point has a fit"),
                score: scores[pick].score,
                iterations: pass,
                cycled: true,
                scores,
            });
        }
        history.push(sel);
        pilot = scores[sel].theta.expect("selected point has a fit");
        if pass == MAX_PASSES {
            return selection(scores, pass, false);
        }
    }
    unreachable!("loop returns on its last pass")
}

/// Reduction of the absolute cell errors `|p_ij(theta_hat) - q_ij|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorCriterion {
    Amax,
    Mae,
    Amed,
}

/// Absolute cell errors over all `sum_i (J_i + 1)` cells.
pub fn absolute_cell_errors(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan) -> Vec<f64> {
    let p = cell_probabilities_unchecked(theta, plan);
    p.iter()
        .zip(counts.proportions())
        .flat_map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .collect()
}

pub fn error_criterion(theta: &ModelParams, counts: &ObservedCounts, plan: &TestPlan, criterion: ErrorCriterion) -> f64 {
    let mut e = absolute_cell_errors(theta, counts, plan);
    match criterion {
        ErrorCriterion::Amax => e.iter().cloned().fold(0.0, f64::max),
        ErrorCriterion::Mae => e.iter().sum::<f64>() / e.len() as f64,
        ErrorCriterion::Amed => {
            e.sort_by(f64::total_cmp);
            let n = e.len();
            if n % 2 == 1 {
                e[n / 2]
            } else {
                0.5 * (e[n / 2 - 1] + e[n / 2])
            }
        }
    }
}

pub fn min_error_select(
    counts: &ObservedCounts,
    plan: &TestPlan,
    grid: &TuningGrid,
    criterion: ErrorCriterion,
) -> Result<Selection> {
    let (_, fits) = fit_grid(counts, plan, grid)?;
    min_error_from_fits(&fits, counts, plan, criterion)
}

pub fn min_error_from_fits(
    fits: &[GridFit],
    counts: &ObservedCounts,
    plan: &TestPlan,
    criterion: ErrorCriterion,
) -> Result<Selection> {
    let scores = fits
        .iter()
        .map(|gf| {
            let s = gf
                .fit
                .as_ref()
                .map_or(f64::INFINITY, |f| error_criterion(&f.theta_hat, counts, plan, criterion));
            grid_score(gf, s)
        })
        .collect();
    selection(scores, 1, false)
}

/// Per-cell term `t_j` entering the CSM density through `x_j`:
/// `(beta/alpha) e^(alpha p) + ((gamma+1)/gamma)(1-beta) p^gamma`, with the
/// `(1-beta) ln p` limit at `gamma = 0`.
fn csm_linear_term(p: f64, tuning: &TuningParams) -> f64 {
    let pf = p.max(PROB_FLOOR);
    let mut t = 0.0;
    if tuning.beta > 0.0 {
        t += tuning.beta / tuning.alpha * (tuning.alpha * pf).exp();
    }
    if tuning.beta < 1.0 {
        t += if tuning.gamma == 0.0 {
            (1.0 - tuning.beta) * pf.ln()
        } else {
            (tuning.gamma + 1.0) / tuning.gamma * (1.0 - tuning.beta) * pf.powf(tuning.gamma)
        };
    }
    t
}

/// `t_x - t_y` without the `1/gamma` cancellation.
fn csm_term_diff(px: f64, py: f64, tuning: &TuningParams) -> f64 {
    let (px, py) = (px.max(PROB_FLOOR), py.max(PROB_FLOOR));
    let mut d = 0.0;
    if tuning.beta > 0.0 {
        let a = tuning.alpha;
        d += tuning.beta / a * ((a * px).exp() - (a * py).exp());
    }
    if tuning.beta < 1.0 {
        let g = tuning.gamma;
        d += (1.0 - tuning.beta)
            * if g == 0.0 {
                px.ln() - py.ln()
            } else {
                (g + 1.0) * ((g * px.ln()).exp_m1() - (g * py.ln()).exp_m1()) / g
            };
    }
    d
}

/// Parameter-only part of the exponent: `sum_j (1-beta) p^(gamma+1) + (beta/alpha) e^(alpha p)(p - 1/alpha)`,
/// with `(1-beta) p` at `gamma = 0`.
fn csm_constant(p: &[f64], tuning: &TuningParams) -> f64 {
    p.iter()
        .map(|&pj| {
            let pf = pj.max(PROB_FLOOR);
            let mut v = 0.0;
            if tuning.beta < 1.0 {
                v += (1.0 - tuning.beta) * pf.powf(tuning.gamma + 1.0);
            }
            if tuning.beta > 0.0 {
                let a = tuning.alpha;
                v += tuning.beta / a * (a * pf).exp() * (pf - 1.0 / a);
            }
            v
        })
        .sum()
}

fn check_indices(plan: &TestPlan, group: usize, cell: usize) -> Result<()> {
    let g = plan
        .groups
        .get(group)
        .ok_or_else(|| Error::InvalidInput(format!("group index {group} out of range")))?;
    if cell >= g.n_cells() {
        return Err(Error::InvalidInput(format!("cell index {cell} out of range for group {group}")));
    }
    Ok(())
}

/// `ln Q_theta(X_ij)`: minus the per-observation divergence term evaluated at
/// the one-hot outcome `X_ij` of group `group`. The average over the `N_i`
/// observations in the defining display is over identical summands and drops out.
pub fn csm_log_q(
    theta: &ModelParams,
    tuning: &TuningParams,
    counts: &ObservedCounts,
    plan: &TestPlan,
    group: usize,
    cell: usize,
) -> Result<f64> {
    theta.validate()?;
    tuning.validate()?;
    plan.validate()?;
    check_indices(plan, group, cell)?;
    if counts.cells().len() != plan.groups.len() {
        return Err(Error::InvalidInput("counts do not match the plan".into()));
    }
    let p = cell_probabilities_unchecked(theta, plan);
    let pg = p.group(group);
    Ok(-(csm_constant(pg, tuning) - csm_linear_term(pg[cell], tuning)))
}

pub fn csm_q(
    theta: &ModelParams,
    tuning: &TuningParams,
    counts: &ObservedCounts,
    plan: &TestPlan,
    group: usize,
    cell: usize,
) -> Result<f64> {
    Ok(csm_log_q(theta, tuning, counts, plan, group, cell)?.exp())
}

/// Neighbours of cell `j` on the chain `X_1 - X_2 - ... - X_n`: previous cell
/// first, then next. End cells have a single neighbour.
pub fn neighbors(n_cells: usize, j: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(2);
    if j > 0 {
        v.push(j - 1);
    }
    if j + 1 < n_cells {
        v.push(j + 1);
    }
    v
}

/// Incoming edges of cell `y`: every `(x, m)` with `neighbors(x)[m] == y`.
pub fn reverse_neighbors(n_cells: usize, y: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for x in [y.wrapping_sub(1), y + 1] {
        if x < n_cells {
            if let Some(m) = neighbors(n_cells, x).iter().position(|&z| z == y) {
                v.push((x, m));
            }
        }
    }
    v
}

/// Concrete score `[(Q(n_m) - Q(X_ij)) / Q(X_ij)]_m` over the neighbours of `X_ij`.
/// `q_values[i][j]` holds `Q(X_ij)`.
pub fn concrete_score(q_values: &[Vec<f64>], group: usize, cell: usize) -> Result<Vec<f64>> {
    let g = q_values
        .get(group)
        .ok_or_else(|| Error::InvalidInput(format!("group index {group} out of range")))?;
    if cell >= g.len() {
        return Err(Error::InvalidInput(format!("cell index {cell} out of range for group {group}")));
    }
    if let Some(v) = g.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!("Q values must be positive and finite, got {v}")));
    }
    Ok(neighbors(g.len(), cell).iter().map(|&m| (g[m] - g[cell]) / g[cell]).collect())
}

/// Lattice, neighbourhood maps and concrete scores of `Q_theta` for every group.
#[derive(Debug, Clone)]
pub struct CsmWorkspace {
    /// `scores[i][j][m]`: concrete score of `X_ij` towards its `m`-th neighbour.
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `Q_data(X_ij) = q_ij`.
    pub q_data: Vec<Vec<f64>>,
}

impl CsmWorkspace {
    /// Builds the scores from `Q_theta` ratios, `Q(y)/Q(x) = exp(t_y - t_x)`.
    pub fn new(theta: &ModelParams, tuning: &TuningParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<Self> {
        theta.validate()?;
        tuning.validate()?;
        plan.validate()?;
        if counts.cells().len() != plan.groups.len()
            || counts.cells().iter().zip(&plan.groups).any(|(c, g)| c.len() != g.n_cells())
        {
            return Err(Error::InvalidInput("counts do not match the plan".into()));
        }
        for i in 0..plan.groups.len() {
            if counts.group_total(i) <= 0.0 {
                return Err(Error::InvalidInput(format!("group {i} has no observations")));
            }
        }
        let p = cell_probabilities_unchecked(theta, plan);
        let scores = p
            .iter()
            .map(|pg| {
                (0..pg.len())
                    .map(|j| {
                        neighbors(pg.len(), j)
                            .iter()
                            .map(|&m| csm_term_diff(pg[m], pg[j], tuning).exp_m1())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            scores,
            q_data: counts.proportions(),
        })
    }

    /// Unbiased data estimate `sum_i (Phi1^(i) - Phi2^(i))`: observation
    /// averages of `sum_m (c^2 + 2c)` at the observed point minus twice the
    /// concrete scores on the observed point's incoming edges. Counts enter
    /// through `q_ij`, i.e. each observation is weighted `1/N_i`.
    pub fn estimate(&self, weights: &[Vec<f64>]) -> f64 {
        let mut phi = 0.0;
        for (sg, wg) in self.scores.iter().zip(weights) {
            let n = sg.len();
            for (y, &wy) in wg.iter().enumerate() {
                if wy == 0.0 {
                    continue;
                }
                let phi1: f64 = sg[y].iter().map(|c| c * c + 2.0 * c).sum();
                let phi2: f64 = reverse_neighbors(n, y).iter().map(|&(x, m)| sg[x][m]).sum();
                phi += wy * (phi1 - 2.0 * phi2);
            }
        }
        phi
    }

    /// Population form with `Q_data` weights:
    /// `sum_x Q_data(x) sum_m (c_m(x)^2 + 2 c_m(x)) - 2 sum_x sum_m Q_data(n_m(x)) c_m(x)`.
    pub fn exhaustive(&self, q_data: &[Vec<f64>]) -> f64 {
        let mut phi = 0.0;
        for (sg, qg) in self.scores.iter().zip(q_data) {
            let n = sg.len();
            for x in 0..n {
                for (m, &nb) in neighbors(n, x).iter().enumerate() {
                    let c = sg[x][m];
                    phi += qg[x] * (c * c + 2.0 * c) - 2.0 * qg[nb] * c;
                }
            }
        }
        phi
    }
}

/// CSM criterion at a fitted `theta_hat`.
pub fn csm_criterion(theta_hat: &ModelParams, tuning: &TuningParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<f64> {
    let ws = CsmWorkspace::new(theta_hat, tuning, counts, plan)?;
    Ok(ws.estimate(&ws.q_data))
}

/// Exhaustive CSM objective with `Q_data = q`.
pub fn csm_exhaustive(theta: &ModelParams, tuning: &TuningParams, counts: &ObservedCounts, plan: &TestPlan) -> Result<f64> {
    let ws = CsmWorkspace::new(theta, tuning, counts, plan)?;
    Ok(ws.exhaustive(&ws.q_data))
}

pub fn csm_select(counts: &ObservedCounts, plan: &TestPlan, grid: &TuningGrid) -> Result<Selection> {
    let (_, fits) = fit_grid(counts, plan, grid)?;
    csm_from_fits(&fits, counts, plan)
}

pub fn csm_from_fits(fits: &[GridFit], counts: &ObservedCounts, plan: &TestPlan) -> Result<Selection> {
    let scores = fits
        .par_iter()
        .map(|gf| {
            let s = gf
                .fit
                .as_ref()
                .and_then(|f| csm_criterion(&f.theta_hat, &gf.tuning, counts, plan).ok())
                .unwrap_or(f64::INFINITY);
            grid_score(gf, s)
        })
        .collect();
    selection(scores, 1, false)
}

/// Selector names accepted by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningMethod {
    Csm,
    Iwj,
    Wj,
    Amax,
    Mae,
    Amed,
}

impl FromStr for TuningMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "csm" => Self::Csm,
            "iwj" => Self::Iwj,
            "wj" => Self::Wj,
            "amax" => Self::Amax,
            "mae" => Self::Mae,
            "amed" => Self::Amed,
            other => return Err(Error::InvalidInput(format!("unknown tuning method {other:?}"))),
        })
    }
}

/// Runs `method` on the grid, fitting each point once.
pub fn select(
    method: TuningMethod,
    counts: &ObservedCounts,
    plan: &TestPlan,
    grid: &TuningGrid,
    weighting: KWeighting,
) -> Result<Selection> {
    let (pilot, fits) = fit_grid(counts, plan, grid)?;
    select_from_fits(method, &fits, &pilot.theta_hat, counts, plan, weighting)
}

pub fn select_from_fits(
    method: TuningMethod,
    fits: &[GridFit],
    pilot: &ModelParams,
    counts: &ObservedCounts,
    plan: &TestPlan,
    weighting: KWeighting,
) -> Result<Selection> {
    match method {
        TuningMethod::Csm => csm_from_fits(fits, counts, plan),
        TuningMethod::Iwj => iwj_from_fits(fits, *pilot, plan, weighting),
        TuningMethod::Wj => selection(wj_scores(fits, pilot, plan, weighting), 1, false),
        TuningMethod::Amax => min_error_from_fits(fits, counts, plan, ErrorCriterion::Amax),
        TuningMethod::Mae => min_error_from_fits(fits, counts, plan, ErrorCriterion::Mae),
        TuningMethod::Amed => min_error_from_fits(fits, counts, plan, ErrorCriterion::Amed),
    }
}

/// Per-grid-point scores as CSV.
pub fn scores_csv(scores: &[GridScore]) -> String {
    let mut s = String::from("alpha,beta,gamma,a,b,mu,converged,score\n");
    for g in scores {
        let th = g.theta.map_or([f64::NAN; 3], |t| t.to_array());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            sig9(g.tuning.alpha),
            sig9(g.tuning.beta),
            sig9(g.tuning.gamma),
            sig9(th[0]),
            sig9(th[1]),
            sig9(th[2]),
            g.converged,
            sig9(g.score)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cell_probabilities, GroupPlan};

    fn plan() -> TestPlan {
        TestPlan::new(vec![
            GroupPlan::new(20, 3.0, vec![0.4, 0.5, 0.7]),
            GroupPlan::new(25, 8.0, vec![0.2, 0.4, 0.8]),
        ])
        .unwrap()
    }

    fn counts() -> ObservedCounts {
        ObservedCounts::from_failures(&plan(), vec![vec![3, 4, 6], vec![5, 6, 9]]).unwrap()
    }

    fn theta() -> ModelParams {
        ModelParams::new(1.6, 1.1, 2.7).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let g = TuningGrid::default();
        assert_eq!(g.gammas.len(), 26);
        assert_eq!(g.gammas[3], 0.14);
        assert_eq!(g.points().unwrap().len(), 26 + 12 * 9 * 26 + 12);
        assert!(g.contains(&TuningParams::new(-15.0, 1.0, 0.02).unwrap()));
        assert!(g.contains(&TuningParams::new(-6.0, 1.0, 0.02).unwrap()));
    }

    #[test]
    fn tie_order_prefers_small_alpha() {
        let a = TuningParams::new(-1.0, 0.5, 0.1).unwrap();
        let b = TuningParams::new(2.0, 0.1, 0.1).unwrap();
        assert_eq!(tie_order(&a, &b), Ordering::Less);
    }

    #[test]
    fn neighbourhoods() {
        assert_eq!(neighbors(4, 0), vec![1]);
        assert_eq!(neighbors(4, 2), vec![1, 3]);
        assert_eq!(neighbors(4, 3), vec![2]);
        assert_eq!(reverse_neighbors(4, 0), vec![(1, 0)]);
        assert_eq!(reverse_neighbors(4, 1), vec![(0, 0), (2, 0)]);
        assert_eq!(reverse_neighbors(4, 3), vec![(2, 1)]);
        let edges: usize = (0..4).map(|j| neighbors(4, j).len()).sum();
        let incoming: usize = (0..4).map(|j| reverse_neighbors(4, j).len()).sum();
        assert_eq!(edges, incoming);
    }

    #[test]
    fn concrete_score_arithmetic() {
        let q = vec![vec![1.0, 2.0, 4.0]];
        assert_eq!(concrete_score(&q, 0, 1).unwrap(), vec![-0.5, 1.0]);
        assert_eq!(concrete_score(&q, 0, 0).unwrap(), vec![1.0]);
        assert!(concrete_score(&[vec![1.0, 0.0]], 0, 0).is_err());
    }

    #[test]
    fn workspace_scores_match_q_ratios() {
        let t = TuningParams::new(-1.0, 0.2, 1.0).unwrap();
        let ws = CsmWorkspace::new(&theta(), &t, &counts(), &plan()).unwrap();
        for i in 0..2 {
            let qv: Vec<Vec<f64>> = (0..2)
                .map(|g| (0..4).map(|j| csm_q(&theta(), &t, &counts(), &plan(), g, j).unwrap()).collect())
                .collect();
            for j in 0..4 {
                let lit = concrete_score(&qv, i, j).unwrap();
                for (a, b) in lit.iter().zip(&ws.scores[i][j]) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn estimator_equals_exhaustive_with_empirical_weights() {
        let t = TuningParams::new(2.5, 0.5, 0.14).unwrap();
        let est = csm_criterion(&theta(), &t, &counts(), &plan()).unwrap();
        let ex = csm_exhaustive(&theta(), &t, &counts(), &plan()).unwrap();
        assert!((est - ex).abs() < 1e-12);
    }

    #[test]
    fn kl_limit_is_continuous() {
        let t0 = TuningParams::new(1.0, 0.3, 0.0).unwrap();
        let t1 = TuningParams::new(1.0, 0.3, 1e-9).unwrap();
        let a = csm_criterion(&theta(), &t0, &counts(), &plan()).unwrap();
        let b = csm_criterion(&theta(), &t1, &counts(), &plan()).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn zero_error_construction() {
        let p = cell_probabilities(&theta(), &plan()).unwrap();
        let cells = p
            .iter()
            .zip(&plan().groups)
            .map(|(p, g)| p.iter().map(|v| v * f64::from(g.n_units)).collect())
            .collect();
        let c = ObservedCounts::from_cells(&plan(), cells).unwrap();
        for crit in [ErrorCriterion::Amax, ErrorCriterion::Mae, ErrorCriterion::Amed] {
            assert!(error_criterion(&theta(), &c, &plan(), crit) < 1e-15);
        }
    }

    #[test]
    fn mae_averages_over_all_cells() {
        let e = absolute_cell_errors(&theta(), &counts(), &plan());
        assert_eq!(e.len(), 8);
        let mae = error_criterion(&theta(), &counts(), &plan(), ErrorCriterion::Mae);
        assert!((mae - e.iter().sum::<f64>() / 8.0).abs() < 1e-16);
    }

    #[test]
    fn single_point_grid() {
        let t = TuningParams::new(-2.0, 0.4, 0.5).unwrap();
        let g = TuningGrid::single(t);
        for m in [TuningMethod::Csm, TuningMethod::Iwj, TuningMethod::Amax] {
            let s = select(m, &counts(), &plan(), &g, KWeighting::Literal).unwrap();
            assert_eq!(s.tuning, t);
            assert_eq!(s.scores.len(), 1);
        }
    }

    #[test]
    fn wj_with_self_pilot_is_trace_only() {
        let t = TuningParams::new(-2.0, 0.4, 0.5).unwrap();
        let fit = mepde(&counts(), &plan(), &t, None).unwrap();
        let s = wj_mse(&t, &fit.theta_hat, &counts(), &plan(), KWeighting::Literal).unwrap();
        assert!(s.bias_term < 1e-16);
        assert_eq!(s.total, s.bias_term + s.trace_term);
    }
}
