//! A-optimal test plans: expected cost, constraint violation and a
//! constrained particle swarm (CPSO) using Deb's feasibility rule.
//!
//! A particle's position is the flat vector
//! `[N_1, ..., N_k, tau_11, ..., tau_1J1, ..., tau_kJk]`. Allocations are
//! floored when a position is evaluated. Hard constraints (`1 <= N_i <= n_max_i`,
//! `0 < tau_i1 <= ... <= tau_iJi`) are enforced by repair; the budget and
//! `tau_max` are soft and enter through the violation `psi`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{asym_covariance, KWeighting};
use crate::error::{Error, Result};
use crate::estimation::TuningParams;
use crate::format::sig9;
use crate::model::{cell_probabilities_unchecked, GroupPlan, ModelParams, TestPlan};
use crate::simulation::replicate_rng;

/// Cost coefficients, budget `C_r` and the time bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Installation.
    pub ca: f64,
    /// Per unit on test.
    pub cu: f64,
    /// Per unit of test time.
    pub c0: f64,
    /// Per inspection.
    pub cs: f64,
    /// Salvage per surviving unit.
    pub cv: f64,
    pub budget: f64,
    pub tau_max: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ca", self.ca), ("cu", self.cu), ("c0", self.c0), ("cs", self.cs), ("cv", self.cv)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be a nonnegative cost, got {v}")));
            }
        }
        if self.cv >= self.cu {
            return Err(Error::Domain("salvage value cv must be below the unit cost cu".into()));
        }
        if !(self.budget > self.ca) {
            return Err(Error::Domain("budget must exceed the installation cost".into()));
        }
        if !(self.tau_max.is_finite() && self.tau_max > 0.0) {
            return Err(Error::Domain("tau_max must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed part of one group of the design: stress rate, number of
/// inspections and the allocation ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignGroupSpec {
    pub nu: f64,
    pub n_inspections: usize,
    #[serde(default = "default_n_max")]
    pub n_max: u32,
}

fn default_n_max() -> u32 {
    75
}

/// A candidate plan with its cost, violation `psi` and `tr(cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSolution {
    pub allocation: Vec<u32>,
    pub inspection_times: Vec<Vec<f64>>,
    pub cost: f64,
    pub violation: f64,
    pub objective: f64,
}

impl DesignSolution {
    pub fn feasible(&self) -> bool {
        self.violation == 0.0
    }

    pub fn to_plan(&self, groups: &[DesignGroupSpec]) -> Result<TestPlan> {
        TestPlan::new(
            self.allocation
                .iter()
                .zip(&self.inspection_times)
                .zip(groups)
                .map(|((&n, tau), g)| GroupPlan::new(n, g.nu, tau.clone()))
                .collect(),
        )
    }
}

/// `C = ca + cu sum N_i + c0 sum tau_iJi + cs sum J_i - (N - D) cv` with the
/// expected number of failures `D = sum_i N_i (1 - p_is(theta))`.
pub fn expected_cost(plan: &TestPlan, theta: &ModelParams, cost: &CostParams) -> Result<f64> {
    theta.validate()?;
    plan.validate()?;
    Ok(expected_cost_unchecked(plan, theta, cost))
}

fn expected_cost_unchecked(plan: &TestPlan, theta: &ModelParams, cost: &CostParams) -> f64 {
    let p = cell_probabilities_unchecked(theta, plan);
    let mut n_total = 0.0;
    let mut survivors = 0.0;
    let mut time = 0.0;
    let mut inspections = 0.0;
    for (i, g) in plan.groups.iter().enumerate() {
        let n = f64::from(g.n_units);
        n_total += n;
        survivors += n * p.survival_cell(i);
        time += g.termination_time();
        inspections += g.inspection_times.len() as f64;
    }
    // N - D is the expected number of survivors
    cost.ca + cost.cu * n_total + cost.c0 * time + cost.cs * inspections - survivors * cost.cv
}

/// `psi = max(0, C - C_r) + sum_i sum_j max(0, max_j tau_ij - tau_max)`.
/// The time term does not depend on `j` and is therefore counted `J_i` times;
/// `normalized` counts it once per group instead.
pub fn constraint_violation(plan: &TestPlan, theta: &ModelParams, cost: &CostParams, normalized: bool) -> Result<f64> {
    let c = expected_cost(plan, theta, cost)?;
    Ok(violation_from(c, plan, cost, normalized))
}

fn violation_from(cost_value: f64, plan: &TestPlan, cost: &CostParams, normalized: bool) -> f64 {
    let mut psi = (cost_value - cost.budget).max(0.0);
    for g in &plan.groups {
        let over = (g.inspection_times.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - cost.tau_max).max(0.0);
        let reps = if normalized { 1.0 } else { g.inspection_times.len() as f64 };
        psi += reps * over;
    }
    psi
}

/// `tr(J^-1 K J^-1) / N` with `N = sum N_i`; `+inf` when `J` is singular or a
/// cell vanishes.
pub fn design_objective(plan: &TestPlan, theta: &ModelParams, tuning: &TuningParams, weighting: KWeighting) -> f64 {
    asym_covariance(theta, plan, tuning, plan.total_units(), weighting).map_or(f64::INFINITY, |s| {
        let t = s.trace();
        if t.is_finite() && t >= 0.0 {
            t
        } else {
            f64::INFINITY
        }
    })
}

/// Swarm settings. `tol` and `stall_window`: the run stops once the gbest
/// objective (or violation, while infeasible) has changed by less than `tol`
/// for `stall_window` consecutive iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwarmConfig {
    pub size: usize,
    pub w: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub stall_window: usize,
    pub seed: u64,
    /// Count the time violation once per group instead of once per inspection.
    pub normalized_violation: bool,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self {
            size: 20,
            w: 0.3,
            c1: 0.5,
            c2: 0.5,
            max_iter: 500,
            tol: 1e-8,
            stall_window: 25,
            seed: 0,
            normalized_violation: false,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.max_iter == 0 || self.stall_window == 0 {
            return Err(Error::InvalidInput("swarm size, max_iter and stall_window must be positive".into()));
        }
        for (name, v) in [("w", self.w), ("c1", self.c1), ("c2", self.c2), ("tol", self.tol)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("swarm.{name} must be nonnegative")));
            }
        }
        Ok(())
    }
}

/// Everything the swarm needs to decode and score a position.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub theta: ModelParams,
    pub tuning: TuningParams,
    pub cost: CostParams,
    pub groups: Vec<DesignGroupSpec>,
    pub weighting: KWeighting,
}

/// Fraction of each coordinate's range a velocity component may take.
pub const VELOCITY_CLAMP: f64 = 0.2;
/// Velocity redraws before the clamp-and-sort fallback.
pub const REPAIR_ATTEMPTS: usize = 50;
/// Initial allocations are drawn from `[1, INIT_N_MAX]`, times from `(0, 1)`.
pub const INIT_N_MAX: f64 = 75.0;

impl DesignProblem {
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.tuning.validate()?;
        self.cost.validate()?;
        if self.groups.is_empty() {
            return Err(Error::InvalidInput("design needs at least one group".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if !(g.nu.is_finite() && g.nu > 0.0) || g.n_inspections == 0 || g.n_max == 0 {
                return Err(Error::InvalidInput(format!(
                    "groups[{i}]: nu, n_inspections and n_max must be positive"
                )));
            }
        }
        Ok(())
    }

    fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn dimension(&self) -> usize {
        self.k() + self.groups.iter().map(|g| g.n_inspections).sum::<usize>()
    }

    /// `(lo, hi)` of coordinate `d`, used for the velocity clamp.
    fn range(&self, d: usize) -> (f64, f64) {
        if d < self.k() {
            (1.0, f64::from(self.groups[d].n_max))
        } else {
            (0.0, self.cost.tau_max)
        }
    }

    /// Hard constraints: allocations within `[1, n_max]`, times positive and
    /// nondecreasing within each group.
    pub fn shape_valid(&self, x: &[f64]) -> bool {
        let k = self.k();
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        if (0..k).any(|i| x[i] < 1.0 || x[i] > f64::from(self.groups[i].n_max)) {
            return false;
        }
        let mut off = k;
        for g in &self.groups {
            let tau = &x[off..off + g.n_inspections];
            if tau[0] <= 0.0 || tau.windows(2).any(|w| w[1] < w[0]) {
                return false;
            }
            off += g.n_inspections;
        }
        true
    }

    /// Clamps allocations into `[1, n_max]`, lifts nonpositive times to a
    /// small positive value and sorts each group's times.
    fn clamp_and_sort(&self, x: &mut [f64]) {
        let k = self.k();
        for i in 0..k {
            x[i] = x[i].clamp(1.0, f64::from(self.groups[i].n_max));
        }
        let mut off = k;
        for g in &self.groups {
            let tau = &mut x[off..off + g.n_inspections];
            for t in tau.iter_mut() {
                if !(*t > 0.0) {
                    *t = 1e-6 * self.cost.tau_max;
                }
            }
            tau.sort_by(f64::total_cmp);
            off += g.n_inspections;
        }
    }

    pub fn decode(&self, x: &[f64]) -> (Vec<u32>, Vec<Vec<f64>>) {
        let k = self.k();
        let alloc = x[..k].iter().map(|v| v.floor().max(1.0) as u32).collect();
        let mut off = k;
        let times = self
            .groups
            .iter()
            .map(|g| {
                let t = x[off..off + g.n_inspections].to_vec();
                off += g.n_inspections;
                t
            })
            .collect();
        (alloc, times)
    }

    pub fn evaluate(&self, x: &[f64], normalized: bool) -> DesignSolution {
        let (allocation, inspection_times) = self.decode(x);
        let plan = TestPlan {
            groups: allocation
                .iter()
                .zip(&inspection_times)
                .zip(&self.groups)
                .map(|((&n, tau), g)| GroupPlan::new(n, g.nu, tau.clone()))
                .collect(),
        };
        let cost = expected_cost_unchecked(&plan, &self.theta, &self.cost);
        let violation = violation_from(cost, &plan, &self.cost, normalized);
        let objective = design_objective(&plan, &self.theta, &self.tuning, self.weighting);
        DesignSolution {
            allocation,
            inspection_times,
            cost,
            violation,
            objective,
        }
    }
}

/// Deb's rule: does `cand` beat `incumbent`?
pub fn deb_better(cand: &DesignSolution, incumbent: &DesignSolution) -> bool {
    match (cand.feasible(), incumbent.feasible()) {
        (true, true) => cand.objective < incumbent.objective,
        (true, false) => true,
        (false, true) => false,
        (false, false) => cand.violation < incumbent.violation,
    }
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pbest: Vec<f64>,
    pub pbest_eval: DesignSolution,
}

/// Outcome of the repair step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repair {
    Unchanged,
    /// Valid after this many velocity redraws.
    Redrawn(usize),
    /// Redraws exhausted; clamped and sorted.
    Clamped,
}

fn velocity_update(
    problem: &DesignProblem,
    cfg: &SwarmConfig,
    x: &[f64],
    v: &[f64],
    pbest: &[f64],
    gbest: &[f64],
    r1: f64,
    r2: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut nv = vec![0.0; x.len()];
    let mut nx = vec![0.0; x.len()];
    for d in 0..x.len() {
        let (lo, hi) = problem.range(d);
        let vmax = VELOCITY_CLAMP * (hi - lo);
        nv[d] = (cfg.w * v[d] + cfg.c1 * r1 * (pbest[d] - x[d]) + cfg.c2 * r2 * (gbest[d] - x[d])).clamp(-vmax, vmax);
        nx[d] = x[d] + nv[d];
    }
    (nx, nv)
}

/// Brings an invalid candidate `(cand_x, cand_v)` back into the hard
/// constraints: the velocity rule is reapplied from `particle` with fresh
/// `r1, r2` up to [`REPAIR_ATTEMPTS`] times, after which the candidate is
/// clamped and sorted. A valid candidate is returned unchanged.
pub fn repair_hard_constraints(
    particle: &Particle,
    cand_x: Vec<f64>,
    cand_v: Vec<f64>,
    gbest: &[f64],
    problem: &DesignProblem,
    cfg: &SwarmConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>, Repair) {
    if problem.shape_valid(&cand_x) {
        return (cand_x, cand_v, Repair::Unchanged);
    }
    let mut last = (cand_x, cand_v);
    for attempt in 1..=REPAIR_ATTEMPTS {
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let (x, v) = velocity_update(
            problem,
            cfg,
            &particle.position,
            &particle.velocity,
            &particle.pbest,
            gbest,
            r1,
            r2,
        );
        if problem.shape_valid(&x) {
            return (x, v, Repair::Redrawn(attempt));
        }
        last = (x, v);
    }
    let (mut x, v) = last;
    problem.clamp_and_sort(&mut x);
    (x, v, Repair::Clamped)
}

/// One row of the per-iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub gbest_phi: f64,
    pub gbest_psi: f64,
    /// Particles whose personal best is feasible.
    pub feasible_pbests: usize,
    pub repairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpsoOutcome {
    pub best: DesignSolution,
    pub feasible: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

fn gbest_index(particles: &[Particle]) -> usize {
    let mut best = 0;
    for (l, p) in particles.iter().enumerate().skip(1) {
        if deb_better(&p.pbest_eval, &particles[best].pbest_eval) {
            best = l;
        }
    }
    best
}

fn initial_position(problem: &DesignProblem, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(problem.dimension());
    for g in &problem.groups {
        let hi = INIT_N_MAX.min(f64::from(g.n_max));
        x.push(if hi > 1.0 { rng.gen_range(1.0..hi) } else { 1.0 });
    }
    for g in &problem.groups {
        let mut tau: Vec<f64> = (0..g.n_inspections)
            .map(|_| loop {
                let t: f64 = rng.gen();
                if t > 0.0 {
                    break t;
                }
            })
            .collect();
        tau.sort_by(f64::total_cmp);
        x.extend(tau);
    }
    x
}

/// Constrained particle swarm over allocations and inspection times.
///
/// Particle moves and repairs draw from one sequential RNG stream; the
/// evaluations run in parallel and the pbest/gbest updates are folded in
/// particle order, so a seed fixes the result.
pub fn cpso(problem: &DesignProblem, cfg: &SwarmConfig) -> Result<CpsoOutcome> {
    problem.validate()?;
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, 0);
    let dim = problem.dimension();
    let starts: Vec<Vec<f64>> = (0..cfg.size).map(|_| initial_position(problem, &mut rng)).collect();
    let evals: Vec<DesignSolution> = starts
        .par_iter()
        .map(|x| problem.evaluate(x, cfg.normalized_violation))
        .collect();
    let mut particles: Vec<Particle> = starts
        .into_iter()
        .zip(evals)
        .map(|(x, e)| Particle {
            velocity: vec![0.0; dim],
            pbest: x.clone(),
            position: x,
            pbest_eval: e,
        })
        .collect();
    let mut g = gbest_index(&particles);
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut stall = 0;
    let mut iterations = 0;
    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let gbest = particles[g].pbest.clone();
        let prev = particles[g].pbest_eval.clone();
        let mut repairs = 0;
        let moves: Vec<(Vec<f64>, Vec<f64>)> = particles
            .iter()
            .map(|p| {
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                let (x, v) = velocity_update(problem, cfg, &p.position, &p.velocity, &p.pbest, &gbest, r1, r2);
                let (x, v, how) = repair_hard_constraints(p, x, v, &gbest, problem, cfg, &mut rng);
                if how != Repair::Unchanged {
                    repairs += 1;
                }
                (x, v)
            })
            .collect();
        let evals: Vec<DesignSolution> = moves
            .par_iter()
            .map(|(x, _)| problem.evaluate(x, cfg.normalized_violation))
            .collect();
        for ((p, (x, v)), e) in particles.iter_mut().zip(moves).zip(evals) {
            if deb_better(&e, &p.pbest_eval) {
                p.pbest = x.clone();
                p.pbest_eval = e;
            }
            p.position = x;
            p.velocity = v;
        }
        g = gbest_index(&particles);
        let best = &particles[g].pbest_eval;
        trace.push(TraceRow {
            iter,
            gbest_phi: if best.feasible() { best.objective } else { f64::INFINITY },
            gbest_psi: best.violation,
            feasible_pbests: particles.iter().filter(|p| p.pbest_eval.feasible()).count(),
            repairs,
        });
        let change = if best.feasible() && prev.feasible() {
            (prev.objective - best.objective).abs()
        } else if best.feasible() != prev.feasible() {
            f64::INFINITY
        } else {
            (prev.violation - best.violation).abs()
        };
        stall = if change < cfg.tol { stall + 1 } else { 0 };
        if stall >= cfg.stall_window {
            break;
        }
    }
    let best = particles[g].pbest_eval.clone();
    Ok(CpsoOutcome {
        feasible: best.feasible(),
        best,
        iterations,
        trace,
    })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iter,gbest_phi,gbest_psi,feasible_pbests,repairs\n");
    for r in trace {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            sig9(r.gbest_phi),
            sig9(r.gbest_psi),
            r.feasible_pbests,
            r.repairs
        ));
    }
    s
}
