#![allow(dead_code)]

use nosd_core::model::{GroupPlan, ModelParams, TestPlan};
use nosd_core::ObservedCounts;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

pub fn oracles() -> Value {
    serde_json::from_str(include_str!("../oracles/oracles.json")).unwrap()
}

pub fn f64s(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

pub fn theta0() -> ModelParams {
    ModelParams::new(1.6, 1.1, 2.7).unwrap()
}

pub fn three_group_plan() -> TestPlan {
    nosd_core::simulation::reference_plan()
}

pub fn reference_counts() -> ObservedCounts {
    ObservedCounts::from_failures(&three_group_plan(), vec![vec![3, 4, 6], vec![5, 6, 9], vec![7, 8, 9]]).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_theta(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams::new(rng.gen_range(0.5..3.0), rng.gen_range(0.2..2.0), rng.gen_range(0.8..4.0)).unwrap()
}

/// Random plan whose cells stay comfortably away from 0.
pub fn random_plan(rng: &mut ChaCha8Rng, theta: &ModelParams) -> TestPlan {
    loop {
        let k = rng.gen_range(1..=3);
        let groups: Vec<GroupPlan> = (0..k)
            .map(|_| {
                let j = rng.gen_range(1..=4);
                let mut tau: Vec<f64> = (0..j).map(|_| rng.gen_range(0.05..1.2)).collect();
                tau.sort_by(f64::total_cmp);
                GroupPlan::new(rng.gen_range(5..60), rng.gen_range(0.5..10.0), tau)
            })
            .collect();
        let plan = TestPlan::new(groups).unwrap();
        let p = nosd_core::model::cell_probabilities(theta, &plan).unwrap();
        if p.iter().flatten().all(|&v| v > 1e-3) {
            return plan;
        }
    }
}

/// Random counts on the plan (not necessarily close to the model).
pub fn random_counts(rng: &mut ChaCha8Rng, plan: &TestPlan) -> ObservedCounts {
    let failures = plan
        .groups
        .iter()
        .map(|g| {
            let mut left = g.n_units;
            g.inspection_times
                .iter()
                .map(|_| {
                    let c = rng.gen_range(0..=left / 2);
                    left -= c;
                    c
                })
                .collect()
        })
        .collect();
    ObservedCounts::from_failures(plan, failures).unwrap()
}

pub fn expected_counts(theta: &ModelParams, plan: &TestPlan) -> ObservedCounts {
    let p = nosd_core::model::cell_probabilities(theta, plan).unwrap();
    let cells = p
        .iter()
        .zip(&plan.groups)
        .map(|(p, g)| p.iter().map(|v| v * f64::from(g.n_units)).collect())
        .collect();
    ObservedCounts::from_cells(plan, cells).unwrap()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

/// Central difference in relative step `h * x_k`.
pub fn fd_grad<F: Fn(&[f64; 3]) -> f64>(f: F, x: &[f64; 3], h: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for k in 0..3 {
        let step = h * x[k];
        let mut xp = *x;
        let mut xm = *x;
        xp[k] += step;
        xm[k] -= step;
        g[k] = (f(&xp) - f(&xm)) / (2.0 * step);
    }
    g
}
