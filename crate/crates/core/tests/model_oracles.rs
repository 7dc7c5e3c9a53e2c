mod common;

use common::*;
use nosd_core::model::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn survival_matches_high_precision_value() {
    let o = oracles();
    let sp = &o["survival_point"];
    let v = survival(&theta0(), 3.0, 0.7).unwrap();
    assert!(rel_close(v, sp["value"].as_f64().unwrap(), 1e-12));
    assert_eq!(survival(&theta0(), 3.0, 0.0).unwrap(), 1.0);
}

#[test]
fn reference_cells_match_high_precision_values() {
    let o = oracles();
    let p = cell_probabilities(&theta0(), &three_group_plan()).unwrap();
    for (got, want) in p.iter().zip(o["reference_cells"].as_array().unwrap()) {
        for (g, w) in got.iter().zip(f64s(want)) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn exp_minus_h_is_survival() {
    let o = oracles();
    for case in o["hazard_identity"].as_array().unwrap() {
        let th = f64s(&case["theta"]);
        let theta = ModelParams::new(th[0], th[1], th[2]).unwrap();
        let nu = case["nu"].as_f64().unwrap();
        let t = case["t"].as_f64().unwrap();
        let h = cumulative_hazard(&theta, nu, t).unwrap();
        assert!(rel_close(h, case["cum_hazard"].as_f64().unwrap(), 1e-12));
        assert!(rel_close((-h).exp(), case["survival"].as_f64().unwrap(), 1e-12));
        assert!(rel_close(survival(&theta, nu, t).unwrap(), case["survival"].as_f64().unwrap(), 1e-12));
    }
}

#[test]
fn scores_match_high_precision_derivatives() {
    let o = oracles();
    let u = score_vectors(&theta0(), &three_group_plan()).unwrap();
    for (gu, gw) in u.groups().iter().zip(o["reference_scores"].as_array().unwrap()) {
        for (uj, wj) in gu.iter().zip(gw.as_array().unwrap()) {
            for (a, b) in uj.iter().zip(f64s(wj)) {
                assert!(rel_close(*a, b, 1e-10), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn scores_match_finite_differences_on_random_instances() {
    let mut r = rng(11);
    for _ in 0..60 {
        let theta = random_theta(&mut r);
        let plan = random_plan(&mut r, &theta);
        let u = score_vectors(&theta, &plan).unwrap();
        let dp = cell_gradients(&theta, &plan).unwrap();
        let p = cell_probabilities(&theta, &plan).unwrap();
        for (i, g) in plan.groups.iter().enumerate() {
            for j in 0..g.n_cells() {
                let ln_p = |x: &[f64; 3]| {
                    let t = ModelParams::from_array(*x).unwrap();
                    cell_probabilities(&t, &plan).unwrap().group(i)[j].ln()
                };
                let prob = |x: &[f64; 3]| {
                    let t = ModelParams::from_array(*x).unwrap();
                    cell_probabilities(&t, &plan).unwrap().group(i)[j]
                };
                let fd = fd_grad(ln_p, &theta.to_array(), 1e-6);
                let fdp = fd_grad(prob, &theta.to_array(), 1e-6);
                for k in 0..3 {
                    let scale = u.group(i)[j][k].abs().max(1e-3);
                    assert!((u.group(i)[j][k] - fd[k]).abs() <= 1e-5 * scale, "u {:?} fd {:?}", u.group(i)[j], fd);
                    let dscale = dp[i][j][k].abs().max(1e-3 * p.group(i)[j]);
                    assert!((dp[i][j][k] - fdp[k]).abs() <= 1e-5 * dscale);
                    assert!((p.group(i)[j] * u.group(i)[j][k] - dp[i][j][k]).abs() <= 1e-12 * dscale.max(1e-300) + 1e-15);
                }
            }
        }
    }
}

#[test]
fn weighted_scores_sum_to_zero() {
    let mut r = rng(12);
    for _ in 0..60 {
        let theta = random_theta(&mut r);
        let plan = random_plan(&mut r, &theta);
        let u = score_vectors(&theta, &plan).unwrap();
        let p = cell_probabilities(&theta, &plan).unwrap();
        for (pg, ug) in p.iter().zip(u.groups()) {
            for k in 0..3 {
                let s: f64 = pg.iter().zip(ug).map(|(pj, uj)| pj * uj[k]).sum();
                assert!(s.abs() < 1e-10, "{s}");
            }
        }
    }
}

#[test]
fn hazard_is_derivative_of_cumulative_hazard() {
    let mut r = rng(13);
    for _ in 0..100 {
        let theta = random_theta(&mut r);
        let nu = r.gen_range(0.5..10.0);
        let t = r.gen_range(0.05..1.5);
        let h = 1e-6 * t;
        let fd = (cumulative_hazard(&theta, nu, t + h).unwrap() - cumulative_hazard(&theta, nu, t - h).unwrap()) / (2.0 * h);
        assert!(rel_close(hazard(&theta, nu, t).unwrap(), fd, 1e-6));
    }
}

#[test]
fn sampled_lifetimes_reproduce_cell_probabilities() {
    let plan = three_group_plan();
    let p = cell_probabilities(&theta0(), &plan).unwrap();
    let mut r = rng(14);
    let n = 1_000_000usize;
    for (i, g) in plan.groups.iter().enumerate() {
        let mut counts = vec![0usize; g.n_cells()];
        for _ in 0..n {
            let u: f64 = r.gen_range(f64::EPSILON..1.0);
            let t = sample_lifetime(&theta0(), g.stress_rate, u).unwrap();
            let cell = nosd_core::estimation::interval_index(&g.inspection_times, t).unwrap_or(g.n_cells() - 1);
            counts[cell] += 1;
        }
        for (c, &pj) in counts.iter().zip(p.group(i)) {
            let se = (pj * (1.0 - pj) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pj).abs() < 4.0 * se, "group {i}: {c} vs {pj}");
        }
    }
}

#[test]
fn sampling_rejects_degenerate_draws() {
    assert!(sample_lifetime(&theta0(), 3.0, 0.0).is_err());
    assert!(sample_lifetime(&theta0(), 3.0, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cells_are_probabilities(a in 0.1f64..5.0, b in 0.05f64..4.0, mu in 0.2f64..8.0,
                               nu in 0.05f64..15.0, mut tau in prop::collection::vec(0.0f64..2.0, 1..6)) {
        tau.sort_by(f64::total_cmp);
        if tau[0] == 0.0 { tau[0] = 1e-3; tau.sort_by(f64::total_cmp); }
        let theta = ModelParams::new(a, b, mu).unwrap();
        let plan = TestPlan::new(vec![GroupPlan::new(10, nu, tau)]).unwrap();
        let p = cell_probabilities(&theta, &plan).unwrap();
        let s: f64 = p.group(0).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(p.group(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn survival_nonincreasing_and_hazard_nondecreasing(a in 0.1f64..5.0, b in 0.05f64..4.0, mu in 0.2f64..8.0,
                                                        nu in 0.05f64..15.0, t1 in 0.0f64..3.0, dt in 0.0f64..3.0) {
        let theta = ModelParams::new(a, b, mu).unwrap();
        let t2 = t1 + dt;
        prop_assert!(survival(&theta, nu, t1).unwrap() >= survival(&theta, nu, t2).unwrap());
        prop_assert!(cumulative_hazard(&theta, nu, t1).unwrap() <= cumulative_hazard(&theta, nu, t2).unwrap());
    }

    #[test]
    fn sampling_round_trip(u in 1e-9f64..(1.0 - 1e-9), nu in 0.1f64..10.0) {
        let t = sample_lifetime(&theta0(), nu, u).unwrap();
        prop_assert!((survival(&theta0(), nu, t).unwrap() - u).abs() < 1e-10);
    }
}
