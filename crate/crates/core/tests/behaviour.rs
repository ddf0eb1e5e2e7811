//! Behavioural checks on the canonical instances: long TD runs, dual
//! optimality, stochastic dual steps and policy-side sanity.

use nalgebra::{DMatrix, DVector};
use popql_core::dual::{dual_gradient, solve_dual, stochastic_dual_step, DualConfig, DualProblem, DualState, GSource};
use popql_core::features::random_unit_features_mdp;
use popql_core::models::{
    build_frozen_lake, build_three_state, enumerate_transitions, mdp_to_mrp, random_mdp, stationary_distribution,
    three_state_family, DiscretePolicy, FiniteMdp, SampleDistribution,
};
use popql_core::policy::{behavior_cloning_weights, PolicyTerms, ReturnNormalizer};
use popql_core::td::{approx_error, lstd_weighted, run_td, TdConfig, TdProblem};

fn three_state() -> (popql_core::features::FeatureMap, FiniteMdp, DiscretePolicy) {
    let (mrp, map) = build_three_state();
    (map, mrp.as_mdp(), DiscretePolicy::uniform(3, 1))
}

#[test]
fn vanilla_td_diverges_off_policy() {
    let (map, mdp, pi) = three_state();
    let problem = TdProblem::new(&map, &mdp, &pi, &three_state_family(0.8).unwrap()).unwrap();
    let config = TdConfig {
        steps: 10_000_000,
        record_every: 100_000,
        ..TdConfig::default()
    };
    let trace = run_td(&problem, &DVector::from_element(3, 1.0), "vanilla", &config).unwrap();
    assert!(trace.diverged);
    assert!(
        trace.diverged_at.is_some_and(|s| s > 100_000),
        "{:?}",
        trace.diverged_at
    );
}

#[test]
fn reweighted_td_converges_off_policy() {
    let (map, mdp, pi) = three_state();
    let mu = three_state_family(0.8).unwrap();
    let sol = solve_dual(&map, &mdp, &pi, &mu, &DualConfig::default()).unwrap();
    let problem = TdProblem::new(&map, &mdp, &pi, &mu).unwrap();
    let config = TdConfig {
        steps: 20_000_000,
        record_every: 200_000,
        converge_tol: Some(1e-9),
        ..TdConfig::default()
    };
    let trace = run_td(&problem, &sol.reweighting.u, "popql", &config).unwrap();
    assert!(!trace.diverged && trace.converged);
    let nu = three_state_family(0.5).unwrap();
    let on = lstd_weighted(&map, &mdp, &pi, nu.weights()).unwrap();
    let on_error = approx_error(&map, &on.w, problem.reference(), mu.weights());
    assert!(
        trace.final_error() <= 10.0 * on_error,
        "{} vs {on_error}",
        trace.final_error()
    );
}

#[test]
fn optimized_dual_beats_rank_one_grid() {
    let (map, mdp, pi) = three_state();
    let mu = three_state_family(0.8).unwrap();
    let problem = DualProblem::new(&map, &mdp, &pi, &mu).unwrap();
    let sol = solve_dual(&map, &mdp, &pi, &mu, &DualConfig::default()).unwrap();
    let ticks: Vec<f64> = (0..=24).map(|i| -1.5 + 0.125 * i as f64).collect();
    let mut grid_best = f64::INFINITY;
    for &a0 in &ticks {
        for &a1 in &ticks {
            for &b0 in &ticks {
                for &b1 in &ticks {
                    let a = DMatrix::from_column_slice(2, 1, &[a0, a1]);
                    let b = DMatrix::from_column_slice(2, 1, &[b0, b1]);
                    let dual = DualState::from_factors(a, b, 3).unwrap();
                    grid_best = grid_best.min(problem.objective(&dual).unwrap().value);
                }
            }
        }
    }
    assert!(grid_best < 1.0 && sol.objective < 1.0);
    assert!(
        sol.objective <= grid_best + 1e-6,
        "{} vs grid {grid_best}",
        sol.objective
    );
}

#[test]
fn point_mass_gradient_is_single_sample() {
    let mdp = random_mdp(3, 3, 2, 0.8).unwrap();
    let map = random_unit_features_mdp(4, 3, 2, 3).unwrap();
    let pi = DiscretePolicy::uniform(3, 2);
    let dual = DualState::random(3, 2, 6, 0.5, 2);
    let x = 3;
    let mut w = DVector::zeros(6);
    w[x] = 1.0;
    let mu = SampleDistribution::normalized(w).unwrap();
    let g = dual_gradient(&map, &mdp, &pi, &dual, &mu, GSource::Exact).unwrap();
    let phi = map.phi().row(x).transpose();
    let mut psi = DVector::zeros(3);
    for s in 0..3 {
        for a in 0..2 {
            psi += map.phi().row(s * 2 + a).transpose() * (mdp.p()[(x, s)] * pi.prob(s, a));
        }
    }
    let (ya, yb, yn) = (dual.a.tr_mul(&phi), dual.b.tr_mul(&phi), dual.a.tr_mul(&psi));
    let e = (ya.norm_squared() + yb.norm_squared() + 2.0 * yb.dot(&yn)).exp();
    let da = (&phi * ya.transpose() + &psi * yb.transpose()) * (2.0 * e);
    let db = (&phi * yb.transpose() + &phi * yn.transpose()) * (2.0 * e);
    assert!((g.da - da).amax() < 1e-12);
    assert!((g.db - db).amax() < 1e-12);
}

#[test]
fn repeated_stochastic_steps_approach_exact_optimum() {
    let (map, mdp, pi) = three_state();
    let mu = three_state_family(0.8).unwrap();
    let problem = DualProblem::new(&map, &mdp, &pi, &mu).unwrap();
    let sol = solve_dual(&map, &mdp, &pi, &mu, &DualConfig::default()).unwrap();
    let batch = enumerate_transitions(&mdp, &pi, &mu).unwrap();
    let mut dual = DualState::random(2, 4, 3, 1e-3, 0).with_rates(5e-2, 0.5);
    for _ in 0..60_000 {
        stochastic_dual_step(&mut dual, &batch, &map).unwrap();
    }
    let value = problem.objective(&dual).unwrap().value;
    assert!(
        (value - sol.objective).abs() <= 0.05 * sol.objective,
        "{value} vs {}",
        sol.objective
    );
}

#[test]
fn greedy_logit_direction_does_not_decrease_objective() {
    let mdp = random_mdp(8, 4, 3, 0.7).unwrap();
    let map = random_unit_features_mdp(9, 4, 3, 3).unwrap();
    let dual = DualState::random(3, 2, 12, 0.5, 1);
    let rho = DVector::from_element(4, 0.25);
    let q = DVector::from_element(12, 1.0 / 12.0);
    let w = DVector::from_vec(vec![0.7, -1.2, 0.4]);
    let terms = PolicyTerms {
        map: &map,
        mdp: &mdp,
        dual: &dual,
        rho: &rho,
        q: &q,
        w: &w,
        beta: 0.0,
        alpha: 0.0,
    };
    let logits = DMatrix::from_fn(4, 3, |s, a| ((s * 3 + a) as f64 * 0.37).sin());
    let grad = terms.gradient(&logits).unwrap();
    let qw = map.phi() * &w;
    for s in 0..4 {
        let best = (0..3).max_by(|&a, &b| qw[s * 3 + a].total_cmp(&qw[s * 3 + b])).unwrap();
        assert!(grad[(s, best)] >= 0.0, "state {s}");
    }
}

fn dither(policy: &DiscretePolicy, eps: f64) -> DiscretePolicy {
    let m = policy.probs().ncols() as f64;
    DiscretePolicy::new(policy.probs().map(|p| (1.0 - eps) * p + eps / m)).unwrap()
}

#[test]
fn dithered_optimal_policy_is_interior_and_cloned() {
    let mdp = build_frozen_lake(false, 1.0, 0.95).unwrap();
    let norm = ReturnNormalizer::new(&mdp).unwrap();
    let dithered = dither(norm.optimal_policy(), 0.2);
    let j = norm.evaluate(&dithered).unwrap();
    assert!(j > 0.0 && j < 1.0, "{j}");
    let occupancy = stationary_distribution(mdp_to_mrp(&mdp, &dithered).unwrap().p()).unwrap();
    let bc = behavior_cloning_weights(occupancy.weights(), 16, 4).unwrap();
    for s in 0..16 {
        let best = (0..4).find(|&a| norm.optimal_policy().prob(s, a) == 1.0).unwrap();
        assert!((bc.prob(s, best) - (0.8 + 0.2 / 4.0)).abs() < 1e-10, "state {s}");
    }
}
