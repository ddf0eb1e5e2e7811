//! Analytic gradients against central finite differences of objectives
//! recomputed here from their definitions.

use nalgebra::{DMatrix, DVector};
use popql_core::dual::{dual_gradient, dual_objective, DualState, GSource};
use popql_core::features::{random_unit_features_mdp, FeatureMap};
use popql_core::models::{random_mdp, random_policy, DiscretePolicy, FiniteMdp, SampleDistribution};
use popql_core::policy::{softmax_rows, PolicyTerms};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const REL_TOL: f64 = 1e-5;

fn successor(mdp: &FiniteMdp, pi: &DMatrix<f64>, rows: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (mdp.n(), mdp.m());
    let mut out = DMatrix::zeros(n * m, rows.ncols());
    for x in 0..n * m {
        for s in 0..n {
            for a in 0..m {
                let w = mdp.p()[(x, s)] * pi[(s, a)];
                if w != 0.0 {
                    let r = rows.row(s * m + a) * w;
                    let mut o = out.row_mut(x);
                    o += r;
                }
            }
        }
    }
    out
}

fn random_mu(rng: &mut ChaCha8Rng, len: usize) -> SampleDistribution {
    SampleDistribution::normalized(DVector::from_fn(len, |_, _| rng.gen_range(0.05..1.0))).unwrap()
}

/// `Σ μ exp(‖ΦA‖² + ‖ΦB‖² + 2⟨ΦB, Ψ A⟩)`
fn dual_value(phi: &DMatrix<f64>, psi: &DMatrix<f64>, mu: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let (ya, yb, yn) = (phi * a, phi * b, psi * a);
    (0..phi.nrows())
        .map(|x| {
            let e = ya.row(x).norm_squared() + yb.row(x).norm_squared() + 2.0 * yb.row(x).dot(&yn.row(x));
            mu[x] * e.exp()
        })
        .sum()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

struct DualCase {
    mdp: FiniteMdp,
    map: FeatureMap,
    pi: DiscretePolicy,
    mu: SampleDistribution,
    dual: DualState,
}

fn dual_case(seed: u64) -> DualCase {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let n = rng.gen_range(2..6);
    let m = rng.gen_range(1..4);
    let k = rng.gen_range(2..6);
    let rank = rng.gen_range(1..4);
    let mdp = random_mdp(seed, n, m, 0.6).unwrap();
    let map = random_unit_features_mdp(seed + 7, n, m, k).unwrap();
    let pi = random_policy(seed + 3, n, m);
    let mu = random_mu(&mut rng, n * m);
    let dual = DualState::random(k, rank, n * m, 0.4, seed);
    DualCase { mdp, map, pi, mu, dual }
}

#[test]
fn dual_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..60 {
        let c = dual_case(seed);
        let phi = c.map.phi().clone();
        let psi = successor(&c.mdp, c.pi.probs(), &phi);
        let mu = c.mu.weights();
        let lib = dual_objective(&c.map, &c.mdp, &c.pi, &c.dual, &c.mu).unwrap();
        let mine = dual_value(&phi, &psi, mu, &c.dual.a, &c.dual.b);
        assert!(
            (lib.value - mine).abs() <= 1e-12 * mine.abs().max(1.0),
            "objective {} vs {mine}",
            lib.value
        );
        let g = dual_gradient(&c.map, &c.mdp, &c.pi, &c.dual, &c.mu, GSource::Exact).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for which in 0..2 {
            let base = if which == 0 { &c.dual.a } else { &c.dual.b };
            let grad = if which == 0 { &g.da } else { &g.db };
            for i in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[i] += H;
                minus[i] -= H;
                let f = |m: &DMatrix<f64>| {
                    if which == 0 {
                        dual_value(&phi, &psi, mu, m, &c.dual.b)
                    } else {
                        dual_value(&phi, &psi, mu, &c.dual.a, m)
                    }
                };
                numeric.push((f(&plus) - f(&minus)) / (2.0 * H));
                analytic.push(grad[i]);
            }
        }
        let e = rel_err(&analytic, &numeric);
        worst = worst.max(e);
        assert!(e <= REL_TOL, "seed {seed}: relative error {e:.3e}");
    }
    assert!(worst <= REL_TOL);
}

fn entropy(row: impl Iterator<Item = f64>) -> f64 {
    -row.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// `Σρ Σπ Q_w + α Σρ H(π) + 2β Σ_x q(x) Σ_{s'} P(s'|x) Σ_{a'} π(a'|s') ⟨yB(x), yA(s', a')⟩`
#[allow(clippy::too_many_arguments)]
fn policy_value(
    mdp: &FiniteMdp,
    phi: &DMatrix<f64>,
    dual: &DualState,
    rho: &DVector<f64>,
    q: &DVector<f64>,
    w: &DVector<f64>,
    beta: f64,
    alpha: f64,
    logits: &DMatrix<f64>,
) -> f64 {
    let (n, m) = (mdp.n(), mdp.m());
    let pi = softmax_rows(logits);
    let qw = phi * w;
    let (ya, yb) = (phi * &dual.a, phi * &dual.b);
    let mut total = 0.0;
    for s in 0..n {
        let v: f64 = (0..m).map(|a| pi[(s, a)] * qw[s * m + a]).sum();
        total += rho[s] * (v + alpha * entropy(pi.row(s).iter().copied()));
    }
    for x in 0..n * m {
        for s2 in 0..n {
            for a2 in 0..m {
                let weight = q[x] * mdp.p()[(x, s2)] * pi[(s2, a2)];
                total += 2.0 * beta * weight * yb.row(x).dot(&ya.row(s2 * m + a2));
            }
        }
    }
    total
}

#[test]
fn policy_gradient_matches_finite_differences() {
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let n = rng.gen_range(2..6);
        let m = rng.gen_range(2..5);
        let k = rng.gen_range(2..6);
        let mdp = random_mdp(seed + 100, n, m, 0.7).unwrap();
        let map = random_unit_features_mdp(seed + 200, n, m, k).unwrap();
        let dual = DualState::random(k, 2, n * m, 0.5, seed);
        let rho = random_mu(&mut rng, n).weights().clone();
        let q = random_mu(&mut rng, n * m).weights().clone();
        let w = DVector::from_fn(k, |_, _| rng.gen_range(-2.0..2.0));
        let logits = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.5..1.5));
        let (beta, alpha) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..0.5));
        let terms = PolicyTerms {
            map: &map,
            mdp: &mdp,
            dual: &dual,
            rho: &rho,
            q: &q,
            w: &w,
            beta,
            alpha,
        };
        let f = |l: &DMatrix<f64>| policy_value(&mdp, map.phi(), &dual, &rho, &q, &w, beta, alpha, l);
        let lib = terms.objective(&logits).unwrap();
        assert!(
            (lib - f(&logits)).abs() <= 1e-12 * lib.abs().max(1.0),
            "seed {seed}: objective mismatch"
        );
        let grad = terms.gradient(&logits).unwrap();
        let mut numeric = Vec::new();
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[i] += H;
            minus[i] -= H;
            numeric.push((f(&plus) - f(&minus)) / (2.0 * H));
        }
        let e = rel_err(grad.as_slice(), &numeric);
        assert!(e <= REL_TOL, "seed {seed}: relative error {e:.3e}");
    }
}
