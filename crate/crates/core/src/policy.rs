//! Softmax actor, the joint policy/sampling objective and its gradient, the
//! full training loop, and the behavior-cloning and return baselines.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cert::lambda_min;
use crate::dual::{normalized_weights, stochastic_dual_step, DualProblem, DualState, ReweightingResult};
use crate::error::{PopqlError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::models::{
    exact_q, expected_next, sample_transitions, value_iteration, DiscretePolicy, FiniteMdp, SampleDistribution,
    TransitionRecord,
};
use crate::td::{exact_td_gradient, td_step, LinearValue, TdBatch, DIVERGENCE_CEILING};

/// Row-wise softmax policy with an entropy coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub logits: DMatrix<f64>,
    pub alpha: f64,
    /// Enables dual ascent on α toward this mean entropy.
    pub target_entropy: Option<f64>,
    pub lr_alpha: f64,
}

impl SoftmaxPolicy {
    pub fn uniform(n: usize, m: usize, alpha: f64) -> Self {
        Self {
            logits: DMatrix::zeros(n, m),
            alpha,
            target_entropy: None,
            lr_alpha: 1e-3,
        }
    }

    pub fn n(&self) -> usize {
        self.logits.nrows()
    }

    pub fn m(&self) -> usize {
        self.logits.ncols()
    }

    pub fn probs(&self) -> DiscretePolicy {
        DiscretePolicy::new(softmax_rows(&self.logits)).expect("softmax rows are distributions")
    }

    /// Entropy of each state's action distribution.
    pub fn entropies(&self) -> DVector<f64> {
        let p = softmax_rows(&self.logits);
        DVector::from_fn(self.n(), |s, _| row_entropy(p.row(s).iter().copied()))
    }

    /// `Σ_s ρ(s) H(π(·|s))`
    pub fn mean_entropy(&self, rho: &DVector<f64>) -> f64 {
        self.entropies().dot(rho)
    }

    /// One dual-ascent step `α ← max(0, α + lr (target − H̄))`.
    pub fn tune_alpha(&mut self, mean_entropy: f64) {
        if let Some(target) = self.target_entropy {
            self.alpha = (self.alpha + self.lr_alpha * (target - mean_entropy)).max(0.0);
        }
    }
}

pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn row_entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Ingredients of the joint objective with the sampling distribution `q`
/// and the critic `w` held fixed.
#[derive(Debug, Clone, Copy)]
pub struct PolicyTerms<'a> {
    pub map: &'a FeatureMap,
    pub mdp: &'a FiniteMdp,
    pub dual: &'a DualState,
    /// State weights for the value and entropy terms.
    pub rho: &'a DVector<f64>,
    /// Pair weights for the coupling term.
    pub q: &'a DVector<f64>,
    pub w: &'a DVector<f64>,
    pub beta: f64,
    pub alpha: f64,
}

impl PolicyTerms<'_> {
    fn check(&self, logits: &DMatrix<f64>) -> Result<()> {
        let (n, m) = (self.mdp.n(), self.mdp.m());
        if logits.shape() != (n, m) {
            return Err(PopqlError::InvalidPolicy(format!(
                "logits are {:?}, expected ({n}, {m})",
                logits.shape()
            )));
        }
        if self.rho.len() != n {
            return Err(PopqlError::DimensionMismatch {
                expected: n,
                found: self.rho.len(),
            });
        }
        if self.q.len() != n * m || self.map.rows() != n * m {
            return Err(PopqlError::DimensionMismatch {
                expected: n * m,
                found: self.q.len(),
            });
        }
        Ok(())
    }

    /// Per-pair payoffs of the value term and of the coupling term.
    fn payoffs(&self) -> (DVector<f64>, DVector<f64>) {
        let (n, m) = (self.mdp.n(), self.mdp.m());
        let qw = self.map.phi() * self.w;
        let yb = self.map.phi() * &self.dual.b;
        let ya = self.map.phi() * &self.dual.a;
        // Y(s') = Σ_x q(x) p(s'|x) yB(x)
        let mut weighted = yb;
        for (x, mut row) in weighted.row_iter_mut().enumerate() {
            row *= self.q[x];
        }
        let y = self.mdp.p().tr_mul(&weighted);
        let coupling = DVector::from_fn(n * m, |x, _| y.row(x / m).dot(&ya.row(x)));
        (qw, coupling)
    }

    /// `Σρ Σπ Q_w + α Σρ H(π) + 2β Σ_x q(x) E_{s', a'∼π}[⟨yB, yA'⟩]`
    pub fn objective(&self, logits: &DMatrix<f64>) -> Result<f64> {
        self.check(logits)?;
        let m = self.mdp.m();
        let p = softmax_rows(logits);
        let (qw, coupling) = self.payoffs();
        let mut total = 0.0;
        for s in 0..self.mdp.n() {
            let row = p.row(s);
            let value: f64 = (0..m).map(|a| row[a] * qw[s * m + a]).sum();
            let cpl: f64 = (0..m).map(|a| row[a] * coupling[s * m + a]).sum();
            total += self.rho[s] * (value + self.alpha * row_entropy(row.iter().copied())) + 2.0 * self.beta * cpl;
        }
        Ok(total)
    }

    /// Gradient of [`PolicyTerms::objective`] with respect to the logits.
    pub fn gradient(&self, logits: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(logits)?;
        let (n, m) = (self.mdp.n(), self.mdp.m());
        let p = softmax_rows(logits);
        let (qw, coupling) = self.payoffs();
        let mut grad = DMatrix::zeros(n, m);
        for s in 0..n {
            let row = p.row(s);
            let v: f64 = (0..m).map(|a| row[a] * qw[s * m + a]).sum();
            let c: f64 = (0..m).map(|a| row[a] * coupling[s * m + a]).sum();
            let h = row_entropy(row.iter().copied());
            for b in 0..m {
                let pb = row[b];
                let log_pb = if pb > 0.0 { pb.ln() } else { 0.0 };
                grad[(s, b)] = self.rho[s] * pb * (qw[s * m + b] - v) - self.alpha * self.rho[s] * pb * (log_pb + h)
                    + 2.0 * self.beta * pb * (coupling[s * m + b] - c);
            }
        }
        Ok(grad)
    }
}

/// Ascent direction on the logits for the joint objective, with `ρ` the
/// state marginal of `mu` and the coupling weighted by `q`.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &SoftmaxPolicy,
    dual: &DualState,
    mu: &SampleDistribution,
    q: &SampleDistribution,
    w: &DVector<f64>,
    beta: f64,
) -> Result<DMatrix<f64>> {
    let rho = mu.state_marginal(mdp.m());
    PolicyTerms {
        map,
        mdp,
        dual,
        rho: &rho,
        q: q.weights(),
        w,
        beta,
        alpha: policy.alpha,
    }
    .gradient(&policy.logits)
}

/// Exact discounted return from the start distribution and its normalization
/// between the uniform policy (0) and an optimal policy (1).
#[derive(Debug, Clone)]
pub struct ReturnNormalizer {
    mdp: FiniteMdp,
    optimal: DiscretePolicy,
    j_uniform: f64,
    j_optimal: f64,
}

impl ReturnNormalizer {
    pub fn new(mdp: &FiniteMdp) -> Result<Self> {
        let (_, optimal) = value_iteration(mdp, 1e-12, 1_000_000);
        let j_uniform = expected_return(mdp, &DiscretePolicy::uniform(mdp.n(), mdp.m()))?;
        let j_optimal = expected_return(mdp, &optimal)?;
        if !(j_optimal > j_uniform) {
            return Err(PopqlError::Degenerate("optimal and uniform returns coincide".into()));
        }
        Ok(Self {
            mdp: mdp.clone(),
            optimal,
            j_uniform,
            j_optimal,
        })
    }

    pub fn optimal_policy(&self) -> &DiscretePolicy {
        &self.optimal
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.j_uniform, self.j_optimal)
    }

    pub fn normalize(&self, j: f64) -> f64 {
        (j - self.j_uniform) / (self.j_optimal - self.j_uniform)
    }

    pub fn evaluate(&self, policy: &DiscretePolicy) -> Result<f64> {
        Ok(self.normalize(expected_return(&self.mdp, policy)?))
    }
}

/// `Σ_s start(s) Σ_a π(a|s) Q^π(s, a)`
pub fn expected_return(mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<f64> {
    let q = exact_q(mdp, policy)?;
    let m = mdp.m();
    Ok((0..mdp.n())
        .map(|s| mdp.start()[s] * (0..m).map(|a| policy.prob(s, a) * q[s * m + a]).sum::<f64>())
        .sum())
}

/// Normalized return of `policy`.
pub fn evaluate_policy(mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<f64> {
    ReturnNormalizer::new(mdp)?.evaluate(policy)
}

/// Empirical action frequencies per state; unvisited states get uniform rows.
pub fn behavior_cloning(records: &[TransitionRecord], n: usize, m: usize) -> Result<DiscretePolicy> {
    let mut counts = DMatrix::zeros(n, m);
    for r in records {
        if r.s >= n || r.a >= m {
            return Err(PopqlError::IndexOutOfRange {
                index: r.s.max(r.a),
                len: n.max(m),
            });
        }
        counts[(r.s, r.a)] += r.count as f64;
    }
    Ok(rows_or_uniform(counts))
}

/// Behavior cloning from an exact occupancy over flat pairs.
pub fn behavior_cloning_weights(weights: &DVector<f64>, n: usize, m: usize) -> Result<DiscretePolicy> {
    if weights.len() != n * m {
        return Err(PopqlError::DimensionMismatch {
            expected: n * m,
            found: weights.len(),
        });
    }
    Ok(rows_or_uniform(DMatrix::from_fn(n, m, |s, a| weights[s * m + a])))
}

fn rows_or_uniform(mut counts: DMatrix<f64>) -> DiscretePolicy {
    let m = counts.ncols();
    for mut row in counts.row_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / m as f64);
        }
    }
    DiscretePolicy::new(counts).expect("normalized rows")
}

/// Parameter update rule for the critic and the actor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    /// Adam with the usual `(0.9, 0.999, 1e-8)` constants.
    Adam,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Descends along `grad` in place.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

fn descend(opt: &mut Option<Adam>, params: &mut [f64], grad: &[f64], lr: f64) {
    match opt {
        Some(adam) => adam.step(params, grad, lr),
        None => params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub lr_ab: f64,
    pub lr_g: f64,
    pub lr_alpha: f64,
    pub alpha: f64,
    pub target_entropy: Option<f64>,
    pub steps: usize,
    /// Minibatch size; `None` enumerates the exact expectation.
    pub batch: Option<usize>,
    pub seed: u64,
    pub rank: usize,
    pub log_every: usize,
    /// Keep `A = B = 0` (plain fitted Q iteration with an entropy-regularized actor).
    pub dual_frozen: bool,
    pub optimizer: Optimizer,
    pub dual_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            lr_q: 1e-3,
            lr_pi: 1e-4,
            lr_ab: 1e-2,
            lr_g: 1e-1,
            lr_alpha: 1e-3,
            alpha: 0.1,
            target_entropy: Some(0.5),
            steps: 20_000,
            batch: None,
            seed: 0,
            rank: crate::dual::DEFAULT_RANK,
            log_every: 1000,
            dual_frozen: false,
            optimizer: Optimizer::Adam,
            dual_init_scale: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_q, self.lr_pi, self.lr_ab, self.lr_g, self.lr_alpha];
        if !(self.beta >= 0.0) {
            return Err(PopqlError::InvalidConfig(format!(
                "beta {} must be nonnegative",
                self.beta
            )));
        }
        if rates.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(PopqlError::InvalidConfig(
                "learning rates must be finite and nonnegative".into(),
            ));
        }
        if self.batch == Some(0) {
            return Err(PopqlError::InvalidConfig("batch size must be positive".into()));
        }
        if self.rank == 0 {
            return Err(PopqlError::InvalidConfig("dual rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub q_loss: f64,
    pub dual_objective: f64,
    pub lambda_min: f64,
    pub kl: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub return_normalized: f64,
    /// `E_μ[u]` of the weights used at this step.
    pub mean_u: f64,
    pub q_sum: f64,
    pub w_norm: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "step,q_loss,dual_objective,lambda_min,kl,entropy,alpha,return_normalized,mean_u,q_sum,w_norm";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.q_loss,
            self.dual_objective,
            self.lambda_min,
            self.kl,
            self.entropy,
            self.alpha,
            self.return_normalized,
            self.mean_u,
            self.q_sum,
            self.w_norm
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: SoftmaxPolicy,
    pub value: LinearValue,
    pub dual: DualState,
    pub log: Vec<TrainLogRow>,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    /// Weights `u` applied at every logged step, for invariant checks.
    #[serde(skip)]
    pub logged_u: Vec<DVector<f64>>,
    /// Critic weights after each step (only the first `trace_q` steps).
    #[serde(skip)]
    pub q_trace: Vec<DVector<f64>>,
}

impl TrainOutcome {
    pub fn final_return(&self) -> f64 {
        self.log.last().map(|r| r.return_normalized).unwrap_or(f64::NAN)
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from(TrainLogRow::CSV_HEADER);
        out.push('\n');
        for r in &self.log {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Joint training: per step the dual and g updates, the u-weighted critic
/// step, the actor step and the α update. `data` supplies μ (and, in sampled
/// mode, the transitions through its dataset records or its weights).
pub fn train_popql(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    data: &SampleDistribution,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_popql_traced(map, mdp, data, config, 0)
}

/// [`train_popql`] that also keeps the critic weights of the first
/// `trace_q` steps.
pub fn train_popql_traced(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    data: &SampleDistribution,
    config: &TrainConfig,
    trace_q: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (n, m, k) = (mdp.n(), mdp.m(), map.k());
    if data.len() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: data.len(),
        });
    }
    if map.rows() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: map.rows(),
        });
    }
    let mu = data.weights().clone();
    let rho = data.state_marginal(m);
    let normalizer = ReturnNormalizer::new(mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut policy = SoftmaxPolicy::uniform(n, m, config.alpha);
    policy.target_entropy = config.target_entropy;
    policy.lr_alpha = config.lr_alpha;
    let mut w = DVector::zeros(k);
    let mut dual = if config.dual_frozen {
        DualState::zeros(k, config.rank, mdp.pairs())
    } else {
        DualState::random(k, config.rank, mdp.pairs(), config.dual_init_scale, config.seed)
    }
    .with_rates(config.lr_ab, config.lr_g);
    let adam = |len| match config.optimizer {
        Optimizer::Adam => Some(Adam::new(len)),
        Optimizer::Sgd => None,
    };
    let mut opt_q = adam(k);
    let mut opt_pi = adam(n * m);

    let mut log = Vec::new();
    let mut logged_u = Vec::new();
    let mut q_trace = Vec::new();
    let mut err = DVector::zeros(mdp.pairs());
    let mut grad_w = DVector::zeros(k);
    let mut diverged_at = None;
    let log_every = config.log_every.max(1);

    for step in 1..=config.steps {
        let pi = policy.probs();
        let psi = expected_next(mdp, &pi, map.phi());
        let problem = DualProblem::from_parts(map.phi().clone(), psi.clone(), mu.clone(), m)?;

        // dual and g
        let u = match config.batch {
            None if !config.dual_frozen => {
                let e = problem.table_exponents(&dual);
                let u = normalized_weights(&e, &mu);
                let target = problem.exact_g_table(&dual);
                let (da, db) = problem.weighted_gradient(&dual, &u.component_mul(&mu));
                dual.a -= da * dual.lr_ab;
                dual.b -= db * dual.lr_ab;
                let g_step = (2.0 * dual.lr_g).min(1.0);
                dual.g -= (&dual.g - target) * g_step;
                dual.refresh_norms();
                u
            }
            None => DVector::from_element(mdp.pairs(), 1.0),
            Some(size) => {
                let batch = sample_transitions(mdp, &pi, data, size, &mut rng)?;
                let ub = if config.dual_frozen {
                    DVector::from_element(batch.len(), 1.0)
                } else {
                    stochastic_dual_step(&mut dual, &batch, map)?.u
                };
                let tb = TdBatch::Sampled {
                    map,
                    gamma: mdp.gamma(),
                    transitions: &batch,
                };
                // the critic step for sampled mode uses the minibatch weights directly
                let before = w.clone();
                let lv = match td_step(&LinearValue { w: w.clone() }, tb, &ub, 1.0) {
                    Ok(v) => v,
                    Err(PopqlError::Diverged { .. }) => {
                        diverged_at = Some(step);
                        break;
                    }
                    Err(e) => return Err(e),
                };
                grad_w = &before - lv.w;
                descend(&mut opt_q, w.as_mut_slice(), grad_w.as_slice(), config.lr_q);
                // table-based reweighting over μ drives the actor coupling
                let e = problem.table_exponents(&dual);
                normalized_weights(&e, &mu)
            }
        };

        if config.batch.is_none() {
            let d = u.component_mul(&mu);
            let diff = map.phi() - &psi * mdp.gamma();
            exact_td_gradient(map.phi(), &diff, mdp.r(), &d, &w, &mut err, &mut grad_w);
            descend(&mut opt_q, w.as_mut_slice(), grad_w.as_slice(), config.lr_q);
        }
        if step <= trace_q {
            q_trace.push(w.clone());
        }

        // actor
        let q = u.component_mul(&mu);
        let terms = PolicyTerms {
            map,
            mdp,
            dual: &dual,
            rho: &rho,
            q: &q,
            w: &w,
            beta: config.beta,
            alpha: policy.alpha,
        };
        let grad_pi = terms.gradient(&policy.logits)?;
        let neg: Vec<f64> = grad_pi.iter().map(|g| -g).collect();
        descend(&mut opt_pi, policy.logits.as_mut_slice(), &neg, config.lr_pi);
        let h = policy.mean_entropy(&rho);
        policy.tune_alpha(h);

        let w_norm = linalg::finite_norm(&w);
        let blown = !(w_norm <= DIVERGENCE_CEILING) || policy.logits.iter().any(|v| !v.is_finite());
        if blown || step % log_every == 0 || step == config.steps {
            let row = log_row(
                map,
                mdp,
                &policy,
                &dual,
                &problem,
                &mu,
                &rho,
                &u,
                &w,
                &normalizer,
                step,
                blown,
            )?;
            log.push(row);
            logged_u.push(u.clone());
            if blown {
                diverged_at = Some(step);
                break;
            }
        }
    }
    Ok(TrainOutcome {
        policy,
        value: LinearValue { w },
        dual,
        log,
        diverged: diverged_at.is_some(),
        diverged_at,
        logged_u,
        q_trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn log_row(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &SoftmaxPolicy,
    dual: &DualState,
    problem: &DualProblem,
    mu: &DVector<f64>,
    rho: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
    normalizer: &ReturnNormalizer,
    step: usize,
    blown: bool,
) -> Result<TrainLogRow> {
    let pi = policy.probs();
    let rw = ReweightingResult::from_exponents(&u.map(f64::ln), mu)?;
    let td = (map.phi() - problem.psi() * mdp.gamma()) * w - mdp.r();
    let q_loss = td.iter().zip(mu.iter()).map(|(e, d)| d * e * e).sum();
    let dual_objective = problem.objective(dual)?.value;
    let lambda_min = if blown {
        f64::NAN
    } else {
        lambda_min(map, mdp, &pi, rw.q.weights())?
    };
    let return_normalized = if blown { f64::NAN } else { normalizer.evaluate(&pi)? };
    Ok(TrainLogRow {
        step,
        q_loss,
        dual_objective,
        lambda_min,
        kl: rw.kl,
        entropy: policy.mean_entropy(rho),
        alpha: policy.alpha,
        return_normalized,
        mean_u: u.dot(mu),
        q_sum: u.component_mul(mu).sum(),
        w_norm: linalg::finite_norm(w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::random_unit_features_mdp;
    use crate::models::{build_frozen_lake, random_mdp};

    #[test]
    fn softmax_rows_are_distributions() {
        let logits = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, -2.0, 700.0, 0.0, 0.0]);
        let p = softmax_rows(&logits);
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let pol = SoftmaxPolicy {
            logits,
            alpha: 0.0,
            target_entropy: None,
            lr_alpha: 0.0,
        };
        assert!(pol.entropies().iter().all(|&h| (0.0..=3f64.ln() + 1e-12).contains(&h)));
    }

    #[test]
    fn uniform_q_pushes_toward_uniform() {
        let mdp = random_mdp(1, 3, 3, 1.0).unwrap();
        let map = random_unit_features_mdp(1, 3, 3, 2).unwrap();
        let dual = DualState::zeros(2, 1, 9);
        let rho = DVector::from_element(3, 1.0 / 3.0);
        let q = DVector::from_element(9, 1.0 / 9.0);
        let w = DVector::zeros(2);
        let terms = PolicyTerms {
            map: &map,
            mdp: &mdp,
            dual: &dual,
            rho: &rho,
            q: &q,
            w: &w,
            beta: 0.0,
            alpha: 0.5,
        };
        let logits = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let g = terms.gradient(&logits).unwrap();
        // the favored logit is pushed down
        assert!(g[(0, 0)] < 0.0 && g[(1, 1)] < 0.0);
        assert!(g.row(2).amax() < 1e-15);
    }

    #[test]
    fn returns_are_anchored() {
        let mdp = build_frozen_lake(false, 1.0, 0.95).unwrap();
        let norm = ReturnNormalizer::new(&mdp).unwrap();
        assert!((norm.evaluate(norm.optimal_policy()).unwrap() - 1.0).abs() < 1e-12);
        assert!(norm.evaluate(&DiscretePolicy::uniform(16, 4)).unwrap().abs() < 1e-12);
    }

    #[test]
    fn cloning_recovers_frequencies() {
        let recs = vec![
            TransitionRecord {
                s: 0,
                a: 1,
                r: 0.0,
                s_next: 1,
                count: 8,
            },
            TransitionRecord {
                s: 0,
                a: 0,
                r: 0.0,
                s_next: 0,
                count: 2,
            },
        ];
        let bc = behavior_cloning(&recs, 2, 2).unwrap();
        assert_eq!(bc.prob(0, 1), 0.8);
        assert_eq!(bc.prob(1, 0), 0.5);
    }
}
