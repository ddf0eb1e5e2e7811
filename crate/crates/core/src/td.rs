//! Linear TD evaluation: the projected-Bellman fixed point and exact or
//! minibatch TD iteration with divergence detection.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cert::next_features;
use crate::error::{PopqlError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::models::{exact_q, sample_transitions, DiscretePolicy, FiniteMdp, SampleDistribution, Transition};

/// Largest accepted condition number for the fixed-point system.
pub const MAX_CONDITION: f64 = 1e12;
/// `‖w‖` or error above this marks a run as diverged.
pub const DIVERGENCE_CEILING: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearValue {
    pub w: DVector<f64>,
}

impl LinearValue {
    pub fn zeros(k: usize) -> Self {
        Self { w: DVector::zeros(k) }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }

    pub fn q_values(&self, map: &FeatureMap) -> DVector<f64> {
        map.phi() * &self.w
    }
}

/// Solves `ΦᵀD(Φ − γΨ)w = ΦᵀDR` for sampling weights `dist`.
pub fn lstd_fixed_point(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
) -> Result<LinearValue> {
    lstd_weighted(map, mdp, policy, dist.weights())
}

/// [`lstd_fixed_point`] for arbitrary nonnegative weights.
pub fn lstd_weighted(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    d: &DVector<f64>,
) -> Result<LinearValue> {
    if d.len() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: d.len(),
        });
    }
    let psi = next_features(map, mdp, policy)?;
    let diff = map.phi() - psi * mdp.gamma();
    let a = linalg::weighted_cross(map.phi(), d, &diff);
    let b = linalg::weighted_cross(
        map.phi(),
        d,
        &DMatrix::from_column_slice(d.len(), 1, mdp.r().as_slice()),
    );
    let cond = linalg::condition_number(&a);
    if !(cond <= MAX_CONDITION) {
        return Err(PopqlError::IllConditioned { cond });
    }
    Ok(LinearValue {
        w: linalg::solve(&a, &b.column(0).into_owned(), "lstd_fixed_point")?,
    })
}

/// Weighted RMSE `sqrt(Σ d (Φw − ref)² / Σ d)`.
pub fn approx_error(map: &FeatureMap, w: &DVector<f64>, reference: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let q = map.phi() * w;
    weighted_rmse(&q, reference, d)
}

/// [`approx_error`] with uniform weights.
pub fn approx_error_uniform(map: &FeatureMap, w: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let q = map.phi() * w;
    let d = DVector::from_element(q.len(), 1.0);
    weighted_rmse(&q, reference, &d)
}

fn weighted_rmse(q: &DVector<f64>, reference: &DVector<f64>, d: &DVector<f64>) -> f64 {
    let total: f64 = d.sum();
    let sq: f64 = q
        .iter()
        .zip(reference.iter())
        .zip(d.iter())
        .map(|((a, b), w)| w * (a - b).powi(2))
        .sum();
    (sq / total).sqrt()
}

/// Precomputed exact-mode quantities for one (features, model, policy,
/// sampling distribution) tuple. The reference values are `Q^π`.
#[derive(Debug, Clone)]
pub struct TdProblem {
    map: FeatureMap,
    mdp: FiniteMdp,
    policy: DiscretePolicy,
    mu: SampleDistribution,
    /// `Φ − γΨ`
    diff: DMatrix<f64>,
    reference: DVector<f64>,
}

impl TdProblem {
    pub fn new(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy, mu: &SampleDistribution) -> Result<Self> {
        if mu.len() != mdp.pairs() {
            return Err(PopqlError::DimensionMismatch {
                expected: mdp.pairs(),
                found: mu.len(),
            });
        }
        let psi = next_features(map, mdp, policy)?;
        Ok(Self {
            map: map.clone(),
            mdp: mdp.clone(),
            policy: policy.clone(),
            mu: mu.clone(),
            diff: map.phi() - psi * mdp.gamma(),
            reference: exact_q(mdp, policy)?,
        })
    }

    /// Replaces the reference values used for error reporting.
    pub fn with_reference(mut self, reference: DVector<f64>) -> Result<Self> {
        if reference.len() != self.mdp.pairs() {
            return Err(PopqlError::DimensionMismatch {
                expected: self.mdp.pairs(),
                found: reference.len(),
            });
        }
        self.reference = reference;
        Ok(self)
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn policy(&self) -> &DiscretePolicy {
        &self.policy
    }

    pub fn mu(&self) -> &SampleDistribution {
        &self.mu
    }

    pub fn reference(&self) -> &DVector<f64> {
        &self.reference
    }

    /// TD errors `φᵀw − r − γψᵀw` for every pair.
    pub fn td_errors(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.diff * w - self.mdp.r()
    }

    /// μ-weighted RMSE against the reference values.
    pub fn error(&self, w: &DVector<f64>) -> f64 {
        approx_error(&self.map, w, &self.reference, self.mu.weights())
    }

    pub fn error_uniform(&self, w: &DVector<f64>) -> f64 {
        approx_error_uniform(&self.map, w, &self.reference)
    }
}

/// Writes `Φᵀ(d ∘ ((Φ − γΨ)w − R))` into `grad`, using `err` as scratch.
pub fn exact_td_gradient(
    phi: &DMatrix<f64>,
    diff: &DMatrix<f64>,
    r: &DVector<f64>,
    d: &DVector<f64>,
    w: &DVector<f64>,
    err: &mut DVector<f64>,
    grad: &mut DVector<f64>,
) {
    err.gemv(1.0, diff, w, 0.0);
    *err -= r;
    err.component_mul_assign(d);
    grad.gemv_tr(1.0, phi, err, 0.0);
}

/// Source of the TD expectation for one step.
#[derive(Debug, Clone, Copy)]
pub enum TdBatch<'a> {
    /// Full enumeration under `u · μ`; `u` is indexed by pair.
    Exact(&'a TdProblem),
    /// Minibatch average; `u` is indexed by transition.
    Sampled {
        map: &'a FeatureMap,
        gamma: f64,
        transitions: &'a [Transition],
    },
}

/// `w − lr · E[u (φᵀw − r − γφ'ᵀw) φ]`.
pub fn td_step(w: &LinearValue, batch: TdBatch<'_>, u: &DVector<f64>, lr: f64) -> Result<LinearValue> {
    let next = match batch {
        TdBatch::Exact(problem) => {
            if u.len() != problem.mdp.pairs() {
                return Err(PopqlError::DimensionMismatch {
                    expected: problem.mdp.pairs(),
                    found: u.len(),
                });
            }
            let mut err = problem.td_errors(&w.w);
            err.component_mul_assign(u);
            err.component_mul_assign(problem.mu.weights());
            let grad = problem.map.phi().tr_mul(&err);
            &w.w - grad * lr
        }
        TdBatch::Sampled {
            map,
            gamma,
            transitions,
        } => {
            if transitions.is_empty() {
                return Err(PopqlError::EmptyMinibatch);
            }
            if u.len() != transitions.len() {
                return Err(PopqlError::DimensionMismatch {
                    expected: transitions.len(),
                    found: u.len(),
                });
            }
            let m = map.actions();
            let mut grad = DVector::zeros(map.k());
            let mut total = 0.0;
            for (t, &ui) in transitions.iter().zip(u.iter()) {
                let phi = map.phi().row(t.s * m + t.a);
                let phi_next = map.phi().row(t.s_next * m + t.a_next);
                let delta = phi.dot(&w.w.transpose()) - t.r - gamma * phi_next.dot(&w.w.transpose());
                grad.axpy(t.weight * ui * delta, &phi.transpose(), 1.0);
                total += t.weight;
            }
            &w.w - grad * (lr / total)
        }
    };
    if next.iter().any(|v| !v.is_finite()) {
        return Err(PopqlError::Diverged { step: 0 });
    }
    Ok(LinearValue { w: next })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TdMode {
    Exact,
    Sampled { batch: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdConfig {
    pub steps: usize,
    pub lr: f64,
    pub ceiling: f64,
    pub record_every: usize,
    pub mode: TdMode,
    /// Stop once `‖w' − w‖ ≤ converge_tol · lr`.
    pub converge_tol: Option<f64>,
}

impl Default for TdConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            lr: 1e-3,
            ceiling: DIVERGENCE_CEILING,
            record_every: 1000,
            mode: TdMode::Exact,
            converge_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdRecord {
    pub step: usize,
    pub error: f64,
    pub error_uniform: f64,
    /// μ-weighted RMS of the TD errors.
    pub residual: f64,
    pub w_norm: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdTrace {
    pub records: Vec<TdRecord>,
    pub config: TdConfig,
    pub weighting: String,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
    pub converged: bool,
    pub steps_run: usize,
    pub final_w: DVector<f64>,
}

impl TdTrace {
    pub const CSV_HEADER: &'static str = "step,error,residual,w_norm,diverged";

    pub fn final_error(&self) -> f64 {
        self.records.last().map(|r| r.error).unwrap_or(f64::NAN)
    }

    pub fn final_record(&self) -> Option<&TdRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.error, r.residual, r.w_norm, r.diverged
            ));
        }
        out
    }
}

/// Iterates TD from `w = 0` with per-pair weights `u` (all ones for vanilla).
pub fn run_td(problem: &TdProblem, u: &DVector<f64>, weighting: &str, config: &TdConfig) -> Result<TdTrace> {
    if !(config.lr >= 0.0) || !config.lr.is_finite() {
        return Err(PopqlError::InvalidConfig(format!(
            "learning rate {} must be finite and nonnegative",
            config.lr
        )));
    }
    let n_pairs = problem.mdp.pairs();
    if u.len() != n_pairs {
        return Err(PopqlError::DimensionMismatch {
            expected: n_pairs,
            found: u.len(),
        });
    }
    let record_every = config.record_every.max(1);
    let d = u.component_mul(problem.mu.weights());
    let d_total = d.sum();
    let mut rng = match config.mode {
        TdMode::Sampled { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        TdMode::Exact => None,
    };
    let mut w = LinearValue::zeros(problem.map.k());
    let mut records = Vec::new();
    let record = |w: &DVector<f64>, step: usize| -> TdRecord {
        let error = problem.error(w);
        let td = problem.td_errors(w);
        let residual = (td.iter().zip(d.iter()).map(|(e, di)| di * e * e).sum::<f64>() / d_total).sqrt();
        let w_norm = linalg::finite_norm(w);
        let diverged = !(w_norm <= config.ceiling) || !(error <= config.ceiling);
        TdRecord {
            step,
            error,
            error_uniform: problem.error_uniform(w),
            residual,
            w_norm,
            diverged,
        }
    };
    records.push(record(&w.w, 0));
    let mut diverged_at = None;
    let mut converged = false;
    let mut steps_run = 0;
    // exact-mode fast path keeps the loop allocation-light
    let mut err = DVector::zeros(n_pairs);
    let mut grad = DVector::zeros(problem.map.k());
    for step in 1..=config.steps {
        let prev = w.w.clone();
        match (&config.mode, rng.as_mut()) {
            (TdMode::Sampled { batch, .. }, Some(rng)) => {
                let transitions = sample_transitions(&problem.mdp, &problem.policy, &problem.mu, *batch, rng)?;
                let ub = DVector::from_iterator(
                    transitions.len(),
                    transitions.iter().map(|t| u[t.s * problem.mdp.m() + t.a]),
                );
                let batch = TdBatch::Sampled {
                    map: &problem.map,
                    gamma: problem.mdp.gamma(),
                    transitions: &transitions,
                };
                match td_step(&w, batch, &ub, config.lr) {
                    Ok(next) => w = next,
                    Err(PopqlError::Diverged { .. }) => {
                        w.w.fill(f64::NAN);
                    }
                    Err(e) => return Err(e),
                }
            }
            _ => {
                exact_td_gradient(
                    problem.map.phi(),
                    &problem.diff,
                    problem.mdp.r(),
                    &d,
                    &w.w,
                    &mut err,
                    &mut grad,
                );
                w.w.axpy(-config.lr, &grad, 1.0);
            }
        }
        steps_run = step;
        let w_norm = linalg::finite_norm(&w.w);
        let blown = !(w_norm <= config.ceiling);
        let step_norm = (&w.w - &prev).norm();
        let done = config.converge_tol.is_some_and(|tol| step_norm <= tol * config.lr);
        if blown || done || step % record_every == 0 || step == config.steps {
            let rec = record(&w.w, step);
            let flagged = rec.diverged;
            records.push(rec);
            if flagged {
                diverged_at = Some(step);
                break;
            }
            if done {
                converged = true;
                break;
            }
        }
    }
    Ok(TdTrace {
        records,
        config: *config,
        weighting: weighting.to_string(),
        diverged: diverged_at.is_some(),
        diverged_at,
        converged,
        steps_run,
        final_w: w.w,
    })
}
