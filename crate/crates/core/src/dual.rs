//! Low-rank Lagrange dual of the KL projection onto the certificate set, the
//! g-function, and the exponential reweighting it induces.
//!
//! The dual variable is `Z = [B; A][B; A]ᵀ` so that the per-pair exponent is
//! `‖yA‖² + ‖yB‖² + 2⟨yB, E[yA']⟩` with `yA = Aᵀφ(s, a)`, `yB = Bᵀφ(s, a)`
//! and `yA' = Aᵀφ(s', a')`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cert::{lambda_min, next_features};
use crate::error::{PopqlError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::models::{DiscretePolicy, FiniteMdp, SampleDistribution, Transition};

/// Exponents above this are clamped when evaluating the plain objective.
pub const EXPONENT_CLAMP: f64 = 50.0;
pub const DEFAULT_RANK: usize = 4;
const NORM_TOL: f64 = 1e-10;
const NORM_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// g-table over flat pairs, stored divided by `‖A‖₂‖B‖₂` when
    /// `spectral_normalize` is set.
    pub g: DVector<f64>,
    pub norm_a: f64,
    pub norm_b: f64,
    pub lr_ab: f64,
    pub lr_g: f64,
    pub spectral_normalize: bool,
}

impl DualState {
    /// All-zero factors of shape `k × min(rank, k)`.
    pub fn zeros(k: usize, rank: usize, pairs: usize) -> Self {
        let r = rank.clamp(1, k.max(1));
        Self {
            a: DMatrix::zeros(k, r),
            b: DMatrix::zeros(k, r),
            g: DVector::zeros(pairs),
            norm_a: 0.0,
            norm_b: 0.0,
            lr_ab: 1e-3,
            lr_g: 1e-2,
            spectral_normalize: true,
        }
    }

    /// Entries drawn from `U(-scale, scale)`.
    pub fn random(k: usize, rank: usize, pairs: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::zeros(k, rank, pairs);
        let r = out.rank();
        out.a = DMatrix::from_fn(k, r, |_, _| rng.gen_range(-scale..=scale));
        out.b = DMatrix::from_fn(k, r, |_, _| rng.gen_range(-scale..=scale));
        out.refresh_norms();
        out
    }

    pub fn from_factors(a: DMatrix<f64>, b: DMatrix<f64>, pairs: usize) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(PopqlError::DimensionMismatch {
                expected: a.ncols(),
                found: b.ncols(),
            });
        }
        if a.ncols() == 0 || a.ncols() > a.nrows() {
            return Err(PopqlError::InvalidConfig(format!(
                "rank {} must be in 1..={}",
                a.ncols(),
                a.nrows()
            )));
        }
        let mut out = Self::zeros(a.nrows(), a.ncols(), pairs);
        out.a = a;
        out.b = b;
        out.refresh_norms();
        Ok(out)
    }

    pub fn with_rates(mut self, lr_ab: f64, lr_g: f64) -> Self {
        self.lr_ab = lr_ab;
        self.lr_g = lr_g;
        self
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_zero(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|&v| v == 0.0)
    }

    pub fn refresh_norms(&mut self) {
        self.norm_a = linalg::spectral_norm(&self.a, NORM_TOL, NORM_MAX_ITER);
        self.norm_b = linalg::spectral_norm(&self.b, NORM_TOL, NORM_MAX_ITER);
    }

    /// Factor that converts a stored g value back into `⟨yB, yA'⟩` units.
    pub fn g_scale(&self) -> f64 {
        if self.spectral_normalize {
            self.norm_a * self.norm_b
        } else {
            1.0
        }
    }

    /// `Z = [B; A][B; A]ᵀ`
    pub fn z(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut stacked = DMatrix::zeros(2 * k, self.rank());
        stacked.view_mut((0, 0), (k, self.rank())).copy_from(&self.b);
        stacked.view_mut((k, 0), (k, self.rank())).copy_from(&self.a);
        &stacked * stacked.transpose()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `(yA, yB, yA')` for one transition.
pub fn dual_terms(
    map: &FeatureMap,
    dual: &DualState,
    s: usize,
    a: usize,
    s_next: usize,
    a_next: usize,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let phi = map.features(s, a)?;
    let phi_next = map.features(s_next, a_next)?;
    Ok((
        (phi.clone() * &dual.a).transpose(),
        (phi * &dual.b).transpose(),
        (phi_next * &dual.a).transpose(),
    ))
}

/// Precomputed features and successor features for exact-mode dual work.
#[derive(Debug, Clone)]
pub struct DualProblem {
    phi: DMatrix<f64>,
    psi: DMatrix<f64>,
    mu: DVector<f64>,
    m: usize,
}

impl DualProblem {
    pub fn new(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy, mu: &SampleDistribution) -> Result<Self> {
        Self::from_weights(map, mdp, policy, mu.weights())
    }

    pub fn from_weights(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy, mu: &DVector<f64>) -> Result<Self> {
        if mu.len() != mdp.pairs() {
            return Err(PopqlError::DimensionMismatch {
                expected: mdp.pairs(),
                found: mu.len(),
            });
        }
        let psi = next_features(map, mdp, policy)?;
        Ok(Self {
            phi: map.phi().clone(),
            psi,
            mu: mu.clone(),
            m: mdp.m(),
        })
    }

    /// Builds from precomputed features `Φ` and successor features `Ψ`.
    pub fn from_parts(phi: DMatrix<f64>, psi: DMatrix<f64>, mu: DVector<f64>, m: usize) -> Result<Self> {
        if phi.shape() != psi.shape() || phi.nrows() != mu.len() {
            return Err(PopqlError::DimensionMismatch {
                expected: phi.nrows(),
                found: mu.len(),
            });
        }
        Ok(Self { phi, psi, mu, m })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn actions(&self) -> usize {
        self.m
    }

    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    fn check(&self, dual: &DualState) -> Result<()> {
        if dual.k() != self.phi.ncols() {
            return Err(PopqlError::DimensionMismatch {
                expected: self.phi.ncols(),
                found: dual.k(),
            });
        }
        Ok(())
    }

    /// Exact successor inner products `E[⟨yB, yA'⟩]` per pair, unnormalized.
    pub fn successor_products(&self, dual: &DualState) -> DVector<f64> {
        let yb = &self.phi * &dual.b;
        let ya_next = &self.psi * &dual.a;
        row_dots(&yb, &ya_next)
    }

    /// Exponents with the exact successor expectation.
    pub fn exponents(&self, dual: &DualState) -> DVector<f64> {
        let ya = &self.phi * &dual.a;
        let yb = &self.phi * &dual.b;
        let ya_next = &self.psi * &dual.a;
        DVector::from_fn(self.phi.nrows(), |x, _| {
            ya.row(x).norm_squared() + yb.row(x).norm_squared() + 2.0 * yb.row(x).dot(&ya_next.row(x))
        })
    }

    /// Exponents with the stored g-table in place of the successor term.
    pub fn table_exponents(&self, dual: &DualState) -> DVector<f64> {
        let ya = &self.phi * &dual.a;
        let yb = &self.phi * &dual.b;
        let scale = dual.g_scale();
        DVector::from_fn(self.phi.nrows(), |x, _| {
            ya.row(x).norm_squared() + yb.row(x).norm_squared() + 2.0 * dual.g[x] * scale
        })
    }

    pub fn objective(&self, dual: &DualState) -> Result<DualValue> {
        self.check(dual)?;
        let e = self.exponents(dual);
        let saturated = e.iter().any(|&v| v > EXPONENT_CLAMP);
        let value = e
            .iter()
            .zip(self.mu.iter())
            .map(|(&v, &w)| w * v.min(EXPONENT_CLAMP).exp())
            .sum();
        Ok(DualValue { value, saturated })
    }

    /// `log E_μ[exp(e)]`, computed without clamping.
    pub fn log_objective(&self, dual: &DualState) -> Result<f64> {
        self.check(dual)?;
        Ok(log_mean_exp(&self.exponents(dual), &self.mu))
    }

    /// Gradient of the objective given per-pair weights `W = μ·exp(e)`.
    pub fn weighted_gradient(&self, dual: &DualState, weight: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let ya = scale_rows(&(&self.phi * &dual.a), weight);
        let yb = scale_rows(&(&self.phi * &dual.b), weight);
        let ya_next = scale_rows(&(&self.psi * &dual.a), weight);
        let da = (self.phi.tr_mul(&ya) + self.psi.tr_mul(&yb)) * 2.0;
        let db = (self.phi.tr_mul(&yb) + self.phi.tr_mul(&ya_next)) * 2.0;
        (da, db)
    }

    pub fn gradient(&self, dual: &DualState, form: DualForm, source: GSource) -> Result<DualGradient> {
        self.check(dual)?;
        let e = match source {
            GSource::Exact => self.exponents(dual),
            GSource::Table => self.table_exponents(dual),
        };
        let saturated = e.iter().any(|&v| v > EXPONENT_CLAMP);
        let weight = match form {
            DualForm::Exp => DVector::from_fn(e.len(), |x, _| self.mu[x] * e[x].min(EXPONENT_CLAMP).exp()),
            DualForm::LogExp => {
                let u = normalized_weights(&e, &self.mu);
                u.component_mul(&self.mu)
            }
        };
        let (da, db) = self.weighted_gradient(dual, &weight);
        Ok(DualGradient { da, db, saturated })
    }

    pub fn reweighting(&self, dual: &DualState, source: GSource) -> Result<ReweightingResult> {
        self.check(dual)?;
        let e = match source {
            GSource::Exact => self.exponents(dual),
            GSource::Table => self.table_exponents(dual),
        };
        ReweightingResult::from_exponents(&e, &self.mu)
    }

    /// Normalized (when enabled) exact g for every pair.
    pub fn exact_g_table(&self, dual: &DualState) -> DVector<f64> {
        let raw = self.successor_products(dual);
        normalize_g(raw, dual)
    }
}

fn normalize_g(raw: DVector<f64>, dual: &DualState) -> DVector<f64> {
    if !dual.spectral_normalize {
        return raw;
    }
    let scale = dual.norm_a * dual.norm_b;
    if scale == 0.0 {
        DVector::zeros(raw.len())
    } else {
        raw / scale
    }
}

fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(a.nrows(), |x, _| a.row(x).dot(&b.row(x)))
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (x, mut row) in out.row_iter_mut().enumerate() {
        row *= w[x];
    }
    out
}

/// `log Σ μ exp(e)` by log-sum-exp over the support of μ.
pub fn log_mean_exp(e: &DVector<f64>, mu: &DVector<f64>) -> f64 {
    let max = e
        .iter()
        .zip(mu.iter())
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = e.iter().zip(mu.iter()).map(|(&v, &w)| w * (v - max).exp()).sum();
    max + s.ln()
}

/// `exp(e) / E_μ[exp(e)]`.
pub fn normalized_weights(e: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
    let lme = log_mean_exp(e, mu);
    e.map(|v| (v - lme).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub value: f64,
    /// Some exponent exceeded the clamp.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualGradient {
    pub da: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub saturated: bool,
}

impl DualGradient {
    pub fn norm(&self) -> f64 {
        (self.da.norm_squared() + self.db.norm_squared()).sqrt()
    }
}

/// Objective form minimized by [`solve_dual`]; both share the minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DualForm {
    Exp,
    LogExp,
}

/// Where the successor term of the exponent comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GSource {
    Exact,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReweightingResult {
    pub u: DVector<f64>,
    pub q: SampleDistribution,
    pub kl: f64,
}

impl ReweightingResult {
    pub fn from_exponents(e: &DVector<f64>, mu: &DVector<f64>) -> Result<Self> {
        if e.len() != mu.len() {
            return Err(PopqlError::DimensionMismatch {
                expected: mu.len(),
                found: e.len(),
            });
        }
        let u = normalized_weights(e, mu);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(PopqlError::Numeric("non-finite reweighting".into()));
        }
        let q = u.component_mul(mu);
        let q = SampleDistribution::normalized(q)?;
        let kl = q
            .weights()
            .iter()
            .zip(u.iter())
            .filter(|(&qi, _)| qi > 0.0)
            .map(|(&qi, &ui)| qi * ui.ln())
            .sum::<f64>();
        Ok(Self { u, q, kl: kl.max(0.0) })
    }

    /// The identity reweighting.
    pub fn identity(mu: &SampleDistribution) -> Self {
        Self {
            u: DVector::from_element(mu.len(), 1.0),
            q: mu.clone(),
            kl: 0.0,
        }
    }

    /// `E_μ[u]`
    pub fn mean_u(&self, mu: &DVector<f64>) -> f64 {
        self.u.dot(mu)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,u,q\n");
        for (x, (u, q)) in self.u.iter().zip(self.q.weights().iter()).enumerate() {
            out.push_str(&format!("{x},{u},{q}\n"));
        }
        out
    }
}

/// Exact `E[⟨yB, yA'⟩]` at `(s, a)`, divided by `‖A‖₂‖B‖₂` when the dual is
/// spectrally normalized (zero if either norm vanishes).
pub fn exact_g(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dual: &DualState,
    s: usize,
    a: usize,
) -> Result<f64> {
    let x = mdp.index(s, a)?;
    let psi = next_features(map, mdp, policy)?;
    let yb = map.phi().row(x) * &dual.b;
    let ya_next = psi.row(x) * &dual.a;
    let raw = yb.dot(&ya_next);
    Ok(normalize_g(DVector::from_element(1, raw), dual)[0])
}

/// `E_μ[exp(‖yA‖² + ‖yB‖² + 2E[⟨yB, yA'⟩])]` with clamped exponents.
pub fn dual_objective(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dual: &DualState,
    mu: &SampleDistribution,
) -> Result<DualValue> {
    DualProblem::new(map, mdp, policy, mu)?.objective(dual)
}

/// Gradient of [`dual_objective`] in `(A, B)`.
pub fn dual_gradient(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dual: &DualState,
    mu: &SampleDistribution,
    source: GSource,
) -> Result<DualGradient> {
    DualProblem::new(map, mdp, policy, mu)?.gradient(dual, DualForm::Exp, source)
}

/// `u = exp(e) / E_μ[exp(e)]`, `q = u·μ` and `D_KL(q ‖ μ)`.
pub fn reweighting(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dual: &DualState,
    mu: &SampleDistribution,
    source: GSource,
) -> Result<ReweightingResult> {
    DualProblem::new(map, mdp, policy, mu)?.reweighting(dual, source)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualConfig {
    pub rank: usize,
    pub lr: f64,
    pub iterations: usize,
    /// Stop when the gradient norm falls to this value.
    pub tol: f64,
    pub seed: u64,
    pub init_scale: f64,
    pub form: DualForm,
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            lr: 0.05,
            iterations: 50_000,
            tol: 1e-9,
            seed: 0,
            init_scale: 1e-3,
            form: DualForm::Exp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub dual: DualState,
    pub reweighting: ReweightingResult,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub saturated: bool,
    /// `λ_min(E_q[F])` under the returned reweighting.
    pub lambda_min: f64,
    /// Objective value after every accepted step, starting at the initial point.
    #[serde(skip)]
    pub history: Vec<f64>,
}

fn form_value(problem: &DualProblem, dual: &DualState, form: DualForm) -> Result<(f64, bool)> {
    match form {
        DualForm::Exp => problem.objective(dual).map(|v| (v.value, v.saturated)),
        DualForm::LogExp => problem.log_objective(dual).map(|v| (v, false)),
    }
}

/// Gradient descent on the dual from a small seeded initialization. A step
/// that raises the objective is rejected and the step size halved.
pub fn solve_dual(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    mu: &SampleDistribution,
    config: &DualConfig,
) -> Result<DualSolution> {
    if config.rank == 0 {
        return Err(PopqlError::InvalidConfig("dual rank must be at least 1".into()));
    }
    if !(config.lr > 0.0) {
        return Err(PopqlError::InvalidConfig(format!(
            "dual learning rate {} must be positive",
            config.lr
        )));
    }
    let problem = DualProblem::new(map, mdp, policy, mu)?;
    let mut dual = DualState::random(map.k(), config.rank, mdp.pairs(), config.init_scale, config.seed)
        .with_rates(config.lr, 10.0 * config.lr);
    let (mut value, mut saturated) = form_value(&problem, &dual, config.form)?;
    let mut history = vec![value];
    let mut lr = config.lr;
    let mut grad = problem.gradient(&dual, config.form, GSource::Exact)?;
    let mut iterations = 0;
    let mut converged = grad.norm() <= config.tol;
    while !converged && iterations < config.iterations {
        iterations += 1;
        let mut trial = dual.clone();
        trial.a -= &grad.da * lr;
        trial.b -= &grad.db * lr;
        let (trial_value, trial_sat) = form_value(&problem, &trial, config.form)?;
        if trial_value.is_finite() && trial_value <= value {
            dual = trial;
            value = trial_value;
            saturated = trial_sat;
            history.push(value);
            grad = problem.gradient(&dual, config.form, GSource::Exact)?;
            converged = grad.norm() <= config.tol;
        } else {
            lr *= 0.5;
            if lr < config.lr * 1e-12 {
                break;
            }
        }
    }
    dual.refresh_norms();
    dual.g = problem.exact_g_table(&dual);
    let reweighting = problem.reweighting(&dual, GSource::Exact)?;
    let lambda_min = lambda_min(map, mdp, policy, reweighting.q.weights())?;
    Ok(DualSolution {
        objective: value,
        grad_norm: grad.norm(),
        dual,
        reweighting,
        iterations,
        converged,
        saturated,
        lambda_min,
        history,
    })
}

/// Outcome of one minibatch dual step.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStepInfo {
    /// Minibatch-normalized weights, one per transition.
    pub u: DVector<f64>,
    pub u_bar: f64,
    /// Weighted mean of `⟨yB, yA'⟩` over the batch, before the update.
    pub coupling: f64,
}

/// One two-time-scale update: weights `u` from the g-table, the u-weighted
/// `(A, B)` step, then the g regression toward the normalized successor
/// product.
pub fn stochastic_dual_step(dual: &mut DualState, batch: &[Transition], map: &FeatureMap) -> Result<DualStepInfo> {
    if batch.is_empty() {
        return Err(PopqlError::EmptyMinibatch);
    }
    let m = map.actions();
    let r = dual.rank();
    let scale = dual.g_scale();
    let mut raw = Vec::with_capacity(batch.len());
    let mut ya_all = Vec::with_capacity(batch.len());
    for t in batch {
        let x = t.s * m + t.a;
        if x >= map.rows() || t.s_next * m + t.a_next >= map.rows() {
            return Err(PopqlError::IndexOutOfRange {
                index: x.max(t.s_next * m + t.a_next),
                len: map.rows(),
            });
        }
        let phi = map.phi().row(x);
        let phi_next = map.phi().row(t.s_next * m + t.a_next);
        let ya = phi * &dual.a;
        let yb = phi * &dual.b;
        let ya_next = phi_next * &dual.a;
        raw.push(ya.norm_squared() + yb.norm_squared() + 2.0 * dual.g[x] * scale);
        ya_all.push((ya, yb, ya_next));
    }
    let total: f64 = batch.iter().map(|t| t.weight).sum();
    if !(total > 0.0) {
        return Err(PopqlError::EmptyMinibatch);
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let mean_shifted = batch.iter().zip(&shifted).map(|(t, v)| t.weight * v).sum::<f64>() / total;
    let u = DVector::from_iterator(batch.len(), shifted.iter().map(|v| v / mean_shifted));
    let u_bar = mean_shifted * max.exp();

    let k = dual.k();
    let mut da = DMatrix::zeros(k, r);
    let mut db = DMatrix::zeros(k, r);
    let mut coupling = 0.0;
    let mut g_target = DVector::<f64>::zeros(dual.g.len());
    let mut g_mass = DVector::<f64>::zeros(dual.g.len());
    for (i, t) in batch.iter().enumerate() {
        let x = t.s * m + t.a;
        let phi = map.phi().row(x).transpose();
        let phi_next = map.phi().row(t.s_next * m + t.a_next).transpose();
        let (ya, yb, ya_next) = &ya_all[i];
        let c = t.weight * u[i] / total;
        da += (&phi * ya + &phi_next * yb) * (2.0 * c);
        db += (&phi * yb + &phi * ya_next) * (2.0 * c);
        let prod = yb.dot(ya_next);
        coupling += t.weight * prod / total;
        g_target[x] += t.weight * prod;
        g_mass[x] += t.weight;
    }
    dual.a -= da * dual.lr_ab;
    dual.b -= db * dual.lr_ab;
    // regression toward targets measured with the pre-update factors
    let step = (2.0 * dual.lr_g).min(1.0);
    for x in 0..dual.g.len() {
        if g_mass[x] > 0.0 {
            let target = if dual.spectral_normalize {
                if scale == 0.0 {
                    0.0
                } else {
                    g_target[x] / g_mass[x] / scale
                }
            } else {
                g_target[x] / g_mass[x]
            };
            dual.g[x] -= step * (dual.g[x] - target);
        }
    }
    dual.refresh_norms();
    Ok(DualStepInfo { u, u_bar, coupling })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::random_unit_features_mdp;
    use crate::models::{build_three_state, enumerate_transitions, random_mdp, random_policy, three_state_family};

    fn three_state() -> (FeatureMap, FiniteMdp, DiscretePolicy) {
        let (mrp, map) = build_three_state();
        (map, mrp.as_mdp(), DiscretePolicy::uniform(3, 1))
    }

    #[test]
    fn zero_dual_is_neutral() {
        let (map, mdp, pi) = three_state();
        let mu = three_state_family(0.8).unwrap();
        let dual = DualState::zeros(2, 4, 3);
        assert_eq!(dual.rank(), 2);
        assert_eq!(dual_objective(&map, &mdp, &pi, &dual, &mu).unwrap().value, 1.0);
        let g = dual_gradient(&map, &mdp, &pi, &dual, &mu, GSource::Exact).unwrap();
        assert_eq!(g.norm(), 0.0);
        let rw = reweighting(&map, &mdp, &pi, &dual, &mu, GSource::Exact).unwrap();
        assert!(rw.u.iter().all(|&u| u == 1.0));
        assert_eq!(rw.kl, 0.0);
        assert_eq!(exact_g(&map, &mdp, &pi, &dual, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn identity_factor_recovers_features() {
        let map = random_unit_features_mdp(1, 3, 2, 3).unwrap();
        let dual = DualState::from_factors(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), 6).unwrap();
        let (ya, yb, ya_next) = dual_terms(&map, &dual, 1, 1, 2, 0).unwrap();
        assert_eq!(ya, map.phi().row(3).transpose());
        assert_eq!(yb, DVector::zeros(3));
        assert_eq!(ya_next, map.phi().row(4).transpose());
    }

    #[test]
    fn point_mass_deterministic_objective() {
        let mdp = random_mdp(0, 1, 1, 1.0).unwrap();
        let map = random_unit_features_mdp(2, 1, 1, 2).unwrap();
        let pi = DiscretePolicy::uniform(1, 1);
        let dual = DualState::random(2, 1, 1, 0.5, 4);
        let phi = map.phi().row(0);
        let ya = (phi * &dual.a)[0];
        let yb = (phi * &dual.b)[0];
        let want = (ya * ya + yb * yb + 2.0 * yb * ya).exp();
        let got = dual_objective(&map, &mdp, &pi, &dual, &SampleDistribution::uniform(1)).unwrap();
        assert!((got.value - want).abs() < 1e-14);
        assert!(!got.saturated);
    }

    #[test]
    fn clamp_is_flagged() {
        let (map, mdp, pi) = three_state();
        let dual = DualState::from_factors(DMatrix::identity(2, 2) * 10.0, DMatrix::zeros(2, 2), 3).unwrap();
        let v = dual_objective(&map, &mdp, &pi, &dual, &three_state_family(0.5).unwrap()).unwrap();
        assert!(v.saturated && v.value.is_finite());
    }

    #[test]
    fn normalized_g_is_bounded() {
        for seed in 0..20 {
            let mdp = random_mdp(seed, 4, 2, 0.7).unwrap();
            let map = random_unit_features_mdp(seed, 4, 2, 3).unwrap();
            let pi = random_policy(seed, 4, 2);
            let dual = DualState::random(3, 2, 8, 1.0, seed);
            for s in 0..4 {
                for a in 0..2 {
                    assert!(exact_g(&map, &mdp, &pi, &dual, s, a).unwrap().abs() <= 1.0 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn z_is_psd() {
        let dual = DualState::random(4, 3, 1, 1.0, 9);
        assert!(linalg::min_eigenvalue(&dual.z()).unwrap() >= -1e-10);
    }

    #[test]
    fn identical_batch_gives_unit_weights() {
        let (map, _, _) = three_state();
        let mut dual = DualState::random(2, 2, 3, 0.3, 1).with_rates(0.1, 1.0);
        let t = Transition {
            s: 2,
            a: 0,
            r: 0.0,
            s_next: 0,
            a_next: 0,
            weight: 1.0,
        };
        let before = dual.clone();
        let info = stochastic_dual_step(&mut dual, &[t; 5], &map).unwrap();
        assert!(info.u.iter().all(|&u| (u - 1.0).abs() < 1e-12));
        let phi = map.phi().row(2).transpose();
        let phi_next = map.phi().row(0).transpose();
        let ya = before.a.tr_mul(&phi);
        let yb = before.b.tr_mul(&phi);
        let ya_next = before.a.tr_mul(&phi_next);
        let da = (&phi * ya.transpose() + &phi_next * yb.transpose()) * 2.0;
        let db = (&phi * yb.transpose() + &phi * ya_next.transpose()) * 2.0;
        assert!((&before.a - da * 0.1 - &dual.a).amax() < 1e-14);
        assert!((&before.b - db * 0.1 - &dual.b).amax() < 1e-14);
        assert!(stochastic_dual_step(&mut dual, &[], &map).is_err());
    }

    #[test]
    fn on_policy_dual_stays_at_zero() {
        let (map, mdp, pi) = three_state();
        let mu = three_state_family(0.5).unwrap();
        let sol = solve_dual(&map, &mdp, &pi, &mu, &DualConfig::default()).unwrap();
        assert!(sol.reweighting.kl <= 1e-6, "kl {}", sol.reweighting.kl);
        assert!(sol.reweighting.u.iter().all(|&u| (u - 1.0).abs() <= 1e-3));
    }

    #[test]
    fn off_policy_dual_restores_certificate() {
        let (map, mdp, pi) = three_state();
        let mu = three_state_family(0.8).unwrap();
        let sol = solve_dual(&map, &mdp, &pi, &mu, &DualConfig::default()).unwrap();
        assert!(sol.objective < 1.0);
        assert!(sol.lambda_min >= -0.005, "{}", sol.lambda_min);
        let q = sol.reweighting.q.weights();
        // mass moves from the first two states toward the third
        assert!(q[2] > mu.weights()[2]);
        assert!(sol.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn full_support_batch_matches_exact_gradient_direction() {
        let (map, mdp, pi) = three_state();
        let mu = three_state_family(0.8).unwrap();
        let problem = DualProblem::new(&map, &mdp, &pi, &mu).unwrap();
        let mut dual = DualState::random(2, 2, 3, 0.4, 5).with_rates(1e-3, 1e-2);
        dual.g = problem.exact_g_table(&dual);
        let before = dual.clone();
        let batch = enumerate_transitions(&mdp, &pi, &mu).unwrap();
        stochastic_dual_step(&mut dual, &batch, &map).unwrap();
        let exact = problem.gradient(&before, DualForm::LogExp, GSource::Exact).unwrap();
        let step_a = (&before.a - &dual.a) / before.lr_ab;
        let step_b = (&before.b - &dual.b) / before.lr_ab;
        assert!((step_a - exact.da).amax() < 1e-12);
        assert!((step_b - exact.db).amax() < 1e-12);
    }
}
