//! Finite Markov reward and decision processes, exact solvers, and the
//! canonical small instances.
//!
//! State-action pairs are addressed by the flat index `s * m + a` everywhere,
//! including the JSON document format.

use nalgebra::{DMatrix, DVector};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PopqlError, Result};
use crate::features::{three_state_basis, FeatureMap};
use crate::linalg;

const ROW_TOL: f64 = 1e-12;
const DIST_TOL: f64 = 1e-10;

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(PopqlError::InvalidModel(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

fn check_stochastic_rows(p: &DMatrix<f64>, what: &str) -> Result<()> {
    for (i, row) in p.row_iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(PopqlError::InvalidModel(format!(
                "{what} row {i} has a negative or non-finite entry"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(PopqlError::InvalidModel(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Finite n-state Markov reward process.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMrp {
    p: DMatrix<f64>,
    r: DVector<f64>,
    gamma: f64,
}

impl FiniteMrp {
    pub fn new(p: DMatrix<f64>, r: DVector<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if !p.is_square() || p.nrows() == 0 {
            return Err(PopqlError::InvalidModel(
                "transition matrix must be square and non-empty".into(),
            ));
        }
        if r.len() != p.nrows() {
            return Err(PopqlError::DimensionMismatch {
                expected: p.nrows(),
                found: r.len(),
            });
        }
        check_stochastic_rows(&p, "transition")?;
        Ok(Self { p, r, gamma })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The same process viewed as a one-action MDP with a uniform start.
    pub fn as_mdp(&self) -> FiniteMdp {
        let n = self.n();
        FiniteMdp {
            n,
            m: 1,
            p: self.p.clone(),
            r: self.r.clone(),
            gamma: self.gamma,
            start: DVector::from_element(n, 1.0 / n as f64),
            layout: None,
        }
    }
}

/// Finite MDP. `p` has one row per state-action pair (flat index `s * m + a`)
/// holding the successor-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n: usize,
    m: usize,
    p: DMatrix<f64>,
    r: DVector<f64>,
    gamma: f64,
    start: DVector<f64>,
    layout: Option<String>,
}

impl FiniteMdp {
    pub fn new(n: usize, m: usize, p: DMatrix<f64>, r: DVector<f64>, gamma: f64, start: DVector<f64>) -> Result<Self> {
        check_gamma(gamma)?;
        if n == 0 || m == 0 {
            return Err(PopqlError::InvalidModel(
                "state and action counts must be positive".into(),
            ));
        }
        if p.nrows() != n * m || p.ncols() != n {
            return Err(PopqlError::InvalidModel(format!(
                "transition tensor is {}x{}, expected {}x{}",
                p.nrows(),
                p.ncols(),
                n * m,
                n
            )));
        }
        if r.len() != n * m {
            return Err(PopqlError::DimensionMismatch {
                expected: n * m,
                found: r.len(),
            });
        }
        if start.len() != n {
            return Err(PopqlError::DimensionMismatch {
                expected: n,
                found: start.len(),
            });
        }
        check_stochastic_rows(&p, "transition")?;
        let start_mat = DMatrix::from_row_slice(1, n, start.as_slice());
        check_stochastic_rows(&start_mat, "start distribution")?;
        Ok(Self {
            n,
            m,
            p,
            r,
            gamma,
            start,
            layout: None,
        })
    }

    pub fn with_layout(mut self, layout: impl Into<String>) -> Self {
        self.layout = Some(layout.into());
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of state-action pairs.
    pub fn pairs(&self) -> usize {
        self.n * self.m
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.start
    }

    pub fn layout(&self) -> Option<&str> {
        self.layout.as_deref()
    }

    pub fn index(&self, s: usize, a: usize) -> Result<usize> {
        if s >= self.n {
            return Err(PopqlError::IndexOutOfRange { index: s, len: self.n });
        }
        if a >= self.m {
            return Err(PopqlError::IndexOutOfRange { index: a, len: self.m });
        }
        Ok(s * self.m + a)
    }

    /// `p(s' | s, a)`
    pub fn transition(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.p[(s * self.m + a, s_next)]
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

/// Row-stochastic action distribution per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePolicy {
    probs: DMatrix<f64>,
}

impl DiscretePolicy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(PopqlError::InvalidPolicy("empty policy".into()));
        }
        check_stochastic_rows(&probs, "policy").map_err(|e| PopqlError::InvalidPolicy(e.to_string()))?;
        Ok(Self { probs })
    }

    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n, m, 1.0 / m as f64),
        }
    }

    /// One action per state with probability one.
    pub fn deterministic(actions: &[usize], m: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), m);
        for (s, &a) in actions.iter().enumerate() {
            if a >= m {
                return Err(PopqlError::IndexOutOfRange { index: a, len: m });
            }
            probs[(s, a)] = 1.0;
        }
        Self::new(probs)
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn m(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[(s, a)]
    }

    /// Lowest-index action among the most probable ones.
    pub fn mode(&self, s: usize) -> usize {
        argmax_lowest(self.probs.row(s).iter().copied())
    }

    fn check_for(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.n() != mdp.n() || self.m() != mdp.m() {
            return Err(PopqlError::InvalidPolicy(format!(
                "policy is {}x{}, model has {} states and {} actions",
                self.n(),
                self.m(),
                mdp.n(),
                mdp.m()
            )));
        }
        Ok(())
    }
}

pub(crate) fn argmax_lowest(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            arg = i;
        }
    }
    arg
}

/// A logged transition with its multiplicity in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub count: u64,
}

/// A sampled transition with the successor action drawn from the policy being
/// evaluated. `weight` is a per-sample multiplicity (1 for i.i.d. draws).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub a_next: usize,
    pub weight: f64,
}

/// Probability vector over states (MRP) or state-action pairs (MDP),
/// optionally backed by a finite dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDistribution {
    weights: DVector<f64>,
    dataset: Option<Vec<TransitionRecord>>,
}

impl SampleDistribution {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(PopqlError::InvalidDistribution("empty weight vector".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(PopqlError::InvalidDistribution("negative or non-finite weight".into()));
        }
        let sum = weights.sum();
        if (sum - 1.0).abs() > DIST_TOL {
            return Err(PopqlError::InvalidDistribution(format!("weights sum to {sum}")));
        }
        Ok(Self { weights, dataset: None })
    }

    /// Normalizes a nonnegative vector into a distribution.
    pub fn normalized(raw: DVector<f64>) -> Result<Self> {
        let sum = raw.sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(PopqlError::InvalidDistribution("weights have no positive mass".into()));
        }
        Self::new(raw / sum)
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            weights: DVector::from_element(len, 1.0 / len as f64),
            dataset: None,
        }
    }

    pub fn point_mass(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(PopqlError::IndexOutOfRange { index, len });
        }
        let mut w = DVector::zeros(len);
        w[index] = 1.0;
        Ok(Self {
            weights: w,
            dataset: None,
        })
    }

    /// Empirical distribution of a dataset over flat `(s, a)` indices.
    pub fn from_dataset(records: Vec<TransitionRecord>, n: usize, m: usize) -> Result<Self> {
        let mut w = DVector::zeros(n * m);
        let mut total = 0u64;
        for rec in &records {
            if rec.s >= n || rec.s_next >= n {
                return Err(PopqlError::IndexOutOfRange {
                    index: rec.s.max(rec.s_next),
                    len: n,
                });
            }
            if rec.a >= m {
                return Err(PopqlError::IndexOutOfRange { index: rec.a, len: m });
            }
            w[rec.s * m + rec.a] += rec.count as f64;
            total += rec.count;
        }
        if total == 0 {
            return Err(PopqlError::InvalidDistribution("dataset has no transitions".into()));
        }
        w /= total as f64;
        Ok(Self {
            weights: w,
            dataset: Some(records),
        })
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dataset(&self) -> Option<&[TransitionRecord]> {
        self.dataset.as_deref()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Marginal over states when indexed by `s * m + a`.
    pub fn state_marginal(&self, m: usize) -> DVector<f64> {
        let n = self.len() / m;
        DVector::from_fn(n, |s, _| (0..m).map(|a| self.weights[s * m + a]).sum())
    }

    /// `D_KL(self ‖ other)`, infinite when `self` charges a null set of `other`.
    pub fn kl_divergence(&self, other: &SampleDistribution) -> f64 {
        kl_divergence(&self.weights, &other.weights)
    }

    /// Re-validates the invariants, including dataset/weight agreement.
    pub fn validate(&self) -> Result<()> {
        let again = Self::new(self.weights.clone())?;
        if let Some(records) = &self.dataset {
            let total: u64 = records.iter().map(|r| r.count).sum();
            let mut emp = DVector::zeros(self.len());
            let m = records.iter().map(|r| r.a + 1).max().unwrap_or(1);
            let m = if self.len().is_multiple_of(m) {
                self.len() / (self.len() / m).max(1)
            } else {
                m
            };
            for rec in records {
                emp[rec.s * m + rec.a] += rec.count as f64 / total as f64;
            }
            if (emp - &again.weights).amax() > DIST_TOL {
                return Err(PopqlError::InvalidDistribution(
                    "dataset frequencies disagree with weights".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn kl_divergence(q: &DVector<f64>, p: &DVector<f64>) -> f64 {
    q.iter()
        .zip(p.iter())
        .map(|(&qi, &pi)| {
            if qi <= 0.0 {
                0.0
            } else if pi <= 0.0 {
                f64::INFINITY
            } else {
                qi * (qi / pi).ln()
            }
        })
        .sum()
}

/// Three-state process with value `[1, 1, 1.05]`, discount 0.99 and the
/// two-dimensional basis carrying representation error `eps = 1e-4`.
///
/// Every row of the transition matrix is `[1/4, 1/4, 1/2]`: from s1 and s2
/// a quarter each to s1/s2 and a half to s3; s3 keeps half on itself.
pub fn build_three_state() -> (FiniteMrp, FeatureMap) {
    build_three_state_with(THREE_STATE_EPS)
}

pub const THREE_STATE_EPS: f64 = 1e-4;
pub const THREE_STATE_GAMMA: f64 = 0.99;
pub const THREE_STATE_VALUE: [f64; 3] = [1.0, 1.0, 1.05];

pub fn build_three_state_with(eps: f64) -> (FiniteMrp, FeatureMap) {
    let p = DMatrix::from_row_slice(3, 3, &[0.25, 0.25, 0.5, 0.25, 0.25, 0.5, 0.25, 0.25, 0.5]);
    let v = DVector::from_row_slice(&THREE_STATE_VALUE);
    let r = (DMatrix::identity(3, 3) - &p * THREE_STATE_GAMMA) * &v;
    let mrp = FiniteMrp::new(p, r, THREE_STATE_GAMMA).expect("three-state model is valid");
    let basis = three_state_basis(eps).expect("eps is nonnegative");
    (mrp, basis)
}

/// Sampling family `(p/2, p/2, 1 - p)` over the three states.
pub fn three_state_family(p: f64) -> Result<SampleDistribution> {
    if !(0.0..=1.0).contains(&p) {
        return Err(PopqlError::InvalidDistribution(format!(
            "family parameter {p} outside [0, 1]"
        )));
    }
    SampleDistribution::new(DVector::from_vec(vec![p / 2.0, p / 2.0, 1.0 - p]))
}

pub const LEFT: usize = 0;
pub const DOWN: usize = 1;
pub const RIGHT: usize = 2;
pub const UP: usize = 3;

/// Standard 4x4 map: start top-left, goal bottom-right, four holes.
pub const FROZEN_LAKE_4X4: [&str; 4] = ["SFFF", "FHFH", "FFFH", "HFFG"];

/// Continuing 4x4 Frozen Lake. Holes and the goal are ordinary states whose
/// every action returns the agent to the start; acting at the goal pays
/// `goal_reward`. Moves off the grid leave the agent in place. With `slip`,
/// the intended move and each perpendicular move happen with probability 1/3.
pub fn build_frozen_lake(slip: bool, goal_reward: f64, gamma: f64) -> Result<FiniteMdp> {
    build_grid_lake(&FROZEN_LAKE_4X4, slip, goal_reward, gamma)
}

pub fn build_grid_lake(rows: &[&str], slip: bool, goal_reward: f64, gamma: f64) -> Result<FiniteMdp> {
    check_gamma(gamma)?;
    let height = rows.len();
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if height == 0 || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PopqlError::InvalidModel(
            "lake layout must be a non-empty rectangle".into(),
        ));
    }
    let cells: Vec<u8> = rows.iter().flat_map(|r| r.bytes()).collect();
    let n = cells.len();
    let m = 4;
    let start = cells
        .iter()
        .position(|&c| c == b'S')
        .ok_or_else(|| PopqlError::InvalidModel("layout has no start cell".into()))?;
    if !cells.iter().all(|c| b"SFHG".contains(c)) {
        return Err(PopqlError::InvalidModel("layout cells must be S, F, H or G".into()));
    }
    let step = |s: usize, a: usize| -> usize {
        let (mut r, mut c) = (s / width, s % width);
        match a {
            LEFT => c = c.saturating_sub(1),
            DOWN => r = (r + 1).min(height - 1),
            RIGHT => c = (c + 1).min(width - 1),
            _ => r = r.saturating_sub(1),
        }
        r * width + c
    };
    let mut p = DMatrix::zeros(n * m, n);
    let mut rew = DVector::zeros(n * m);
    for s in 0..n {
        for a in 0..m {
            let x = s * m + a;
            match cells[s] {
                b'H' => p[(x, start)] = 1.0,
                b'G' => {
                    p[(x, start)] = 1.0;
                    rew[x] = goal_reward;
                }
                _ if slip => {
                    for b in [(a + 3) % 4, a, (a + 1) % 4] {
                        p[(x, step(s, b))] += 1.0 / 3.0;
                    }
                }
                _ => p[(x, step(s, a))] = 1.0,
            }
        }
    }
    let mut start_dist = DVector::zeros(n);
    start_dist[start] = 1.0;
    Ok(FiniteMdp::new(n, m, p, rew, gamma, start_dist)?.with_layout(rows.join("/")))
}

/// Solves `V = R + γPV` exactly.
pub fn exact_value(mrp: &FiniteMrp) -> Result<DVector<f64>> {
    let n = mrp.n();
    let a = DMatrix::identity(n, n) - mrp.p() * mrp.gamma();
    linalg::solve(&a, mrp.r(), "exact_value")
}

/// Action values of `policy`, solved on the state-action chain.
pub fn exact_q(mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<DVector<f64>> {
    exact_value(&mdp_to_mrp(mdp, policy)?)
}

/// Chain over `X = S × A` with `Pπ((s,a),(s',a')) = p(s'|s,a) π(a'|s')`.
pub fn mdp_to_mrp(mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<FiniteMrp> {
    policy.check_for(mdp)?;
    let (n, m) = (mdp.n(), mdp.m());
    let big = n * m;
    let mut p = DMatrix::zeros(big, big);
    for x in 0..big {
        for s2 in 0..n {
            let ps = mdp.p[(x, s2)];
            if ps == 0.0 {
                continue;
            }
            for a2 in 0..m {
                p[(x, s2 * m + a2)] = ps * policy.prob(s2, a2);
            }
        }
    }
    FiniteMrp::new(p, mdp.r.clone(), mdp.gamma)
}

/// `E_{s'∼p(·|x), a'∼π(s')}[v(s', a')]` for every pair `x`, applied to each
/// column of `values` (rows indexed by flat pair).
pub fn expected_next(mdp: &FiniteMdp, policy: &DiscretePolicy, values: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m) = (mdp.n(), mdp.m());
    let cols = values.ncols();
    let mut per_state = DMatrix::zeros(n, cols);
    for s in 0..n {
        for a in 0..m {
            let pa = policy.prob(s, a);
            if pa != 0.0 {
                for c in 0..cols {
                    per_state[(s, c)] += pa * values[(s * m + a, c)];
                }
            }
        }
    }
    mdp.p() * per_state
}

/// Vector form of [`expected_next`].
pub fn expected_next_vec(mdp: &FiniteMdp, policy: &DiscretePolicy, values: &DVector<f64>) -> DVector<f64> {
    let (n, m) = (mdp.n(), mdp.m());
    let per_state = DVector::from_fn(n, |s, _| (0..m).map(|a| policy.prob(s, a) * values[s * m + a]).sum());
    mdp.p() * per_state
}

const STATIONARY_TOL: f64 = 1e-12;
const STATIONARY_MAX_ITER: usize = 1_000_000;

/// Unique stationary distribution of a row-stochastic matrix.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<SampleDistribution> {
    if !p.is_square() || p.nrows() == 0 {
        return Err(PopqlError::InvalidModel(
            "transition matrix must be square and non-empty".into(),
        ));
    }
    check_stochastic_rows(p, "transition")?;
    let classes = closed_class_count(p);
    if classes != 1 {
        return Err(PopqlError::NonErgodic { classes });
    }
    let n = p.nrows();
    if let Some(nu) = stationary_direct(p) {
        if stationary_residual(p, &nu) <= 1e-10 {
            return SampleDistribution::normalized(nu);
        }
    }
    let nu = stationary_power(p, STATIONARY_TOL, STATIONARY_MAX_ITER);
    if stationary_residual(p, &nu) > 1e-10 {
        return Err(PopqlError::Numeric(format!(
            "stationary solve did not converge for a {n}-state chain"
        )));
    }
    SampleDistribution::normalized(nu)
}

pub fn stationary_residual(p: &DMatrix<f64>, nu: &DVector<f64>) -> f64 {
    (p.transpose() * nu - nu).abs().sum()
}

fn stationary_direct(p: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let nu = a.lu().solve(&b)?;
    if nu.iter().any(|v| !v.is_finite() || *v < -1e-9) {
        return None;
    }
    Some(nu.map(|v| v.max(0.0)))
}

/// Lazy power iteration `ν ← (ν + νP) / 2`, which shares the stationary
/// distribution and converges on periodic chains.
pub fn stationary_power(p: &DMatrix<f64>, tol: f64, max_iter: usize) -> DVector<f64> {
    let n = p.nrows();
    let pt = p.transpose();
    let mut nu = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..max_iter {
        let next = (&pt * &nu + &nu) * 0.5;
        let diff = (&next - &nu).abs().sum();
        nu = next;
        if diff <= tol {
            break;
        }
    }
    let s = nu.sum();
    nu / s
}

/// Number of closed communicating classes (recurrent classes).
pub fn closed_class_count(p: &DMatrix<f64>) -> usize {
    let n = p.nrows();
    let mut g = DiGraph::<(), ()>::with_capacity(n, n * 2);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for i in 0..n {
        for j in 0..n {
            if p[(i, j)] > 0.0 {
                g.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let sccs = tarjan_scc(&g);
    let mut comp = vec![0usize; n];
    for (c, members) in sccs.iter().enumerate() {
        for v in members {
            comp[v.index()] = c;
        }
    }
    sccs.iter()
        .enumerate()
        .filter(|(c, members)| {
            members.iter().all(|v| {
                let i = v.index();
                (0..n).all(|j| p[(i, j)] == 0.0 || comp[j] == *c)
            })
        })
        .count()
}

/// Seeded random MDP for property tests. Each successor is kept with
/// probability `sparsity` (at least one per row); rewards are uniform on
/// `[-1, 1]`, discount 0.9, uniform start.
pub fn random_mdp(seed: u64, n: usize, m: usize, sparsity: f64) -> Result<FiniteMdp> {
    if n == 0 || m == 0 {
        return Err(PopqlError::InvalidModel(
            "state and action counts must be positive".into(),
        ));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(PopqlError::InvalidModel(format!("sparsity {sparsity} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = DMatrix::zeros(n * m, n);
    for x in 0..n * m {
        let mut any = false;
        for s2 in 0..n {
            if sparsity >= 1.0 || rng.gen::<f64>() < sparsity {
                // (0, 1]
                p[(x, s2)] = 1.0 - rng.gen::<f64>();
                any = true;
            }
        }
        if !any {
            p[(x, rng.gen_range(0..n))] = 1.0;
        }
        let sum: f64 = p.row(x).sum();
        p.row_mut(x).unscale_mut(sum);
        let sum: f64 = p.row(x).sum();
        // push the rounding residue into the largest entry
        let jmax = argmax_lowest(p.row(x).iter().copied());
        p[(x, jmax)] += 1.0 - sum;
    }
    let r = DVector::from_fn(n * m, |_, _| rng.gen_range(-1.0..=1.0));
    FiniteMdp::new(n, m, p, r, 0.9, DVector::from_element(n, 1.0 / n as f64))
}

/// Seeded random stochastic policy with entries bounded away from zero.
pub fn random_policy(seed: u64, n: usize, m: usize) -> DiscretePolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probs = DMatrix::from_fn(n, m, |_, _| 0.05 + rng.gen::<f64>());
    for mut row in probs.row_iter_mut() {
        let s: f64 = row.sum();
        row.unscale_mut(s);
    }
    DiscretePolicy { probs }
}

/// Optimal state values and the greedy policy (lowest action index on ties).
pub fn value_iteration(mdp: &FiniteMdp, tol: f64, max_iter: usize) -> (DVector<f64>, DiscretePolicy) {
    let (n, m) = (mdp.n(), mdp.m());
    let mut v = DVector::zeros(n);
    let mut q = DVector::zeros(n * m);
    for _ in 0..max_iter {
        q = mdp.r() + mdp.p() * &v * mdp.gamma();
        let next = DVector::from_fn(n, |s, _| (0..m).map(|a| q[s * m + a]).fold(f64::NEG_INFINITY, f64::max));
        let diff = (&next - &v).amax();
        v = next;
        if diff <= tol {
            break;
        }
    }
    let actions: Vec<usize> = (0..n)
        .map(|s| {
            let best = v[s];
            (0..m).find(|&a| q[s * m + a] >= best - 1e-12).unwrap_or(0)
        })
        .collect();
    let policy = DiscretePolicy::deterministic(&actions, m).expect("greedy actions are in range");
    (v, policy)
}

/// Draws `count` i.i.d. transitions: `(s, a)` from the dataset records (by
/// count) or from the distribution weights, `s'` from the model, and a fresh
/// `a' ∼ π(s')`.
pub fn sample_transitions<R: Rng>(
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    policy.check_for(mdp)?;
    if dist.len() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: dist.len(),
        });
    }
    let m = mdp.m();
    let policy_rows: Vec<WeightedIndex<f64>> = (0..mdp.n())
        .map(|s| WeightedIndex::new(policy.probs().row(s).iter().copied()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| PopqlError::InvalidPolicy(e.to_string()))?;
    let draw_next_action = |rng: &mut R, s2: usize| policy_rows[s2].sample(rng);
    let mut out = Vec::with_capacity(count);
    match dist.dataset() {
        Some(records) => {
            let pick = WeightedIndex::new(records.iter().map(|r| r.count))
                .map_err(|e| PopqlError::InvalidDistribution(e.to_string()))?;
            for _ in 0..count {
                let rec = records[pick.sample(rng)];
                let a_next = draw_next_action(rng, rec.s_next);
                out.push(Transition {
                    s: rec.s,
                    a: rec.a,
                    r: rec.r,
                    s_next: rec.s_next,
                    a_next,
                    weight: 1.0,
                });
            }
        }
        None => {
            let pick = WeightedIndex::new(dist.weights().iter().copied())
                .map_err(|e| PopqlError::InvalidDistribution(e.to_string()))?;
            let rows: Vec<WeightedIndex<f64>> = (0..mdp.pairs())
                .map(|x| WeightedIndex::new(mdp.p().row(x).iter().copied()))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| PopqlError::InvalidModel(e.to_string()))?;
            for _ in 0..count {
                let x = pick.sample(rng);
                let s_next = rows[x].sample(rng);
                let a_next = draw_next_action(rng, s_next);
                out.push(Transition {
                    s: x / m,
                    a: x % m,
                    r: mdp.r()[x],
                    s_next,
                    a_next,
                    weight: 1.0,
                });
            }
        }
    }
    Ok(out)
}

/// Every `(s, a, s', a')` with positive probability, weighted by
/// `μ(s,a) p(s'|s,a) π(a'|s')`: the exact expectation as a weighted batch.
pub fn enumerate_transitions(
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
) -> Result<Vec<Transition>> {
    policy.check_for(mdp)?;
    if dist.len() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: dist.len(),
        });
    }
    let (n, m) = (mdp.n(), mdp.m());
    let mut out = Vec::new();
    for x in 0..n * m {
        let wx = dist.weights()[x];
        if wx == 0.0 {
            continue;
        }
        for s2 in 0..n {
            let ps = mdp.p()[(x, s2)];
            if ps == 0.0 {
                continue;
            }
            for a2 in 0..m {
                let pa = policy.prob(s2, a2);
                if pa == 0.0 {
                    continue;
                }
                out.push(Transition {
                    s: x / m,
                    a: x % m,
                    r: mdp.r()[x],
                    s_next: s2,
                    a_next: a2,
                    weight: wx * ps * pa,
                });
            }
        }
    }
    Ok(out)
}

/// JSON document for a model: `P[s][a][s']`, `R[s][a]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n: usize,
    pub m: usize,
    pub gamma: f64,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
}

impl From<&FiniteMdp> for ModelDocument {
    fn from(mdp: &FiniteMdp) -> Self {
        let (n, m) = (mdp.n, mdp.m);
        ModelDocument {
            n,
            m,
            gamma: mdp.gamma,
            p: (0..n)
                .map(|s| (0..m).map(|a| mdp.p.row(s * m + a).iter().copied().collect()).collect())
                .collect(),
            r: (0..n).map(|s| (0..m).map(|a| mdp.r[s * m + a]).collect()).collect(),
            start: mdp.start.iter().copied().collect(),
            layout: mdp.layout.clone(),
        }
    }
}

impl TryFrom<ModelDocument> for FiniteMdp {
    type Error = PopqlError;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let (n, m) = (doc.n, doc.m);
        if doc.p.len() != n || doc.r.len() != n {
            return Err(PopqlError::InvalidModel("P and R must have one entry per state".into()));
        }
        let mut p = DMatrix::zeros(n * m, n);
        let mut r = DVector::zeros(n * m);
        for s in 0..n {
            if doc.p[s].len() != m || doc.r[s].len() != m {
                return Err(PopqlError::InvalidModel(format!("state {s} must list {m} actions")));
            }
            for a in 0..m {
                if doc.p[s][a].len() != n {
                    return Err(PopqlError::InvalidModel(format!("P[{s}][{a}] must have {n} entries")));
                }
                for s2 in 0..n {
                    p[(s * m + a, s2)] = doc.p[s][a][s2];
                }
                r[s * m + a] = doc.r[s][a];
            }
        }
        let mdp = FiniteMdp::new(n, m, p, r, doc.gamma, DVector::from_vec(doc.start))?;
        Ok(match doc.layout {
            Some(l) => mdp.with_layout(l),
            None => mdp,
        })
    }
}

impl FiniteMrp {
    pub fn to_json(&self) -> Result<String> {
        self.as_mdp().to_json()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp = FiniteMdp::from_json(text)?;
        if mdp.m() != 1 {
            return Err(PopqlError::InvalidModel(
                "reward-process document must have m = 1".into(),
            ));
        }
        FiniteMrp::new(mdp.p().clone(), mdp.r().clone(), mdp.gamma())
    }
}
