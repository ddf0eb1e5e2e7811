//! The contraction certificate `E_q[F] ⪰ 0`, its Schur-complement form, and
//! the fixed-point error bound.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PopqlError, Result};
use crate::features::FeatureMap;
use crate::linalg;
use crate::models::{
    exact_q, expected_next, mdp_to_mrp, stationary_distribution, DiscretePolicy, FiniteMdp, SampleDistribution,
};
use crate::td::lstd_fixed_point;

/// Default acceptance tolerance on `λ_min(E[F])`.
pub const DEFAULT_TOL: f64 = 0.005;

/// Mass at or below this is treated as outside the support when computing δ.
pub const SUPPORT_EPS: f64 = 1e-12;

fn check_shapes(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<()> {
    if map.rows() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: map.rows(),
        });
    }
    if policy.n() != mdp.n() || policy.m() != mdp.m() {
        return Err(PopqlError::InvalidPolicy(format!(
            "policy is {}x{}, model has {} states and {} actions",
            policy.n(),
            policy.m(),
            mdp.n(),
            mdp.m()
        )));
    }
    Ok(())
}

/// Expected successor features `Ψ = E_{s', a'}[φ(s', a')]`, one row per pair.
pub fn next_features(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<DMatrix<f64>> {
    check_shapes(map, mdp, policy)?;
    Ok(expected_next(mdp, policy, map.phi()))
}

fn block(g: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = g.nrows();
    let mut f = DMatrix::zeros(2 * k, 2 * k);
    f.view_mut((0, 0), (k, k)).copy_from(g);
    f.view_mut((0, k), (k, k)).copy_from(c);
    f.view_mut((k, 0), (k, k)).copy_from(&c.transpose());
    f.view_mut((k, k), (k, k)).copy_from(g);
    f
}

/// `F(s, a) = E[[φφᵀ, φφ'ᵀ], [φ'φᵀ, φφᵀ]]` with both diagonal blocks `φφᵀ`.
pub fn f_matrix(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    s: usize,
    a: usize,
) -> Result<DMatrix<f64>> {
    check_shapes(map, mdp, policy)?;
    let x = mdp.index(s, a)?;
    let phi = map.phi().row(x).transpose();
    let mut psi = DVector::zeros(map.k());
    for s2 in 0..mdp.n() {
        let ps = mdp.p()[(x, s2)];
        if ps == 0.0 {
            continue;
        }
        for a2 in 0..mdp.m() {
            let w = ps * policy.prob(s2, a2);
            if w != 0.0 {
                psi.axpy(w, &map.phi().row(s2 * mdp.m() + a2).transpose(), 1.0);
            }
        }
    }
    Ok(block(&(&phi * phi.transpose()), &(&phi * psi.transpose())))
}

/// The two blocks of `E_q[F]`: `G = ΦᵀDΦ` and `C = ΦᵀDΨ`.
pub fn expected_blocks(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    weights: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_shapes(map, mdp, policy)?;
    if weights.len() != mdp.pairs() {
        return Err(PopqlError::DimensionMismatch {
            expected: mdp.pairs(),
            found: weights.len(),
        });
    }
    let psi = expected_next(mdp, policy, map.phi());
    let g = linalg::symmetrize(&linalg::weighted_cross(map.phi(), weights, map.phi()));
    let c = linalg::weighted_cross(map.phi(), weights, &psi);
    Ok((g, c))
}

/// `Σ_x q(x) F(x)`.
pub fn expected_f(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
) -> Result<DMatrix<f64>> {
    expected_f_weights(map, mdp, policy, dist.weights())
}

/// [`expected_f`] for an arbitrary nonnegative weight vector.
pub fn expected_f_weights(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    weights: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (g, c) = expected_blocks(map, mdp, policy, weights)?;
    Ok(block(&g, &c))
}

/// Smallest eigenvalue of `E_q[F]`.
pub fn lambda_min(map: &FeatureMap, mdp: &FiniteMdp, policy: &DiscretePolicy, weights: &DVector<f64>) -> Result<f64> {
    linalg::min_eigenvalue(&expected_f_weights(map, mdp, policy, weights)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    #[serde(skip)]
    pub expected_f: DMatrix<f64>,
    pub lambda_min: f64,
    pub tol: f64,
    pub satisfied: bool,
    pub delta: Option<f64>,
    pub bound_factor: Option<f64>,
    /// False when the basis rows are not unit-norm, which the theory assumes.
    pub features_normalized: bool,
}

impl CertificateReport {
    pub const CSV_HEADER: &'static str = "lambda_min,tol,satisfied,delta,bound_factor";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.lambda_min,
            self.tol,
            self.satisfied,
            opt(self.delta),
            opt(self.bound_factor)
        )
    }
}

/// Certifies `λ_min(E_q[F]) ≥ -tol`. δ and the bound factor are filled in
/// when the stationary distribution of the induced chain exists and shares
/// support with `dist`.
pub fn certify(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
    tol: f64,
) -> Result<CertificateReport> {
    if !(tol >= 0.0) {
        return Err(PopqlError::InvalidConfig(format!(
            "tolerance {tol} must be nonnegative"
        )));
    }
    let f = expected_f(map, mdp, policy, dist)?;
    let lambda_min = linalg::min_eigenvalue(&f)?;
    let nu = mdp_to_mrp(mdp, policy).and_then(|chain| stationary_distribution(chain.p()));
    let delta = nu.ok().and_then(|nu| delta(dist.weights(), nu.weights()).ok());
    Ok(CertificateReport {
        expected_f: f,
        lambda_min,
        tol,
        satisfied: lambda_min >= -tol,
        delta,
        bound_factor: delta.map(|d| bound_factor(mdp.gamma(), d)),
        features_normalized: map.normalized(),
    })
}

/// `δ(ν, μ) = max_x ν(x)/μ(x) · max_x̃ μ(x̃)/ν(x̃)` over the common support.
pub fn delta(mu: &DVector<f64>, nu: &DVector<f64>) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(PopqlError::DimensionMismatch {
            expected: mu.len(),
            found: nu.len(),
        });
    }
    let mut up = 0.0_f64;
    let mut down = 0.0_f64;
    for (i, (&m, &n)) in mu.iter().zip(nu.iter()).enumerate() {
        match (m > SUPPORT_EPS, n > SUPPORT_EPS) {
            (true, true) => {
                up = up.max(n / m);
                down = down.max(m / n);
            }
            (false, false) => {}
            _ => return Err(PopqlError::UnboundedDelta { index: i }),
        }
    }
    if up == 0.0 {
        return Err(PopqlError::Degenerate("distributions have no common support".into()));
    }
    Ok(up * down)
}

/// `(1 + γ√δ) / (1 − γ)`
pub fn bound_factor(gamma: f64, delta: f64) -> f64 {
    (1.0 + gamma * delta.sqrt()) / (1.0 - gamma)
}

/// Both sides of the Schur-complement equivalence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchurCheck {
    /// `λ_min` of the 2k×2k LMI matrix.
    pub lmi_lambda_min: f64,
    /// `λ_max(CᵀG⁻¹C − G)`.
    pub schur_lambda_max: f64,
    pub lmi_satisfied: bool,
    pub schur_satisfied: bool,
    pub agree: bool,
}

/// Relative floor on `λ_min(G)` below which `G` is treated as singular.
pub const DEGENERATE_RTOL: f64 = 1e-10;

/// Evaluates the LMI and its Schur form `CᵀG⁻¹C − G ⪯ 0` with a shared
/// verdict tolerance `tol`.
pub fn schur_equivalence_check(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    dist: &SampleDistribution,
    tol: f64,
) -> Result<SchurCheck> {
    let (g, c) = expected_blocks(map, mdp, policy, dist.weights())?;
    let eig_g = linalg::symmetric_eigenvalues(&g)?;
    let (gmin, gmax) = (eig_g[0], eig_g[eig_g.len() - 1]);
    if gmin <= DEGENERATE_RTOL * gmax.max(f64::MIN_POSITIVE) {
        return Err(PopqlError::Degenerate(format!(
            "feature Gram matrix is singular (λ_min = {gmin:.3e})"
        )));
    }
    let lmi_lambda_min = linalg::min_eigenvalue(&block(&g, &c))?;
    let ginv_c = g
        .clone()
        .cholesky()
        .ok_or(PopqlError::Singular("schur_equivalence_check"))?
        .solve(&c);
    let schur = c.transpose() * ginv_c - &g;
    let schur_lambda_max = linalg::max_eigenvalue(&schur)?;
    let lmi_satisfied = lmi_lambda_min >= -tol;
    let schur_satisfied = schur_lambda_max <= tol;
    Ok(SchurCheck {
        lmi_lambda_min,
        schur_lambda_max,
        lmi_satisfied,
        schur_satisfied,
        agree: lmi_satisfied == schur_satisfied,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub delta: f64,
    pub bound_factor: f64,
    /// μ-weighted squared error of the TD fixed point against `Q^π`.
    pub fixed_point_error: f64,
    /// Smallest achievable μ-weighted squared error in the feature span.
    pub best_error: f64,
    pub lambda_min: f64,
    pub certified: bool,
    /// `fixed_point_error ≤ bound_factor · best_error` (with a 1e-12 slack).
    pub holds: bool,
}

/// Evaluates the squared-error fixed-point bound for sampling distribution
/// `mu`. `w*` is the projected-Bellman fixed point.
pub fn lemma1_bound(
    map: &FeatureMap,
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    mu: &SampleDistribution,
    tol: f64,
) -> Result<Lemma1Report> {
    check_shapes(map, mdp, policy)?;
    let chain = mdp_to_mrp(mdp, policy)?;
    let nu = stationary_distribution(chain.p())?;
    let delta = delta(mu.weights(), nu.weights())?;
    let factor = bound_factor(mdp.gamma(), delta);
    let q = exact_q(mdp, policy)?;
    let w_star = lstd_fixed_point(map, mdp, policy, mu)?;
    let fixed_point_error = weighted_sq_error(&(map.phi() * &w_star.w), &q, mu.weights());
    let best = weighted_least_squares(map.phi(), &q, mu.weights())?;
    let best_error = weighted_sq_error(&(map.phi() * best), &q, mu.weights());
    let lambda_min = lambda_min(map, mdp, policy, mu.weights())?;
    Ok(Lemma1Report {
        delta,
        bound_factor: factor,
        fixed_point_error,
        best_error,
        lambda_min,
        certified: lambda_min >= -tol,
        holds: fixed_point_error <= factor * best_error + 1e-12,
    })
}

fn weighted_sq_error(approx: &DVector<f64>, target: &DVector<f64>, weights: &DVector<f64>) -> f64 {
    approx
        .iter()
        .zip(target.iter())
        .zip(weights.iter())
        .map(|((a, t), w)| w * (a - t).powi(2))
        .sum()
}

/// `argmin_w Σ d_i (φ_iᵀ w − y_i)²` via the normal equations, using the
/// pseudo-inverse when the weighted Gram matrix is rank-deficient.
pub fn weighted_least_squares(phi: &DMatrix<f64>, y: &DVector<f64>, d: &DVector<f64>) -> Result<DVector<f64>> {
    let gram = linalg::weighted_cross(phi, d, phi);
    let rhs = phi.transpose() * DVector::from_iterator(y.len(), y.iter().zip(d.iter()).map(|(v, w)| v * w));
    gram.svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| PopqlError::Numeric(e.to_string()))
}
