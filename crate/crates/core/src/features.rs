//! Linear feature maps over states or state-action pairs.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PopqlError, Result};

const UNIT_TOL: f64 = 1e-10;

/// Feature matrix with one row per flat index `s * actions + a`.
///
/// Random maps have unit-norm rows. The three-state basis is the exception and
/// carries `normalized = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    actions: usize,
    seed: Option<u64>,
    eps_basis: Option<f64>,
    normalized: bool,
}

impl FeatureMap {
    /// Wraps an explicit matrix; `normalized` is detected from the rows.
    pub fn from_matrix(phi: DMatrix<f64>, actions: usize) -> Result<Self> {
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(PopqlError::InvalidConfig(
                "feature matrix must be non-empty with k >= 1".into(),
            ));
        }
        if actions == 0 || !phi.nrows().is_multiple_of(actions) {
            return Err(PopqlError::InvalidConfig(format!(
                "{} feature rows do not split into {actions} actions per state",
                phi.nrows()
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(PopqlError::InvalidConfig("non-finite feature entry".into()));
        }
        let normalized = phi.row_iter().all(|r| (r.norm() - 1.0).abs() <= UNIT_TOL);
        Ok(Self {
            phi,
            actions,
            seed: None,
            eps_basis: None,
            normalized,
        })
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    pub fn rows(&self) -> usize {
        self.phi.nrows()
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn eps_basis(&self) -> Option<f64> {
        self.eps_basis
    }

    /// Whether every row has unit Euclidean norm.
    pub fn normalized(&self) -> bool {
        self.normalized
    }

    /// Copy with the rows regrouped into `actions` per state.
    pub fn with_actions(&self, actions: usize) -> Result<Self> {
        let mut out = Self::from_matrix(self.phi.clone(), actions)?;
        out.seed = self.seed;
        out.eps_basis = self.eps_basis;
        Ok(out)
    }

    /// `φ(s, a)`
    pub fn features(&self, s: usize, a: usize) -> Result<RowDVector<f64>> {
        if a >= self.actions {
            return Err(PopqlError::IndexOutOfRange {
                index: a,
                len: self.actions,
            });
        }
        let n = self.rows() / self.actions;
        if s >= n {
            return Err(PopqlError::IndexOutOfRange { index: s, len: n });
        }
        Ok(self.phi.row(s * self.actions + a).into_owned())
    }

    /// `Φ w`
    pub fn values(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.phi * w
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = FeatureDocument {
            seed: self.seed,
            k: self.k(),
            actions: self.actions,
            eps_basis: self.eps_basis,
            rows: self.phi.row_iter().map(|r| r.iter().copied().collect()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FeatureDocument = serde_json::from_str(text)?;
        if doc.rows.iter().any(|r| r.len() != doc.k) {
            return Err(PopqlError::InvalidConfig(format!(
                "every feature row must have {} entries",
                doc.k
            )));
        }
        let flat: Vec<f64> = doc.rows.iter().flatten().copied().collect();
        let phi = DMatrix::from_row_slice(doc.rows.len(), doc.k, &flat);
        let mut map = Self::from_matrix(phi, doc.actions)?;
        map.seed = doc.seed;
        map.eps_basis = doc.eps_basis;
        Ok(map)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureDocument {
    seed: Option<u64>,
    k: usize,
    #[serde(default = "one")]
    actions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps_basis: Option<f64>,
    rows: Vec<Vec<f64>>,
}

fn one() -> usize {
    1
}

/// `count` rows drawn entrywise from `U[0, 1]` and scaled to unit norm.
pub fn random_unit_features(seed: u64, count: usize, k: usize) -> Result<FeatureMap> {
    if k == 0 {
        return Err(PopqlError::InvalidConfig("feature dimension must be at least 1".into()));
    }
    if count == 0 {
        return Err(PopqlError::InvalidConfig("feature count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = DMatrix::zeros(count, k);
    for i in 0..count {
        loop {
            for j in 0..k {
                phi[(i, j)] = rng.gen::<f64>();
            }
            let norm = phi.row(i).norm();
            if norm > 0.0 {
                phi.row_mut(i).unscale_mut(norm);
                break;
            }
        }
    }
    Ok(FeatureMap {
        phi,
        actions: 1,
        seed: Some(seed),
        eps_basis: None,
        normalized: true,
    })
}

/// Random unit features for an MDP with `n` states and `m` actions.
pub fn random_unit_features_mdp(seed: u64, n: usize, m: usize, k: usize) -> Result<FeatureMap> {
    random_unit_features(seed, n * m, k)?.with_actions(m)
}

/// The 3×2 basis `[[1, 0], [0, -1], [c, -c]]` with `c = (1.05 + eps) / 2`,
/// left unnormalized.
pub fn three_state_basis(eps: f64) -> Result<FeatureMap> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(PopqlError::InvalidConfig(format!(
            "basis error term {eps} must be finite and nonnegative"
        )));
    }
    let c = (1.05 + eps) / 2.0;
    let phi = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, -1.0, c, -c]);
    Ok(FeatureMap {
        phi,
        actions: 1,
        seed: None,
        eps_basis: Some(eps),
        normalized: false,
    })
}
