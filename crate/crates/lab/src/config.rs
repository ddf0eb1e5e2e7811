use crate::error::{LabError, LabResult};
use popql_core::dual::{DualConfig, DualForm};
use popql_core::policy::{Optimizer, TrainConfig};
use popql_core::td::{TdConfig, TdMode, DIVERGENCE_CEILING};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ThreeState,
    EvalSweep,
    Density,
    TrainSweep,
    Certify,
    SolveDual,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ThreeState => "three-state",
            ExperimentKind::EvalSweep => "eval-sweep",
            ExperimentKind::Density => "density",
            ExperimentKind::TrainSweep => "train-sweep",
            ExperimentKind::Certify => "certify",
            ExperimentKind::SolveDual => "solve-dual",
        }
    }

    fn default_env(self) -> EnvKind {
        match self {
            ExperimentKind::ThreeState => EnvKind::ThreeState,
            _ => EnvKind::FrozenLake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    ThreeState,
    FrozenLake,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: Option<EnvKind>,
    pub slip: bool,
    pub goal_reward: f64,
    pub gamma: f64,
    /// Data-collection route, one action per state; defaults to the bundled asset.
    pub route: Option<Vec<usize>>,
    /// Off-diagonal entry of the three-state basis.
    pub three_state_eps: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: None,
            slip: false,
            goal_reward: 1.0,
            gamma: 0.95,
            route: None,
            three_state_eps: popql_core::models::THREE_STATE_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdSettings {
    pub lr: f64,
    pub steps: usize,
    pub record_every: usize,
    /// Budget of the long POP-QL run in the three-state sweep.
    pub converge_steps: usize,
    pub converge_tol: f64,
}

impl Default for TdSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 100_000,
            record_every: 1000,
            converge_steps: 20_000_000,
            converge_tol: 1e-9,
        }
    }
}

impl TdSettings {
    pub fn budget(&self) -> TdConfig {
        TdConfig {
            steps: self.steps,
            lr: self.lr,
            ceiling: DIVERGENCE_CEILING,
            record_every: self.record_every,
            mode: TdMode::Exact,
            converge_tol: None,
        }
    }

    pub fn long_run(&self) -> TdConfig {
        TdConfig {
            steps: self.converge_steps,
            record_every: (self.converge_steps / 100).max(1),
            converge_tol: Some(self.converge_tol),
            ..self.budget()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualSettings {
    pub rank: usize,
    pub lr: f64,
    pub iterations: usize,
    pub tol: f64,
    pub init_scale: f64,
    pub form: DualForm,
}

impl Default for DualSettings {
    fn default() -> Self {
        let d = DualConfig::default();
        Self {
            rank: d.rank,
            lr: d.lr,
            iterations: 20_000,
            tol: d.tol,
            init_scale: d.init_scale,
            form: d.form,
        }
    }
}

impl DualSettings {
    pub fn config(&self, seed: u64) -> DualConfig {
        DualConfig {
            rank: self.rank,
            lr: self.lr,
            iterations: self.iterations,
            tol: self.tol,
            seed,
            init_scale: self.init_scale,
            form: self.form,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub beta: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub lr_ab: f64,
    pub lr_g: f64,
    pub lr_alpha: f64,
    pub alpha: f64,
    pub target_entropy: Option<f64>,
    pub log_every: usize,
    pub batch: Option<usize>,
    pub rank: usize,
    pub optimizer: Optimizer,
    pub write_logs: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 60_000,
            beta: t.beta,
            lr_q: t.lr_q,
            lr_pi: t.lr_pi,
            lr_ab: t.lr_ab,
            lr_g: t.lr_g,
            lr_alpha: t.lr_alpha,
            alpha: t.alpha,
            target_entropy: t.target_entropy,
            log_every: 2000,
            batch: t.batch,
            rank: t.rank,
            optimizer: t.optimizer,
            write_logs: true,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            beta: self.beta,
            lr_q: self.lr_q,
            lr_pi: self.lr_pi,
            lr_ab: self.lr_ab,
            lr_g: self.lr_g,
            lr_alpha: self.lr_alpha,
            alpha: self.alpha,
            target_entropy: self.target_entropy,
            steps: self.steps,
            batch: self.batch,
            seed,
            rank: self.rank,
            log_every: self.log_every,
            optimizer: self.optimizer,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Option<ExperimentKind>,
    /// p values (three-state) or mixture fractions η (Frozen Lake).
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub master_seed: u64,
    /// Dithering rate applied to both the data and the evaluation policy.
    pub eps: f64,
    pub feature_seed: u64,
    pub k: usize,
    pub cert_tol: f64,
    pub out: Option<PathBuf>,
    pub env: EnvConfig,
    pub td: TdSettings,
    pub dual: DualSettings,
    pub train: TrainSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            grid: Vec::new(),
            seeds: Vec::new(),
            master_seed: 0,
            eps: 0.2,
            feature_seed: 0,
            k: 63,
            cert_tol: popql_core::cert::DEFAULT_TOL,
            out: None,
            env: EnvConfig::default(),
            td: TdSettings::default(),
            dual: DualSettings::default(),
            train: TrainSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> LabResult<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| LabError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    /// Default config for `kind` with every optional field filled in.
    pub fn for_kind(kind: ExperimentKind) -> Self {
        Self {
            experiment: Some(kind),
            ..Self::default()
        }
        .resolved(kind)
    }

    /// Fills kind-dependent defaults and validates.
    pub fn resolved(mut self, kind: ExperimentKind) -> Self {
        self.experiment = Some(kind);
        if self.env.kind.is_none() {
            self.env.kind = Some(kind.default_env());
        }
        if self.grid.is_empty() {
            self.grid = match (kind, self.env_kind()) {
                (ExperimentKind::ThreeState, _) => (1..20).map(|i| i as f64 * 0.05).collect(),
                (ExperimentKind::EvalSweep | ExperimentKind::TrainSweep, _) => vec![0.0, 0.25, 0.5, 0.75, 1.0],
                (_, EnvKind::ThreeState) => vec![0.8],
                _ => vec![0.0],
            };
        }
        if self.seeds.is_empty() {
            self.seeds = match kind {
                ExperimentKind::EvalSweep | ExperimentKind::TrainSweep => (0..5).collect(),
                _ => vec![0],
            };
        }
        if self.env.route.is_none() && self.env_kind() == EnvKind::FrozenLake {
            self.env.route = Some(crate::datasets::default_route());
        }
        self
    }

    pub fn kind(&self) -> ExperimentKind {
        self.experiment.unwrap_or(ExperimentKind::ThreeState)
    }

    pub fn env_kind(&self) -> EnvKind {
        self.env.kind.unwrap_or_else(|| self.kind().default_env())
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |msg: String| Err(LabError::Config(msg));
        if let Some(v) = self.grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("grid value {v} is outside [0, 1]"));
        }
        if self.grid.is_empty() {
            return bad("grid is empty".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(0.0..=1.0).contains(&self.eps) {
            return bad(format!("eps {} is outside [0, 1]", self.eps));
        }
        if self.k == 0 {
            return bad("feature dimension k must be positive".into());
        }
        if !(self.cert_tol >= 0.0) {
            return bad(format!("cert_tol {} must be nonnegative", self.cert_tol));
        }
        if !(self.env.gamma > 0.0 && self.env.gamma < 1.0) {
            return bad(format!("gamma {} must lie in (0, 1)", self.env.gamma));
        }
        if !(self.td.lr > 0.0) || self.td.record_every == 0 {
            return bad("td.lr must be positive and td.record_every at least 1".into());
        }
        if self.dual.rank == 0 || !(self.dual.lr > 0.0) {
            return bad("dual.rank must be at least 1 and dual.lr positive".into());
        }
        if self.train.log_every == 0 {
            return bad("train.log_every must be at least 1".into());
        }
        self.train
            .config(0)
            .validate()
            .map_err(|e| LabError::Config(e.to_string()))?;
        if let Some(route) = &self.env.route {
            if route.iter().any(|&a| a >= 4) {
                return bad("route actions must be in 0..4".into());
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the resolved config without the output directory.
    pub fn content_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Seed for one sweep cell, derived from the master seed and the cell index.
pub fn cell_seed(master: u64, cell: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master.wrapping_add(cell.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_resolves_to_defaults() {
        let c = ExperimentConfig::from_toml("")
            .unwrap()
            .resolved(ExperimentKind::EvalSweep);
        assert_eq!(c.grid, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.env_kind(), EnvKind::FrozenLake);
        assert_eq!(c.env.route.as_ref().unwrap().len(), 16);
        c.validate().unwrap();
    }

    #[test]
    fn three_state_defaults() {
        let c = ExperimentConfig::for_kind(ExperimentKind::ThreeState);
        assert_eq!(c.env_kind(), EnvKind::ThreeState);
        assert_eq!(c.grid.len(), 19);
        assert!(c.env.route.is_none());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "grid = [1.5]",
            "eps = -0.1",
            "seeds = []\ngrid = []",
            "unknown = 3",
            "k = 0",
        ] {
            let parsed = ExperimentConfig::from_toml(text);
            let resolved = parsed.map(|c| {
                let mut c = c.resolved(ExperimentKind::Certify);
                if text.starts_with("seeds") {
                    c.seeds.clear();
                }
                c
            });
            assert!(resolved.and_then(|c| c.validate()).is_err(), "{text}");
        }
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::for_kind(ExperimentKind::Density);
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.content_hash(), b.content_hash());
        b.eps = 0.3;
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let a = ExperimentConfig::for_kind(ExperimentKind::TrainSweep);
        let b = ExperimentConfig::from_toml(&a.to_toml()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cell_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..100).map(|i| cell_seed(7, i)).collect();
        assert_eq!(seeds.len(), 100);
        assert_eq!(cell_seed(7, 3), cell_seed(7, 3));
    }
}
