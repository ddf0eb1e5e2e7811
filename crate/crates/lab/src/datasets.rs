use crate::config::{EnvKind, ExperimentConfig};
use crate::error::{LabError, LabResult};
use nalgebra::{DMatrix, DVector};
use popql_core::features::{random_unit_features_mdp, FeatureMap};
use popql_core::models::{
    build_frozen_lake, build_three_state_with, mdp_to_mrp, stationary_distribution, three_state_family, DiscretePolicy,
    FiniteMdp, SampleDistribution,
};
use popql_core::policy::ReturnNormalizer;
use popql_core::{PopqlError, Result};
use serde::Deserialize;

const ROUTE_ASSET: &str = include_str!("../assets/frozen_lake_route.toml");

#[derive(Deserialize)]
struct RouteAsset {
    actions: Vec<usize>,
}

/// The bundled data-collection route for the 4x4 lake.
pub fn default_route() -> Vec<usize> {
    toml::from_str::<RouteAsset>(ROUTE_ASSET)
        .expect("bundled route parses")
        .actions
}

/// `π'(a|s) = (1 − ε) π(a|s) + ε/m`
pub fn dither_policy(policy: &DiscretePolicy, eps: f64) -> Result<DiscretePolicy> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(PopqlError::InvalidConfig(format!(
            "dithering rate {eps} is outside [0, 1]"
        )));
    }
    let m = policy.m();
    let uniform = DMatrix::from_element(policy.n(), m, eps / m as f64);
    DiscretePolicy::new(policy.probs() * (1.0 - eps) + uniform)
}

/// `(1 − η) μ_data + η μ_eval`
pub fn mix_distributions(
    mu_data: &SampleDistribution,
    mu_eval: &SampleDistribution,
    eta: f64,
) -> Result<SampleDistribution> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(PopqlError::InvalidConfig(format!(
            "mixture fraction {eta} is outside [0, 1]"
        )));
    }
    if mu_data.len() != mu_eval.len() {
        return Err(PopqlError::DimensionMismatch {
            expected: mu_data.len(),
            found: mu_eval.len(),
        });
    }
    if eta == 0.0 {
        return Ok(mu_data.clone());
    }
    if eta == 1.0 {
        return Ok(mu_eval.clone());
    }
    SampleDistribution::new(mu_data.weights() * (1.0 - eta) + mu_eval.weights() * eta)
}

/// Stationary state-action occupancy of `policy`.
pub fn occupancy(mdp: &FiniteMdp, policy: &DiscretePolicy) -> Result<SampleDistribution> {
    stationary_distribution(mdp_to_mrp(mdp, policy)?.p())
}

/// Frozen Lake with its dithered evaluation (optimal) and data (route) policies.
#[derive(Debug, Clone)]
pub struct LakeSetup {
    pub mdp: FiniteMdp,
    pub normalizer: ReturnNormalizer,
    pub eval_policy: DiscretePolicy,
    pub data_policy: DiscretePolicy,
    pub mu_data: SampleDistribution,
    pub mu_eval: SampleDistribution,
}

impl LakeSetup {
    pub fn from_config(config: &ExperimentConfig) -> LabResult<Self> {
        let env = &config.env;
        let mdp = build_frozen_lake(env.slip, env.goal_reward, env.gamma)?;
        let route = env.route.clone().unwrap_or_else(default_route);
        if route.len() != mdp.n() {
            return Err(LabError::Config(format!(
                "route has {} actions, the lake has {} states",
                route.len(),
                mdp.n()
            )));
        }
        let normalizer = ReturnNormalizer::new(&mdp)?;
        let eval_policy = dither_policy(normalizer.optimal_policy(), config.eps)?;
        let data_policy = dither_policy(&DiscretePolicy::deterministic(&route, mdp.m())?, config.eps)?;
        let mu_data = occupancy(&mdp, &data_policy)?;
        let mu_eval = occupancy(&mdp, &eval_policy)?;
        Ok(Self {
            mdp,
            normalizer,
            eval_policy,
            data_policy,
            mu_data,
            mu_eval,
        })
    }

    pub fn mixture(&self, eta: f64) -> Result<SampleDistribution> {
        mix_distributions(&self.mu_data, &self.mu_eval, eta)
    }

    /// Unit-norm random features for `seed`.
    pub fn features(&self, seed: u64, k: usize) -> Result<FeatureMap> {
        random_unit_features_mdp(seed, self.mdp.n(), self.mdp.m(), k)
    }

    /// Grid shape from the map layout.
    pub fn grid_shape(&self) -> (usize, usize) {
        let rows = self.mdp.layout().map(|l| l.split('/').count()).unwrap_or(1);
        (rows, self.mdp.n() / rows)
    }
}

/// One evaluation problem: model, features, target policy and sampling distribution.
#[derive(Debug, Clone)]
pub struct Instance {
    pub mdp: FiniteMdp,
    pub map: FeatureMap,
    pub policy: DiscretePolicy,
    pub mu: SampleDistribution,
}

/// The instance described by `config` at grid value `x` (p or η) and `seed`.
pub fn instance(config: &ExperimentConfig, x: f64, seed: u64) -> LabResult<Instance> {
    match config.env_kind() {
        EnvKind::ThreeState => {
            let (mrp, map) = build_three_state_with(config.env.three_state_eps);
            let gamma_mdp = mrp.as_mdp();
            Ok(Instance {
                mdp: gamma_mdp,
                map,
                policy: DiscretePolicy::uniform(3, 1),
                mu: three_state_family(x)?,
            })
        }
        EnvKind::FrozenLake => {
            let lake = LakeSetup::from_config(config)?;
            let map = lake.features(config.feature_seed.wrapping_add(seed), config.k)?;
            let mu = lake.mixture(x)?;
            Ok(Instance {
                mdp: lake.mdp,
                map,
                policy: lake.eval_policy,
                mu,
            })
        }
    }
}

/// State marginal laid out as a `rows × cols` grid.
pub fn state_grid(weights: &DVector<f64>, m: usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let marginal = SampleDistribution::normalized(weights.clone())
        .map(|d| d.state_marginal(m))
        .unwrap_or_else(|_| DVector::zeros(rows * cols));
    DMatrix::from_fn(rows, cols, |r, c| marginal[r * cols + c])
}
