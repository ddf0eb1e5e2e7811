use super::{Artifact, Outcome};
use crate::chart::heatmap;
use crate::config::{cell_seed, ExperimentConfig};
use crate::datasets::{instance, state_grid, LakeSetup};
use crate::error::LabResult;
use crate::table::{bool_value, ResultTable, Row};
use nalgebra::DMatrix;
use popql_core::cert::certify;
use popql_core::dual::solve_dual;
use popql_core::models::{kl_divergence, SampleDistribution};
use serde_json::json;

pub const COLUMNS: [&str; 4] = ["kl_to_mu", "lambda_min", "satisfied", "mass"];

fn grid_csv(grid: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..grid.nrows() {
        let row: Vec<String> = (0..grid.ncols()).map(|c| format!("{:?}", grid[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// State occupancy grids of the data mixture `μ`, its projection `q*` and
/// the evaluation policy's `ν`, at the first grid value and seed.
pub fn run(config: &ExperimentConfig) -> LabResult<Outcome> {
    let lake = LakeSetup::from_config(config)?;
    let (eta, seed) = (config.grid[0], config.seeds[0]);
    let inst = instance(config, eta, seed)?;
    let (map, mdp, pi, mu) = (&inst.map, &inst.mdp, &inst.policy, &inst.mu);
    let sol = solve_dual(map, mdp, pi, mu, &config.dual.config(cell_seed(config.master_seed, 0)))?;
    let q = sol.reweighting.q.clone();
    let nu = lake.mu_eval.clone();
    let (rows, cols) = lake.grid_shape();
    let m = mdp.m();
    let mut table = ResultTable::new("density", "eta", &COLUMNS, &config.content_hash());
    let mut artifacts = Vec::new();
    let mut kls = Vec::new();
    for (method, dist, title) in [
        ("offpolicy", mu, "Off-policy data distribution"),
        ("popql", &q, "POP-QL projected distribution"),
        ("onpolicy", &nu, "On-policy distribution"),
    ] {
        let grid = state_grid(dist.weights(), m, rows, cols);
        let cert = certify(map, mdp, pi, dist, config.cert_tol)?;
        let kl = kl_divergence(dist.weights(), mu.weights());
        kls.push(kl);
        table.push(Row {
            grid: eta,
            seed,
            method: method.into(),
            values: vec![
                Some(kl),
                Some(cert.lambda_min),
                bool_value(cert.satisfied),
                Some(grid.sum()),
            ],
        })?;
        artifacts.push(Artifact::data(&format!("density_{method}.csv"), grid_csv(&grid)));
        artifacts.push(Artifact::chart(&format!("density_{method}.svg"), heatmap(title, &grid)));
    }
    let u_csv = sol.reweighting.to_csv();
    artifacts.push(Artifact::data("reweighting.csv", u_csv));
    let q_dist: &SampleDistribution = &q;
    let summary = json!({
        "eta": eta,
        "seed": seed,
        "kl_q_mu": kls[1],
        "kl_nu_mu": kls[2],
        "q_lambda_min": sol.lambda_min,
        "q_satisfied": sol.lambda_min >= -config.cert_tol,
        "q_mass": q_dist.weights().sum(),
        "dual_converged": sol.converged,
    });
    let headline = format!("density: KL(q*||mu) = {:.4}, KL(nu||mu) = {:.4}", kls[1], kls[2]);
    Ok(Outcome {
        table,
        summary,
        artifacts,
        headline,
    })
}
