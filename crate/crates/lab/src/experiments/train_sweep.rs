use super::{Artifact, Outcome};
use crate::chart::{LineChart, Series};
use crate::config::{cell_seed, ExperimentConfig};
use crate::datasets::LakeSetup;
use crate::error::LabResult;
use crate::table::{bool_value, ResultTable, Row};
use popql_core::policy::{behavior_cloning_weights, train_popql, TrainOutcome};
use rayon::prelude::*;
use serde_json::json;

pub const COLUMNS: [&str; 5] = ["return", "diverged", "kl", "lambda_min", "entropy"];

pub const METHODS: [&str; 3] = ["popql", "bc", "fitted_q"];

struct Cell {
    rows: Vec<Row>,
    logs: Vec<Artifact>,
}

fn trained_row(lake: &LakeSetup, eta: f64, seed: u64, method: &str, out: &TrainOutcome) -> LabResult<Row> {
    // a diverged critic can still leave a usable actor; only non-finite logits lose the return
    let finite = out.policy.logits.iter().all(|v| v.is_finite());
    let ret = if finite {
        Some(lake.normalizer.evaluate(&out.policy.probs())?)
    } else {
        None
    };
    let last = out.log.last();
    Ok(Row {
        grid: eta,
        seed,
        method: method.into(),
        values: vec![
            ret,
            bool_value(out.diverged),
            last.map(|r| r.kl),
            last.map(|r| r.lambda_min),
            last.map(|r| r.entropy),
        ],
    })
}

fn run_cell(config: &ExperimentConfig, lake: &LakeSetup, index: u64, eta: f64, seed: u64) -> LabResult<Cell> {
    let map = lake.features(config.feature_seed.wrapping_add(seed), config.k)?;
    let mu = lake.mixture(eta)?;
    let train_seed = cell_seed(config.master_seed, index);
    let popql = train_popql(&map, &lake.mdp, &mu, &config.train.config(train_seed))?;
    let ablation_config = popql_core::policy::TrainConfig {
        beta: 0.0,
        dual_frozen: true,
        ..config.train.config(train_seed)
    };
    let fitted = train_popql(&map, &lake.mdp, &mu, &ablation_config)?;
    let bc = behavior_cloning_weights(mu.weights(), lake.mdp.n(), lake.mdp.m())?;
    let bc_row = Row {
        grid: eta,
        seed,
        method: "bc".into(),
        values: vec![
            Some(lake.normalizer.evaluate(&bc)?),
            bool_value(false),
            None,
            None,
            None,
        ],
    };
    let mut logs = Vec::new();
    if config.train.write_logs {
        for (method, out) in [("popql", &popql), ("fitted_q", &fitted)] {
            logs.push(Artifact::data(
                &format!("logs/eta{eta}_seed{seed}_{method}.csv"),
                out.log_csv(),
            ));
        }
    }
    Ok(Cell {
        rows: vec![
            trained_row(lake, eta, seed, "popql", &popql)?,
            bc_row,
            trained_row(lake, eta, seed, "fitted_q", &fitted)?,
        ],
        logs,
    })
}

pub fn run(config: &ExperimentConfig) -> LabResult<Outcome> {
    let lake = LakeSetup::from_config(config)?;
    let hash = config.content_hash();
    let cells: Vec<Cell> = super::cells(config)
        .into_par_iter()
        .map(|(i, eta, seed)| run_cell(config, &lake, i, eta, seed))
        .collect::<LabResult<_>>()?;
    let mut table = ResultTable::new("train-sweep", "eta", &COLUMNS, &hash);
    let mut artifacts = Vec::new();
    for cell in cells {
        for row in cell.rows {
            table.push(row)?;
        }
        artifacts.extend(cell.logs);
    }
    let returns = table.aggregate("return");
    let per_eta: Vec<serde_json::Value> = table
        .grid_values()
        .iter()
        .map(|&eta| {
            let mut entry = serde_json::Map::new();
            entry.insert("eta".into(), json!(eta));
            for method in METHODS {
                if let Some(a) = returns.iter().find(|a| a.grid == eta && a.method == method) {
                    entry.insert(format!("{method}_mean"), json!(a.mean));
                    entry.insert(format!("{method}_stderr"), json!(a.stderr));
                }
                let div = table
                    .values(eta, method, "diverged")
                    .iter()
                    .filter(|&&d| d == 1.0)
                    .count();
                entry.insert(format!("{method}_diverged"), json!(div));
            }
            serde_json::Value::Object(entry)
        })
        .collect();
    let curve = |method: &str, label: &str| Series {
        label: label.into(),
        points: returns
            .iter()
            .filter(|a| a.method == method)
            .map(|a| (a.grid, a.mean))
            .collect(),
    };
    let chart = LineChart {
        title: "Frozen Lake offline policy optimization",
        x_label: "eta (0 = data policy, 1 = evaluation policy)",
        y_label: "normalized return",
        log_y: false,
        series: vec![
            curve("popql", "POP-QL"),
            curve("bc", "behavior cloning"),
            curve("fitted_q", "beta = 0, dual frozen"),
        ],
        shaded: Vec::new(),
    };
    artifacts.push(Artifact::chart("return_vs_eta.svg", chart.render()));
    let popql_diverged = table
        .rows
        .iter()
        .filter(|r| r.method == "popql" && r.values[1] == Some(1.0))
        .count();
    let summary = json!({
        "per_eta": per_eta,
        "popql_diverged": popql_diverged,
        "data_return": lake.normalizer.evaluate(&lake.data_policy)?,
        "eval_return": lake.normalizer.evaluate(&lake.eval_policy)?,
        "steps": config.train.steps,
    });
    let headline = format!(
        "train-sweep: {} cells, POP-QL diverged in {popql_diverged}",
        table.rows.len() / METHODS.len()
    );
    Ok(Outcome {
        table,
        summary,
        artifacts,
        headline,
    })
}
