use super::{opt, trace_lines, Artifact, Outcome, TRACE_HEADER};
use crate::chart::{LineChart, Series};
use crate::config::{cell_seed, ExperimentConfig};
use crate::datasets::{instance, LakeSetup};
use crate::error::LabResult;
use crate::table::{bool_value, ResultTable, Row};
use nalgebra::DVector;
use popql_core::cert::certify;
use popql_core::dual::solve_dual;
use popql_core::td::{lstd_weighted, run_td, TdProblem};
use rayon::prelude::*;
use serde_json::json;

pub const COLUMNS: [&str; 9] = [
    "lambda_min",
    "shaded",
    "error",
    "diverged",
    "diverged_at",
    "w_norm",
    "lstd_error",
    "kl",
    "lambda_min_q",
];

struct Cell {
    rows: Vec<Row>,
    traces: String,
}

fn run_cell(config: &ExperimentConfig, index: u64, eta: f64, seed: u64) -> LabResult<Cell> {
    let inst = instance(config, eta, seed)?;
    let (map, mdp, pi, mu) = (&inst.map, &inst.mdp, &inst.policy, &inst.mu);
    let cert = certify(map, mdp, pi, mu, config.cert_tol)?;
    let problem = TdProblem::new(map, mdp, pi, mu)?;
    let budget = config.td.budget();
    let vanilla = run_td(&problem, &DVector::from_element(mdp.pairs(), 1.0), "vanilla", &budget)?;
    let sol = solve_dual(
        map,
        mdp,
        pi,
        mu,
        &config.dual.config(cell_seed(config.master_seed, index)),
    )?;
    let popql = run_td(&problem, &sol.reweighting.u, "popql", &budget)?;
    let lstd_mu = lstd_weighted(map, mdp, pi, mu.weights())
        .map(|w| problem.error(&w.w))
        .ok();
    let lstd_q = lstd_weighted(map, mdp, pi, sol.reweighting.q.weights())
        .map(|w| problem.error(&w.w))
        .ok();
    let row = |method: &str, trace: &popql_core::td::TdTrace, lstd: Option<f64>, kl: f64, lq: f64| Row {
        grid: eta,
        seed,
        method: method.into(),
        values: vec![
            Some(cert.lambda_min),
            bool_value(cert.satisfied),
            Some(trace.final_error()),
            bool_value(trace.diverged),
            opt(trace.diverged_at),
            trace.final_record().map(|r| r.w_norm),
            lstd,
            Some(kl),
            Some(lq),
        ],
    };
    let mut traces = String::new();
    trace_lines(&mut traces, eta, seed, "vanilla", &vanilla);
    trace_lines(&mut traces, eta, seed, "popql", &popql);
    Ok(Cell {
        rows: vec![
            row("vanilla", &vanilla, lstd_mu, 0.0, cert.lambda_min),
            row("popql", &popql, lstd_q, sol.reweighting.kl, sol.lambda_min),
        ],
        traces,
    })
}

/// Adjacent decreases of the seed-mean `λ_min` along the η grid.
pub fn lambda_inversions(table: &ResultTable) -> usize {
    let means: Vec<f64> = table
        .grid_values()
        .iter()
        .map(|&x| {
            let v = table.values(x, "vanilla", "lambda_min");
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    means.windows(2).filter(|w| w[1] < w[0]).count()
}

pub fn run(config: &ExperimentConfig) -> LabResult<Outcome> {
    let lake = LakeSetup::from_config(config)?;
    let hash = config.content_hash();
    let cells: Vec<Cell> = super::cells(config)
        .into_par_iter()
        .map(|(i, eta, seed)| run_cell(config, i, eta, seed))
        .collect::<LabResult<_>>()?;
    let mut table = ResultTable::new("eval-sweep", "eta", &COLUMNS, &hash);
    let mut traces = format!("eta,seed,method,{TRACE_HEADER}\n");
    for cell in cells {
        for row in cell.rows {
            table.push(row)?;
        }
        traces.push_str(&cell.traces);
    }
    let errors = table.aggregate("error");
    let lambdas = table.aggregate("lambda_min");
    let mean_curve = |aggs: &[crate::table::Aggregate], method: &str, label: &str| Series {
        label: label.to_string(),
        points: aggs
            .iter()
            .filter(|a| a.method == method)
            .map(|a| (a.grid, a.mean))
            .collect(),
    };
    let shaded: Vec<(f64, f64)> = lambdas
        .iter()
        .filter(|a| a.method == "vanilla" && a.mean >= -config.cert_tol)
        .map(|a| (a.grid - 0.05, a.grid + 0.05))
        .collect();
    let chart = LineChart {
        title: "Frozen Lake evaluation error",
        x_label: "eta (0 = data policy, 1 = evaluation policy)",
        y_label: "weighted RMSE",
        log_y: true,
        series: vec![
            mean_curve(&errors, "vanilla", "vanilla"),
            mean_curve(&errors, "popql", "POP-QL"),
        ],
        shaded,
    };
    let per_eta: Vec<serde_json::Value> = table
        .grid_values()
        .iter()
        .map(|&eta| {
            let count = |m: &str| table.values(eta, m, "diverged").iter().filter(|&&d| d == 1.0).count();
            let mean = |m: &str, c: &str| {
                let v = table.values(eta, m, c);
                v.iter().sum::<f64>() / v.len() as f64
            };
            json!({
                "eta": eta,
                "vanilla_diverged": count("vanilla"),
                "popql_diverged": count("popql"),
                "vanilla_error_mean": mean("vanilla", "error"),
                "popql_error_mean": mean("popql", "error"),
                "lambda_min_mean": mean("vanilla", "lambda_min"),
            })
        })
        .collect();
    let inversions = lambda_inversions(&table);
    let summary = json!({
        "per_eta": per_eta,
        "lambda_min_inversions": inversions,
        "shading_threshold": -config.cert_tol,
        "data_return": lake.normalizer.evaluate(&lake.data_policy)?,
        "eval_return": lake.normalizer.evaluate(&lake.eval_policy)?,
    });
    let headline = format!(
        "eval-sweep: {} cells, vanilla diverged in {} cells, POP-QL in {}",
        table.rows.len() / 2,
        table
            .rows
            .iter()
            .filter(|r| r.method == "vanilla" && r.values[3] == Some(1.0))
            .count(),
        table
            .rows
            .iter()
            .filter(|r| r.method == "popql" && r.values[3] == Some(1.0))
            .count(),
    );
    Ok(Outcome {
        table,
        summary,
        artifacts: vec![
            Artifact::data("traces.csv", traces),
            Artifact::chart("error_vs_eta.svg", chart.render()),
        ],
        headline,
    })
}
