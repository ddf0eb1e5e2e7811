use super::{max_u_deviation, opt, trace_lines, Artifact, Outcome, TRACE_HEADER};
use crate::chart::{LineChart, Series};
use crate::config::{cell_seed, ExperimentConfig};
use crate::datasets::instance;
use crate::error::LabResult;
use crate::table::{bool_value, ResultTable, Row};
use nalgebra::DVector;
use popql_core::cert::{certify, lambda_min};
use popql_core::dual::solve_dual;
use popql_core::models::{mdp_to_mrp, stationary_distribution};
use popql_core::td::{lstd_fixed_point, lstd_weighted, run_td, TdProblem};
use rayon::prelude::*;
use serde_json::json;

pub const COLUMNS: [&str; 14] = [
    "lambda_min",
    "satisfied",
    "error",
    "budget_error",
    "diverged",
    "diverged_at",
    "converged",
    "steps_run",
    "lstd_error",
    "onpolicy_lstd_error",
    "kl",
    "max_u_dev",
    "lambda_min_q",
    "dual_iterations",
];

/// Bisection width for the certificate crossing.
pub const CROSSING_TOL: f64 = 1e-6;

/// `λ_min(E_μ[F])` on the three-state family at `p`.
pub fn family_lambda_min(config: &ExperimentConfig, p: f64) -> LabResult<f64> {
    let inst = instance(config, p, 0)?;
    Ok(lambda_min(&inst.map, &inst.mdp, &inst.policy, inst.mu.weights())?)
}

/// First sign change of `λ_min` along the sorted grid (falling back to a
/// 0.01 scan of [0, 1]), refined by bisection.
pub fn crossing_point(config: &ExperimentConfig) -> LabResult<Option<f64>> {
    let mut grid = config.grid.clone();
    grid.sort_by(|a, b| a.total_cmp(b));
    let scan: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    for candidates in [grid, scan] {
        let values: Vec<f64> = candidates
            .iter()
            .map(|&p| family_lambda_min(config, p))
            .collect::<LabResult<_>>()?;
        for i in 1..candidates.len() {
            if (values[i - 1] >= 0.0) != (values[i] >= 0.0) {
                return bisect(config, candidates[i - 1], candidates[i], values[i - 1] >= 0.0).map(Some);
            }
        }
    }
    Ok(None)
}

fn bisect(config: &ExperimentConfig, mut lo: f64, mut hi: f64, lo_nonneg: bool) -> LabResult<f64> {
    while hi - lo > CROSSING_TOL {
        let mid = 0.5 * (lo + hi);
        if (family_lambda_min(config, mid)? >= 0.0) == lo_nonneg {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

struct Cell {
    rows: Vec<Row>,
    traces: String,
}

fn run_cell(config: &ExperimentConfig, index: u64, p: f64, seed: u64) -> LabResult<Cell> {
    let inst = instance(config, p, seed)?;
    let (map, mdp, pi, mu) = (&inst.map, &inst.mdp, &inst.policy, &inst.mu);
    let cert = certify(map, mdp, pi, mu, config.cert_tol)?;
    let problem = TdProblem::new(map, mdp, pi, mu)?;
    let ones = DVector::from_element(mdp.pairs(), 1.0);
    let budget = config.td.budget();
    let vanilla = run_td(&problem, &ones, "vanilla", &budget)?;
    let sol = solve_dual(
        map,
        mdp,
        pi,
        mu,
        &config.dual.config(cell_seed(config.master_seed, index)),
    )?;
    let u = &sol.reweighting.u;
    let popql_budget = run_td(&problem, u, "popql", &budget)?;
    let popql = run_td(&problem, u, "popql", &config.td.long_run())?;
    let lstd_error = lstd_fixed_point(map, mdp, pi, mu).map(|w| problem.error(&w.w)).ok();
    let nu = stationary_distribution(mdp_to_mrp(mdp, pi)?.p())?;
    let onpolicy = lstd_weighted(map, mdp, pi, nu.weights())
        .map(|w| problem.error(&w.w))
        .ok();
    let common = |v: Vec<Option<f64>>| {
        let mut values = vec![Some(cert.lambda_min), bool_value(cert.satisfied)];
        values.extend(v);
        values.extend([lstd_error, onpolicy]);
        values
    };
    let mut van_values = common(vec![
        Some(vanilla.final_error()),
        Some(vanilla.final_error()),
        bool_value(vanilla.diverged),
        opt(vanilla.diverged_at),
        bool_value(vanilla.converged),
        Some(vanilla.steps_run as f64),
    ]);
    van_values.extend([Some(0.0), Some(0.0), Some(cert.lambda_min), None]);
    let mut pop_values = common(vec![
        Some(popql.final_error()),
        Some(popql_budget.final_error()),
        bool_value(popql.diverged),
        opt(popql.diverged_at),
        bool_value(popql.converged),
        Some(popql.steps_run as f64),
    ]);
    pop_values.extend([
        Some(sol.reweighting.kl),
        Some(max_u_deviation(u)),
        Some(sol.lambda_min),
        Some(sol.iterations as f64),
    ]);
    let mut traces = String::new();
    trace_lines(&mut traces, p, seed, "vanilla", &vanilla);
    trace_lines(&mut traces, p, seed, "popql", &popql_budget);
    Ok(Cell {
        rows: vec![
            Row {
                grid: p,
                seed,
                method: "vanilla".into(),
                values: van_values,
            },
            Row {
                grid: p,
                seed,
                method: "popql".into(),
                values: pop_values,
            },
        ],
        traces,
    })
}

pub fn run(config: &ExperimentConfig) -> LabResult<Outcome> {
    let hash = config.content_hash();
    let cells: Vec<Cell> = super::cells(config)
        .into_par_iter()
        .map(|(i, p, seed)| run_cell(config, i, p, seed))
        .collect::<LabResult<_>>()?;
    let mut table = ResultTable::new("three-state", "p", &COLUMNS, &hash);
    let mut traces = format!("p,seed,method,{TRACE_HEADER}\n");
    for cell in cells {
        for row in cell.rows {
            table.push(row)?;
        }
        traces.push_str(&cell.traces);
    }
    let p_star = crossing_point(config)?;
    let seed0 = config.seeds[0];
    let curve = |method: &str, column: &str| Series {
        label: format!("{method} {column}"),
        points: config
            .grid
            .iter()
            .filter_map(|&p| table.get(p, seed0, method, column).map(|v| (p, v)))
            .collect(),
    };
    let satisfied: Vec<(f64, f64)> = config
        .grid
        .iter()
        .filter(|&&p| table.get(p, seed0, "vanilla", "satisfied") == Some(1.0))
        .map(|&p| (p - 0.025, p + 0.025))
        .collect();
    let error_chart = LineChart {
        title: "Three-state error after the TD budget",
        x_label: "p",
        y_label: "weighted RMSE",
        log_y: true,
        series: vec![
            curve("vanilla", "budget_error"),
            curve("popql", "budget_error"),
            curve("popql", "error"),
        ],
        shaded: satisfied.clone(),
    };
    let lambda_chart = LineChart {
        title: "Certificate minimum eigenvalue",
        x_label: "p",
        y_label: "lambda_min",
        log_y: false,
        series: vec![curve("vanilla", "lambda_min"), curve("popql", "lambda_min_q")],
        shaded: satisfied,
    };
    let diverged: Vec<f64> = config
        .grid
        .iter()
        .copied()
        .filter(|&p| table.get(p, seed0, "vanilla", "diverged") == Some(1.0))
        .collect();
    let summary = json!({
        "p_star": p_star,
        "crossing_tol": CROSSING_TOL,
        "cert_tol": config.cert_tol,
        "vanilla_diverged_at_p": diverged,
        "td_steps": config.td.steps,
        "td_lr": config.td.lr,
    });
    let headline = format!(
        "three-state: {} cells, p* = {}, vanilla diverged at {} grid points",
        table.rows.len() / 2,
        p_star.map(|p| format!("{p:.4}")).unwrap_or_else(|| "none".into()),
        diverged.len()
    );
    Ok(Outcome {
        table,
        summary,
        artifacts: vec![
            Artifact::data("traces.csv", traces),
            Artifact::chart("error_vs_p.svg", error_chart.render()),
            Artifact::chart("lambda_min_vs_p.svg", lambda_chart.render()),
        ],
        headline,
    })
}
