use super::{max_u_deviation, Artifact, Outcome};
use crate::config::{cell_seed, EnvKind, ExperimentConfig};
use crate::datasets::instance;
use crate::error::LabResult;
use crate::table::{bool_value, ResultTable, Row};
use popql_core::cert::{certify as certify_dist, lemma1_bound, schur_equivalence_check};
use popql_core::dual::solve_dual as solve;
use serde_json::json;

fn grid_name(config: &ExperimentConfig) -> &'static str {
    match config.env_kind() {
        EnvKind::ThreeState => "p",
        EnvKind::FrozenLake => "eta",
    }
}

/// Certificate, Schur-form check and fixed-point bound at every cell.
pub fn certify(config: &ExperimentConfig) -> LabResult<Outcome> {
    let columns = [
        "lambda_min",
        "satisfied",
        "delta",
        "bound_factor",
        "schur_lambda_max",
        "schur_agree",
        "lemma1_holds",
    ];
    let mut table = ResultTable::new("certify", grid_name(config), &columns, &config.content_hash());
    let mut reports = Vec::new();
    for (_, x, seed) in super::cells(config) {
        let inst = instance(config, x, seed)?;
        let (map, mdp, pi, mu) = (&inst.map, &inst.mdp, &inst.policy, &inst.mu);
        let report = certify_dist(map, mdp, pi, mu, config.cert_tol)?;
        let schur = schur_equivalence_check(map, mdp, pi, mu, config.cert_tol).ok();
        let lemma = lemma1_bound(map, mdp, pi, mu, config.cert_tol).ok();
        table.push(Row {
            grid: x,
            seed,
            method: "certificate".into(),
            values: vec![
                Some(report.lambda_min),
                bool_value(report.satisfied),
                report.delta,
                report.bound_factor,
                schur.map(|s| s.schur_lambda_max),
                schur.and_then(|s| bool_value(s.agree)),
                lemma.and_then(|l| bool_value(l.holds)),
            ],
        })?;
        reports.push(json!({ "grid": x, "seed": seed, "report": report, "schur": schur, "lemma1": lemma }));
    }
    let satisfied = table.rows.iter().filter(|r| r.values[1] == Some(1.0)).count();
    let headline = format!(
        "certify: {satisfied} of {} cells satisfy the certificate",
        table.rows.len()
    );
    Ok(Outcome {
        table,
        summary: json!({ "tol": config.cert_tol, "cells": reports }),
        artifacts: Vec::new(),
        headline,
    })
}

/// Dual solve at the first cell; writes the factors and the reweighting.
pub fn solve_dual(config: &ExperimentConfig) -> LabResult<Outcome> {
    let (x, seed) = (config.grid[0], config.seeds[0]);
    let inst = instance(config, x, seed)?;
    let sol = solve(
        &inst.map,
        &inst.mdp,
        &inst.policy,
        &inst.mu,
        &config.dual.config(cell_seed(config.master_seed, 0)),
    )?;
    let columns = [
        "objective",
        "kl",
        "lambda_min_q",
        "grad_norm",
        "iterations",
        "converged",
        "saturated",
        "max_u_dev",
    ];
    let mut table = ResultTable::new("solve-dual", grid_name(config), &columns, &config.content_hash());
    table.push(Row {
        grid: x,
        seed,
        method: "popql".into(),
        values: vec![
            Some(sol.objective),
            Some(sol.reweighting.kl),
            Some(sol.lambda_min),
            Some(sol.grad_norm),
            Some(sol.iterations as f64),
            bool_value(sol.converged),
            bool_value(sol.saturated),
            Some(max_u_deviation(&sol.reweighting.u)),
        ],
    })?;
    let headline = format!(
        "solve-dual: KL(q*||mu) = {:.6}, lambda_min(E_q[F]) = {:.3e}, {} iterations",
        sol.reweighting.kl, sol.lambda_min, sol.iterations
    );
    Ok(Outcome {
        summary: json!({
            "objective": sol.objective,
            "kl": sol.reweighting.kl,
            "lambda_min_q": sol.lambda_min,
            "certified": sol.lambda_min >= -config.cert_tol,
            "converged": sol.converged,
        }),
        artifacts: vec![
            Artifact::data("dual.json", sol.dual.to_json()?),
            Artifact::data("reweighting.csv", sol.reweighting.to_csv()),
        ],
        table,
        headline,
    })
}
