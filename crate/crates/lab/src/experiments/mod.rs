//! Sweep runners. Each returns its result table, a JSON summary and any
//! extra files; writing them to disk is left to the caller.

pub mod density;
pub mod eval_sweep;
pub mod single;
pub mod three_state;
pub mod train_sweep;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::LabResult;
use crate::table::ResultTable;
use popql_core::td::TdTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
    /// Rendered chart, skipped when plots are off.
    pub chart: bool,
}

impl Artifact {
    pub fn data(name: &str, contents: String) -> Self {
        Self {
            name: name.to_string(),
            contents,
            chart: false,
        }
    }

    pub fn chart(name: &str, contents: String) -> Self {
        Self {
            name: name.to_string(),
            contents,
            chart: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub table: ResultTable,
    pub summary: serde_json::Value,
    pub artifacts: Vec<Artifact>,
    pub headline: String,
}

/// Runs the experiment named in `config` (which must be resolved).
pub fn run(config: &ExperimentConfig) -> LabResult<Outcome> {
    config.validate()?;
    match config.kind() {
        ExperimentKind::ThreeState => three_state::run(config),
        ExperimentKind::EvalSweep => eval_sweep::run(config),
        ExperimentKind::Density => density::run(config),
        ExperimentKind::TrainSweep => train_sweep::run(config),
        ExperimentKind::Certify => single::certify(config),
        ExperimentKind::SolveDual => single::solve_dual(config),
    }
}

/// Cells of a grid × seeds sweep in row-major order, with their indices.
pub fn cells(config: &ExperimentConfig) -> Vec<(u64, f64, u64)> {
    let mut out = Vec::new();
    for &x in &config.grid {
        for &seed in &config.seeds {
            out.push((out.len() as u64, x, seed));
        }
    }
    out
}

/// Appends `trace` records to a long-format CSV body.
pub fn trace_lines(out: &mut String, x: f64, seed: u64, method: &str, trace: &TdTrace) {
    for r in &trace.records {
        out.push_str(&format!(
            "{x},{seed},{method},{},{},{},{}\n",
            r.step, r.error, r.w_norm, r.diverged
        ));
    }
}

pub const TRACE_HEADER: &str = "step,error,w_norm,diverged";

pub fn opt(v: Option<usize>) -> Option<f64> {
    v.map(|x| x as f64)
}

/// Max `|u − 1|` over pairs.
pub fn max_u_deviation(u: &nalgebra::DVector<f64>) -> f64 {
    u.iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max)
}
