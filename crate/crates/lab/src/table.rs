use crate::error::{LabError, LabResult};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// One sweep cell for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub grid: f64,
    pub seed: u64,
    pub method: String,
    /// Aligned with [`ResultTable::columns`]; `None` is written as an empty field.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub experiment: String,
    /// Header of the grid column, `p` or `eta`.
    pub grid_name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    pub config_hash: String,
}

/// Mean and standard error of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub grid: f64,
    pub method: String,
    pub column: String,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

pub fn bool_value(b: bool) -> Option<f64> {
    Some(if b { 1.0 } else { 0.0 })
}

impl ResultTable {
    pub fn new(experiment: &str, grid_name: &str, columns: &[&str], config_hash: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            grid_name: grid_name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            config_hash: config_hash.to_string(),
        }
    }

    /// Appends a row; rejects a duplicate `(grid, seed, method)` key.
    pub fn push(&mut self, row: Row) -> LabResult<()> {
        if row.values.len() != self.columns.len() {
            return Err(LabError::Config(format!(
                "row has {} values for {} columns",
                row.values.len(),
                self.columns.len()
            )));
        }
        if self.find(row.grid, row.seed, &row.method).is_some() {
            return Err(LabError::Config(format!(
                "duplicate row for {}={}, seed {}, method {}",
                self.grid_name, row.grid, row.seed, row.method
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    pub fn find(&self, grid: f64, seed: u64, method: &str) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.grid == grid && r.seed == seed && r.method == method)
    }

    pub fn get(&self, grid: f64, seed: u64, method: &str, column: &str) -> Option<f64> {
        let i = self.column_index(column)?;
        self.find(grid, seed, method)?.values[i]
    }

    /// Values of `column` for `method` at `grid`, in seed order.
    pub fn values(&self, grid: f64, method: &str, column: &str) -> Vec<f64> {
        let Some(i) = self.column_index(column) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.grid == grid && r.method == method)
            .filter_map(|r| r.values[i])
            .collect()
    }

    /// Distinct grid values in first-seen order.
    pub fn grid_values(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.grid) {
                out.push(r.grid);
            }
        }
        out
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    pub fn aggregate(&self, column: &str) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for grid in self.grid_values() {
            for method in self.methods() {
                let v = self.values(grid, &method, column);
                if v.is_empty() {
                    continue;
                }
                let (mean, stderr) = mean_stderr(&v);
                out.push(Aggregate {
                    grid,
                    method: method.clone(),
                    column: column.to_string(),
                    mean,
                    stderr,
                    count: v.len(),
                });
            }
        }
        out
    }

    pub fn to_csv(&self) -> LabResult<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.grid_name.clone(), "seed".into(), "method".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![format!("{:?}", r.grid), r.seed.to_string(), r.method.clone()];
            rec.extend(r.values.iter().map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Rows as JSON objects keyed by column name.
    pub fn to_json(&self) -> LabResult<String> {
        let rows: Vec<BTreeMap<String, serde_json::Value>> = self
            .rows
            .iter()
            .map(|r| {
                let mut m = BTreeMap::new();
                m.insert(self.grid_name.clone(), serde_json::json!(r.grid));
                m.insert("seed".into(), serde_json::json!(r.seed));
                m.insert("method".into(), serde_json::json!(r.method));
                for (c, v) in self.columns.iter().zip(&r.values) {
                    m.insert(
                        c.clone(),
                        v.map(|x| serde_json::json!(x)).unwrap_or(serde_json::Value::Null),
                    );
                }
                m
            })
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "rows": rows,
        }))?)
    }

    pub fn from_csv(path: &Path, experiment: &str, config_hash: &str) -> LabResult<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
        if header.len() < 3 {
            return Err(LabError::Config(format!("{} has no metric columns", path.display())));
        }
        let cols: Vec<&str> = header[3..].iter().map(|s| s.as_str()).collect();
        let mut table = Self::new(experiment, &header[0], &cols, config_hash);
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| LabError::Config(format!("bad number {s:?}: {e}")))
            };
            let values = rec
                .iter()
                .skip(3)
                .map(|s| if s.is_empty() { Ok(None) } else { parse(s).map(Some) });
            table.push(Row {
                grid: parse(&rec[0])?,
                seed: rec[1].parse().map_err(|e| LabError::Config(format!("bad seed: {e}")))?,
                method: rec[2].to_string(),
                values: values.collect::<LabResult<_>>()?,
            })?;
        }
        Ok(table)
    }
}

/// Sample mean and standard error (`s/√n`, zero for a single value).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
