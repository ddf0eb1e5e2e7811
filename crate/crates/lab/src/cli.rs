use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{LabError, LabResult};
use crate::experiments::{self, Outcome};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Debug, Parser)]
#[command(name = "popql", about = "Projected off-policy Q-learning experiments", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; unspecified keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (default: the config's `out`, else results/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for per-cell generators.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long, global = true, value_enum, default_value_t = Toggle::On)]
    pub plots: Toggle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Certificate, Schur check and fixed-point bound for each cell.
    Certify,
    /// Vanilla vs reweighted TD across the three-state sampling family.
    ThreeState,
    /// Frozen Lake off-policy evaluation across data mixtures.
    EvalSweep,
    /// Occupancy heat maps of μ, q* and the on-policy distribution.
    Density,
    /// Frozen Lake offline policy optimization across data mixtures.
    TrainSweep,
    /// Solve the dual at one cell and write the reweighting.
    SolveDual,
}

impl Command {
    pub fn kind(self) -> ExperimentKind {
        match self {
            Command::Certify => ExperimentKind::Certify,
            Command::ThreeState => ExperimentKind::ThreeState,
            Command::EvalSweep => ExperimentKind::EvalSweep,
            Command::Density => ExperimentKind::Density,
            Command::TrainSweep => ExperimentKind::TrainSweep,
            Command::SolveDual => ExperimentKind::SolveDual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Config from the file (if any) with command-line overrides applied.
pub fn load_config(cli: &Cli) -> LabResult<ExperimentConfig> {
    let kind = cli.command.kind();
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(named) = config.experiment {
        if named != kind {
            return Err(LabError::Config(format!(
                "config names experiment {} but the command is {}",
                named.name(),
                kind.name()
            )));
        }
    }
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    let config = config.resolved(kind);
    config.validate()?;
    Ok(config)
}

/// Writes the table, summary and artifacts under `out`.
pub fn write_outputs(
    out: &Path,
    config: &ExperimentConfig,
    outcome: &Outcome,
    format: Format,
    plots: bool,
) -> LabResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: &str, contents: &str| -> LabResult<()> {
        let path = out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    match format {
        Format::Csv => put("sweep.csv", &outcome.table.to_csv()?)?,
        Format::Json => put("sweep.json", &outcome.table.to_json()?)?,
    }
    let created = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let summary = serde_json::json!({
        "experiment": config.kind().name(),
        "config_hash": outcome.table.config_hash,
        "created_unix": created,
        "rows": outcome.table.rows.len(),
        "results": outcome.summary,
    });
    put("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    put("config.toml", &config.to_toml())?;
    for artifact in &outcome.artifacts {
        if artifact.chart && !plots {
            continue;
        }
        put(&artifact.name, &artifact.contents)?;
    }
    Ok(written)
}

pub fn execute(cli: &Cli) -> LabResult<String> {
    let config = load_config(cli)?;
    let outcome = experiments::run(&config)?;
    let out = config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(config.kind().name()));
    write_outputs(&out, &config, &outcome, cli.format, cli.plots == Toggle::On)?;
    Ok(format!("{} -> {}", outcome.headline, out.display()))
}

/// Parses `argv`, runs the experiment and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
