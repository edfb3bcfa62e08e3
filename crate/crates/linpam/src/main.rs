use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use linpam::harness::{
    sweep, tune_regularization, write_metrics_csv, write_summary_json, write_sweep_csv,
    FilterKind, ModelKind, RunSummary, SpreadDef, TwinExperimentConfig,
};
use linpam::{Error, Result};
use serde::Deserialize;

/// Twin-experiment benchmarks for ensemble filters that preserve linear
/// invariants of the state.
#[derive(Parser)]
#[command(name = "linpam", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear ODE benchmark (n = 20) with a configurable number of
    /// conserved directions.
    Synthetic(RunArgs),
    /// Periodic linear advection benchmark (n = 128) conserving total
    /// mass.
    Advection(RunArgs),
    /// Chaotic Lorenz-63 benchmark embedded in R^4 with one conserved
    /// direction.
    Lorenz(RunArgs),
    /// Tune every (M, r) combination described by a JSON config and
    /// write the results table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Analysis update to run each cycle.
    #[arg(long, value_enum, default_value_t = FilterKind::UnEnkf)]
    filter: FilterKind,
    /// Ensemble size.
    #[arg(long = "M", default_value_t = 40)]
    ensemble_size: usize,
    /// Number of conserved directions (synthetic model only).
    #[arg(long)]
    r: Option<usize>,
    /// Total assimilation cycles.
    #[arg(long, default_value_t = 2000)]
    cycles: usize,
    /// Leading cycles excluded from time averages.
    #[arg(long, default_value_t = 1000)]
    spinup: usize,
    /// Base RNG seed; the flag takes precedence over the environment
    /// variable.
    #[arg(long, env = "LINPAM_SEED", default_value_t = 0)]
    seed: u64,
    /// Independent repetitions, each with a fresh model and truth draw.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Multiplicative inflation grid, either a single value or an
    /// inclusive start:stop:step range.
    #[arg(long = "beta-grid", value_parser = parse_beta_grid, default_value = "1.0")]
    beta_grid: BetaGrid,
    /// Covariance taper radius grid: comma-separated radii where `inf`
    /// means no taper, or the single word `none` to disable tapering.
    #[arg(long = "taper-grid", value_parser = parse_taper_grid, default_value = "none")]
    taper_grid: TaperGrid,
    /// Spread definition: `paper` = trace(cov)/sqrt(n), `sqrt` =
    /// sqrt(trace(cov)/n).
    #[arg(long = "spread-def", value_enum, default_value_t = SpreadDef::Paper)]
    spread_def: SpreadDef,
    /// Directory receiving metrics.csv and summary.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON file with fields `config` (a run configuration), `m_list`,
    /// and `r_list`.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving sweep.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone)]
struct BetaGrid(Vec<f64>);

#[derive(Clone)]
struct TaperGrid(Vec<Option<f64>>);

fn parse_beta_grid(text: &str) -> std::result::Result<BetaGrid, String> {
    let text = text.trim();
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected start:stop:step, got `{text}`"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("invalid number `{s}` in `{text}`: {e}"))
        };
        let (start, stop, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
        if !(step > 0.0 && step.is_finite()) {
            return Err(format!("step must be positive, got {step}"));
        }
        if stop < start {
            return Err(format!("stop {stop} is below start {start}"));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        let values = (0..=count).map(|i| start + i as f64 * step).collect();
        Ok(BetaGrid(values))
    } else {
        let value = text
            .parse::<f64>()
            .map_err(|e| format!("invalid inflation value `{text}`: {e}"))?;
        Ok(BetaGrid(vec![value]))
    }
}

fn parse_taper_grid(text: &str) -> std::result::Result<TaperGrid, String> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("none") {
        return Ok(TaperGrid(vec![None]));
    }
    let mut radii = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        if token.eq_ignore_ascii_case("inf") || token.eq_ignore_ascii_case("none") {
            radii.push(None);
        } else {
            let radius = token
                .parse::<f64>()
                .map_err(|e| format!("invalid taper radius `{token}`: {e}"))?;
            radii.push(Some(radius));
        }
    }
    if radii.is_empty() {
        return Err("taper grid must not be empty".to_string());
    }
    Ok(TaperGrid(radii))
}

/// JSON layout of the sweep configuration file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    config: TwinExperimentConfig,
    #[serde(default)]
    m_list: Vec<usize>,
    #[serde(default)]
    r_list: Vec<usize>,
}

fn run_model(model: ModelKind, args: RunArgs) -> Result<()> {
    let mut config = TwinExperimentConfig::new(model, args.filter, args.ensemble_size);
    config.r = args.r;
    config.cycles = args.cycles;
    config.spinup = args.spinup;
    config.seed = args.seed;
    config.reps = args.reps;
    config.beta_grid = args.beta_grid.0;
    config.taper_grid = args.taper_grid.0;
    config.spread_def = args.spread_def;
    config.validate()?;

    let tuned = tune_regularization(&config)?;
    std::fs::create_dir_all(&args.out)?;
    write_metrics_csv(&args.out.join("metrics.csv"), &tuned.results[0])?;
    let summary = RunSummary::from_tuned(&config, &tuned);
    write_summary_json(&args.out.join("summary.json"), &summary)?;
    println!(
        "model={} filter={} M={} tuned beta={} radius={} rmse_avg={:.6e} spread_avg={:.6e}",
        config.model,
        config.filter,
        config.ensemble_size,
        tuned.beta,
        tuned.radius.map_or_else(|| "inf".to_string(), |r| r.to_string()),
        tuned.rmse_avg,
        tuned.spread_avg,
    );
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)?;
    let spec: SweepSpec = serde_json::from_str(&text)?;
    spec.config.validate()?;
    let cells = sweep(&spec.config, &spec.m_list, &spec.r_list)?;
    std::fs::create_dir_all(&args.out)?;
    write_sweep_csv(&args.out.join("sweep.csv"), &cells)?;
    println!("wrote {} tuned cells to {}", cells.len(), args.out.join("sweep.csv").display());
    Ok(())
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synthetic(args) => run_model(ModelKind::Synthetic, args),
        Command::Advection(args) => run_model(ModelKind::Advection, args),
        Command::Lorenz(args) => run_model(ModelKind::Lorenz, args),
        Command::Sweep(args) => run_sweep(args),
    }
}

fn main() {
    if let Err(e) = real_main() {
        if let Error::AllDiverged = e {
            eprintln!("error: every tuning grid point diverged");
        } else {
            eprintln!("error: {e}");
        }
        std::process::exit(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_grid_parses_ranges_and_single_values() {
        let grid = parse_beta_grid("1.0:1.1:0.05").unwrap().0;
        assert_eq!(grid.len(), 3);
        assert!((grid[0] - 1.0).abs() < 1e-12);
        assert!((grid[1] - 1.05).abs() < 1e-12);
        assert!((grid[2] - 1.1).abs() < 1e-12);
        assert_eq!(parse_beta_grid("1.02").unwrap().0, vec![1.02]);
        assert!(parse_beta_grid("1.0:0.9:0.05").is_err());
        assert!(parse_beta_grid("1.0:1.1:0").is_err());
        assert!(parse_beta_grid("1.0:1.1").is_err());
    }

    #[test]
    fn beta_grid_range_endpoint_is_inclusive() {
        let grid = parse_beta_grid("1.0:1.2:0.01").unwrap().0;
        assert_eq!(grid.len(), 21);
        assert!((grid[20] - 1.2).abs() < 1e-9);
    }

    #[test]
    fn taper_grid_parses_lists_and_none() {
        assert_eq!(parse_taper_grid("none").unwrap().0, vec![None]);
        let grid = parse_taper_grid("4,8,inf").unwrap().0;
        assert_eq!(grid, vec![Some(4.0), Some(8.0), None]);
        assert!(parse_taper_grid("4,oops").is_err());
    }
}
