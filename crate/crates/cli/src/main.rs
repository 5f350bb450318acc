use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coifnet::dataset::load_csv;
use coifnet::experiment::{
    run_eval, run_report, run_sweep, run_train, CurveSelection, EvalInputs, EvalMetrics, RunConfig,
};
use coifnet::masking::{MaskSpec, Pattern};
use coifnet::synth::{generate, SynthConfig};
use coifnet::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "coifnet",
    version,
    about = "Forecasting multivariate time series with missing values"
)]
struct Cli {
    /// Run config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location: the run directory for train and sweep-lambda, the
    /// metrics or curve directory for eval and report, and a file (when it
    /// has an extension) or directory for synth and mask.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic hourly series as CSV.
    Synth(SynthArgs),
    /// Generate a missingness mask for a CSV dataset.
    Mask(MaskArgs),
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Emit forecast-curve CSVs from a finished run.
    Report(ReportArgs),
    /// Train once per λ and tabulate test metrics.
    SweepLambda(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of rows.
    #[arg(long, default_value_t = 2000)]
    t: usize,
    /// Number of variates.
    #[arg(long, default_value_t = 7)]
    d: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Standard deviation of the level random walk.
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    #[arg(long, default_value = "2016-07-01 00:00:00")]
    start: String,
    /// Output CSV; overrides `--out`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// Dataset whose shape the mask covers.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "date")]
    time_column: String,
    #[arg(long, default_value = "point")]
    pattern: Pattern,
    #[arg(long)]
    rate: f64,
    /// Maximum block length in time steps.
    #[arg(long = "lt", default_value_t = 10)]
    l_t: usize,
    /// Maximum block width in variates.
    #[arg(long = "lc", default_value_t = 5)]
    l_c: usize,
    /// Output mask file; overrides `--out`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Component ablation to apply (repeatable).
    #[arg(long)]
    ablation: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score instead of the one the run was trained on.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Mask file to apply instead of the run's mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Complete dataset for test targets and imputation scoring.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of a finished train run.
    #[arg(long)]
    run: PathBuf,
    /// Test window indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    windows: Vec<usize>,
    /// Variate indices; all when omitted.
    #[arg(long, value_delimiter = ',')]
    variates: Vec<usize>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.2,0.4,0.6,0.8,1.0")]
    lambdas: Vec<f64>,
}

/// `--output` if given; otherwise `--out` when it names a file (has an
/// extension), or `default_name` inside the `--out` directory.
fn output_file(cli: &Cli, output: &Option<PathBuf>, default_name: &str) -> PathBuf {
    if let Some(p) = output {
        return p.clone();
    }
    match &cli.out {
        Some(p) if p.extension().is_some() => p.clone(),
        Some(dir) => dir.join(default_name),
        None => PathBuf::from(default_name),
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn print_json(value: &EvalMetrics) -> Result<String> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    print!("{text}");
    Ok(text)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => {
            let ds = generate(&SynthConfig {
                rows: a.t,
                width: a.d,
                seed: cli.seed.unwrap_or(1),
                noise: a.noise,
                drift: a.drift,
                start: a.start.clone(),
            })?;
            let path = output_file(&cli, &a.output, "synth.csv");
            ensure_parent(&path)?;
            ds.write_csv(&path)?;
            println!(
                "wrote {} rows x {} variates to {}",
                ds.len(),
                ds.width(),
                path.display()
            );
        }
        Command::Mask(a) => {
            let input = a
                .input
                .as_ref()
                .ok_or_else(|| Error::Usage("--in is required".into()))?;
            if !input.exists() {
                return Err(Error::Usage(format!("{} does not exist", input.display())));
            }
            let ds = load_csv(input, &a.time_column, &[])?;
            let spec = MaskSpec {
                pattern: a.pattern,
                rate: a.rate,
                l_t: a.l_t,
                l_c: a.l_c,
                seed: cli.seed.unwrap_or(1),
            };
            let mask = spec.generate(ds.len(), ds.width())?;
            let path = output_file(&cli, &a.output, "mask.cfmk");
            ensure_parent(&path)?;
            mask.save(&path)?;
            println!("missing fraction: {:.6}", mask.missing_fraction());
        }
        Command::Train(a) => {
            let mut cfg = run_config(&cli)?;
            for name in &a.ablation {
                cfg.model.ablations = cfg.model.ablations.with(name)?;
            }
            let report = run_train(cfg)?;
            println!(
                "best epoch {}: val MAE {:.6}, test MAE {:.6}, test MSE {:.6}",
                report.best_epoch, report.best_val_mae, report.test.mae, report.test.mse
            );
        }
        Command::Eval(a) => {
            let inputs = EvalInputs {
                data: a.data.clone(),
                mask_file: a.mask.clone(),
                reference: a.reference.clone(),
            };
            let metrics = run_eval(&a.checkpoint, &inputs)?;
            let text = print_json(&metrics)?;
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                std::fs::write(out.join("metrics.json"), text)?;
            }
        }
        Command::Report(a) => {
            let selection = CurveSelection {
                windows: a.windows.clone(),
                variates: a.variates.clone(),
            };
            let out = cli.out.clone().unwrap_or_else(|| a.run.join("curves"));
            let written = run_report(&a.run, &selection, &out)?;
            println!("wrote {} curve files to {}", written.len(), out.display());
        }
        Command::SweepLambda(a) => {
            let rows = run_sweep(run_config(&cli)?, &a.lambdas)?;
            println!("lambda,mae,mse");
            for r in rows {
                println!("{},{},{}", r.lambda, r.mae, r.mse);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
