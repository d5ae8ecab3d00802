use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pqo::collect::CollectionPolicy;
use pqo_cli::{PipelineConfig, PipelineError, CONFIG_VERSION};

#[derive(Parser)]
#[command(name = "pqo", version, about = "Parametric query optimization pipeline over a simulated database")]
struct Cli {
    /// Worker threads for candidate generation and collection.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Log stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build the scenario; write the schema and the workload.
    Gen(ConfigArg),
    /// Generate candidate plans by row count evolution.
    Candidates(ConfigArg),
    /// Execute candidates, build the plan cover and the dataset.
    Collect(CollectArgs),
    /// Train the plan predictor from the dataset and cover.
    Train(ConfigArg),
    /// Score the model; write metrics as JSON, text and CSV.
    Evaluate(ConfigArg),
    /// All stages in order.
    Run(ConfigArg),
    /// Predict a plan (or fallback) for every instance of a workload file.
    Predict(PredictArgs),
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    workload: Option<PathBuf>,
    /// Candidate set file.
    #[arg(long)]
    plans: Option<PathBuf>,
    /// Collection policy (JSON); replaces the config's `collection`.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Dataset output path; the cover and report go next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    /// Overrides the model's confidence threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

/// Command-line paths are relative to the working directory, not to the
/// config's output directory.
fn path_str(p: &Path) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).to_string_lossy().into_owned()
}

fn collect_config(a: &CollectArgs) -> Result<PipelineConfig, PipelineError> {
    let policy = match &a.policy {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", p.display())))?;
            Some(serde_json::from_str::<CollectionPolicy>(&text).map_err(|e| PipelineError::Config(e.to_string()))?)
        }
        None => None,
    };
    let mut cfg = match &a.config {
        Some(c) => PipelineConfig::load(c)?,
        None => {
            let (Some(_), Some(_), Some(_), Some(_)) = (&a.schema, &a.workload, &a.plans, &a.out) else {
                return Err(PipelineError::Config(
                    "collect needs --config, or all of --schema, --workload, --plans and --out".into(),
                ));
            };
            let seed = policy.as_ref().map_or(0, |p| p.seed);
            let json = serde_json::json!({
                "format_version": CONFIG_VERSION,
                "seed": seed,
                "scenario": {},
                "instances": 1,
                "output_dir": ".",
            });
            PipelineConfig::from_json(&json.to_string())?
        }
    };
    if let Some(p) = policy {
        cfg.collection = p;
    }
    if let Some(p) = &a.schema {
        cfg.files.schema = path_str(p);
    }
    if let Some(p) = &a.workload {
        cfg.files.workload = path_str(p);
    }
    if let Some(p) = &a.plans {
        cfg.files.candidates = path_str(p);
    }
    if let Some(out) = &a.out {
        cfg.files.dataset = path_str(out);
        let sibling = |name: &str| path_str(&out.with_file_name(name));
        cfg.files.cover = sibling("cover.json");
        cfg.files.collect_report = sibling("collect_report.json");
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(PipelineError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::Gen(a) => pqo_cli::gen(&PipelineConfig::load(a.config)?),
        Command::Candidates(a) => pqo_cli::candidates(&PipelineConfig::load(a.config)?).map(drop),
        Command::Collect(a) => pqo_cli::collect(&collect_config(&a)?).map(drop),
        Command::Train(a) => pqo_cli::train(&PipelineConfig::load(a.config)?).map(drop),
        Command::Evaluate(a) => {
            let r = pqo_cli::evaluate(&PipelineConfig::load(a.config)?)?;
            print!("{}", r.to_text());
            Ok(())
        }
        Command::Run(a) => {
            let started = Instant::now();
            let r = pqo_cli::run(&PipelineConfig::load(a.config)?)?;
            print!("{}", r.report.to_text());
            log::info!("run finished in {:.1} s", started.elapsed().as_secs_f64());
            Ok(())
        }
        Command::Predict(a) => {
            let started = Instant::now();
            let choices = pqo_cli::predict(&a.model, &a.workload, a.threshold)?;
            let elapsed = started.elapsed();
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for (i, c) in choices.iter().enumerate() {
                let line = serde_json::json!({ "instance": i, "plan": c.plan, "confidence": c.confidence });
                let _ = writeln!(out, "{line}");
            }
            log::info!(
                "predicted {} instances, {:.1} us per instance including load",
                choices.len(),
                elapsed.as_secs_f64() * 1e6 / choices.len().max(1) as f64
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
