use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curate_core::pipeline::tools::{difficulty_targets_file, skew_corpus};
use curate_core::pipeline::{load_config, process_env, ConfigErrors, Overrides, Pipeline, PipelineConfig, Stage, StageOutcome};
use curate_core::Error;
use tracing_subscriber::EnvFilter;

const EXIT_REJECTS: u8 = 1;
const EXIT_FATAL: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "curate", version, about = "Score, cluster and select instruction-tuning data")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG wins when set.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read and validate input corpora into corpus.jsonl.
    Ingest(ConfigArgs),
    /// Assign a category to every conversation.
    Classify(ConfigArgs),
    /// Difficulty, quality and embeddings per turn.
    Score(ConfigArgs),
    /// Fit percentile bounds and compute preference scores.
    Normalize(ConfigArgs),
    /// Select the subset with the configured strategy.
    Sample(ConfigArgs),
    /// Summarize pool and selection composition.
    Report(ConfigArgs),
    /// Every stage in order, reusing cached artifacts.
    Run(ConfigArgs),
    /// Check a config and print it with defaults filled in.
    Validate(ConfigArgs),
    /// Build a pool skewed toward two random categories.
    Skew(SkewArgs),
    /// Turn an evaluation matrix into difficulty regression targets.
    DifficultyTargets(TargetArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline config (TOML).
    #[arg(short, long, default_value = "curate.toml")]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    /// Subset size.
    #[arg(short, long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Percentile for the discard threshold, in (0, 100).
    #[arg(long)]
    gamma: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig, ConfigErrors> {
        let overrides = Overrides {
            output_dir: self.output_dir.clone(),
            workers: self.workers,
            strategy: self.strategy.clone(),
            m: self.m,
            seed: self.seed,
            gamma: self.gamma,
        };
        load_config(&self.config, &overrides, &process_env)
    }
}

#[derive(Args, Debug)]
struct SkewArgs {
    /// Canonical JSONL corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// labels.jsonl from `curate classify`; otherwise each record's category is used.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.04)]
    residue_fraction: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// JSONL of {item_id, dataset, model, metric, value}.
    #[arg(long)]
    matrix: PathBuf,
    /// JSON object of metric -> [min, max], merged over the built-in bounds.
    #[arg(long)]
    bounds: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

enum Failure {
    Config(ConfigErrors),
    Run(Error),
}

impl From<ConfigErrors> for Failure {
    fn from(e: ConfigErrors) -> Self {
        Failure::Config(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.cached { "cached" } else { "done" };
    println!("{:<10} {state}", o.stage.as_str());
    for (name, digest) in &o.outputs {
        println!("  {name} {}", &digest[..digest.len().min(12)]);
    }
}

fn stage(args: &ConfigArgs, stage: Stage) -> Result<u8, Failure> {
    let pipeline = Pipeline::new(args.load()?)?;
    let outcome = pipeline.run_stage(stage)?;
    print_outcome(&outcome);
    if stage == Stage::Ingest {
        let summary: curate_core::pipeline::IngestSummary =
            curate_core::io::read_json(&pipeline.artifact(curate_core::pipeline::INGEST))?;
        println!("accepted {} rejected {}", summary.accepted, summary.rejected);
        if summary.reject_fraction() > pipeline.config().reject_tolerance {
            eprintln!("rejected fraction {:.4} exceeds reject_tolerance", summary.reject_fraction());
            return Ok(EXIT_REJECTS);
        }
    }
    if stage == Stage::Report {
        println!("{}", pipeline.artifact(curate_core::pipeline::REPORT).display());
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Ingest(a) => stage(&a, Stage::Ingest),
        Command::Classify(a) => stage(&a, Stage::Classify),
        Command::Score(a) => stage(&a, Stage::Score),
        Command::Normalize(a) => stage(&a, Stage::Normalize),
        Command::Sample(a) => stage(&a, Stage::Sample),
        Command::Report(a) => stage(&a, Stage::Report),
        Command::Run(a) => {
            let pipeline = Pipeline::new(a.load()?)?;
            let summary = pipeline.run_all()?;
            for o in &summary.stages {
                print_outcome(o);
            }
            if summary.reject_limit_exceeded {
                eprintln!(
                    "stopped after ingest: {} of {} records rejected",
                    summary.ingest.rejected,
                    summary.ingest.accepted + summary.ingest.rejected
                );
                return Ok(EXIT_REJECTS);
            }
            Ok(0)
        }
        Command::Validate(a) => {
            let cfg = a.load()?;
            let text = serde_json::to_string_pretty(&cfg).map_err(Error::from)?;
            println!("{text}");
            println!("config_digest {}", cfg.digest()?);
            Ok(0)
        }
        Command::Skew(a) => {
            let pool = skew_corpus(&a.corpus, a.labels.as_deref(), a.seed, a.residue_fraction, &a.out)?;
            let chosen: Vec<String> = pool.chosen.iter().map(|l| l.to_string()).collect();
            println!("kept {} records; whole categories: {}", pool.kept.len(), chosen.join(", "));
            Ok(0)
        }
        Command::DifficultyTargets(a) => {
            let n = difficulty_targets_file(&a.matrix, a.bounds.as_deref(), &a.out)?;
            println!("wrote {n} targets to {}", a.out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(errors)) => {
            eprintln!("invalid configuration:");
            for e in &errors.0 {
                eprintln!("  {e}");
            }
            ExitCode::from(EXIT_FATAL)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
