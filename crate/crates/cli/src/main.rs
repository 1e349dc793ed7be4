//! `fedpr` command-line driver.
//!
//! Exit status: 0 on success, 1 for usage or configuration errors, 2 for
//! anything that fails while running.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fedpr::acceptance::{self, Settings};
use fedpr::checkpoint::Checkpoint;
use fedpr::data::{generate, SyntheticSpec};
use fedpr::dataset_file;
use fedpr::experiment::{evaluate_checkpoint, run_experiment, DataSource, ExperimentConfig, Mode};

#[derive(Parser, Debug)]
#[command(name = "fedpr", version, about = "Personalized federated forgery-detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one experiment and write its result files.
    Run(RunArgs),
    /// Cross-evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Write a synthetic dataset file.
    GenData(GenDataArgs),
    /// Run the acceptance checks.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Run seed; repeat or separate with commas for several.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Number of synthetic clients.
    #[arg(long)]
    clients: Option<usize>,
    /// Fraction of clients selected per round.
    #[arg(long)]
    select_frac: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Config naming the test data; defaults to the config.json saved next
    /// to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file to evaluate on instead of the config's data.
    #[arg(long, conflicts_with = "seed")]
    data: Option<PathBuf>,
    /// Seed for synthetic data; defaults to the config's first seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the matrix CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Synthetic spec (JSON) to start from.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "data.fprd")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Rounds per training run in the ablation checks.
    #[arg(long)]
    rounds: Option<usize>,
    /// Seeds for the ablation checks.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

/// Raised for mistakes in what the user asked for, as opposed to failures
/// while doing it.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: fedpr::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::GenData(args) => gen_data(args),
        Command::Selftest(args) => selftest(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<fedpr::Error>(), Some(fedpr::Error::Config(_)))
    });
    if config {
        1
    } else {
        2
    }
}

fn read_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

fn build_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if !args.seed.is_empty() {
        cfg.seeds = args.seed.clone();
    }
    if let Some(r) = args.rounds {
        cfg.round.rounds = r;
    }
    if let Some(k) = args.clients {
        match &mut cfg.data {
            DataSource::Synthetic(spec) => spec.clients = k,
            DataSource::File(_) => return Err(usage("--clients only applies to synthetic data")),
        }
    }
    if let Some(w) = args.select_frac {
        cfg.round.selection_fraction = w;
    }
    if let Some(lr) = args.lr {
        cfg.round.lr = lr;
    }
    if let Some(a) = args.alpha {
        cfg.round.weights.alpha = a;
    }
    if let Some(b) = args.beta {
        cfg.round.weights.beta = b;
    }
    if let Some(g) = args.gamma {
        cfg.round.weights.gamma = g;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = build_config(&args)?;
    let outcomes = run_experiment(&cfg)
        .with_context(|| format!("running experiment into {}", cfg.output_dir.display()))?;
    for o in &outcomes {
        println!(
            "seed {}: self accuracy {:.4}, diagonal dominant {}",
            o.seed,
            o.mean_self_accuracy(),
            o.matrix.diagonal_dominant()
        );
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data = match &args.data {
        Some(path) => dataset_file::read(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let path = match &args.config {
                Some(p) => p.clone(),
                None => args
                    .checkpoint
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join("config.json"),
            };
            let cfg = read_config(&path)?;
            let seed = args.seed.unwrap_or(cfg.seeds[0]);
            cfg.data.load(seed)?
        }
    };
    let models = checkpoint.clients.len();
    if models != 1 && models != data.len() {
        bail!(usage(format!("checkpoint has {models} clients but the data has {}", data.len())));
    }
    let matrix = evaluate_checkpoint(&checkpoint, &data)?;
    let csv = matrix.accuracy_csv();
    match &args.out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<ExitCode> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read spec {}: {e}", path.display())))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| usage(format!("spec {}: {e}", path.display())))?
        }
        None => SyntheticSpec::default(),
    };
    spec.seed = args.seed;
    if let Some(k) = args.clients {
        spec.clients = k;
    }
    if let Some(n) = args.samples {
        spec.samples_per_client = n;
    }
    spec.validate()?;
    let data = generate(&spec)?;
    dataset_file::write(&args.out, &data).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} clients to {}", data.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn selftest(args: SelftestArgs) -> anyhow::Result<ExitCode> {
    let mut settings = Settings::default();
    if let Some(r) = args.rounds {
        settings.rounds = r;
    }
    if !args.seeds.is_empty() {
        settings.seeds = args.seeds;
    }
    let outcomes = acceptance::run_all(&settings, |o| println!("{o}"));
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
