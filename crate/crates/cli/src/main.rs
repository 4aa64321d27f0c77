use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use circomp_cli::{CliError, ExperimentConfig, Pipeline, Workspace};

/// Circuit discovery by activation pruning: data, base model, masks,
/// evaluation, composition and compiled-model validation.
#[derive(Parser, Debug)]
#[command(name = "circomp", version)]
struct Cli {
    /// Experiment config (flat `key = value` with `[sections]`); built-in
    /// desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact root.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,

    /// Global seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate isolated train/val datasets and the vocabulary.
    GenData,
    /// Train the base model on all task datasets.
    TrainBase,
    /// Cache base-model output distributions for mask training.
    CacheOutputs,
    /// Compute mean-ablation vectors per task.
    ComputeMeans,
    /// Train one circuit per task (and the λ sweep, if configured).
    TrainMask,
    /// Faithfulness and accuracy of every circuit on every task.
    Eval,
    /// Pairwise IoU / IoM of the circuits.
    Overlap,
    /// Global and per-module sparsity of the circuits.
    Sparsity,
    /// Union circuits and their accuracy grid.
    Compose,
    /// Compile RASP programs and check exact circuit recovery.
    TracrValidate,
    /// Emit heatmaps, tables and a summary from finished stages.
    Report,
    /// Every stage in order; finished stages are skipped.
    Run,
    /// Print the effective configuration and the artifact key of each stage.
    Keys,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let ws = Workspace::open(&cli.workspace)?;
    let mut p = Pipeline::new(cfg, &ws);
    p.verbose = !cli.quiet;
    let outcomes = match cli.command {
        Command::GenData => vec![p.gen_data()?],
        Command::TrainBase => vec![p.train_base()?],
        Command::CacheOutputs => vec![p.cache_outputs()?],
        Command::ComputeMeans => vec![p.compute_means()?],
        Command::TrainMask => vec![p.train_masks()?],
        Command::Eval => vec![p.eval()?],
        Command::Overlap => vec![p.overlap()?],
        Command::Sparsity => vec![p.sparsity()?],
        Command::Compose => vec![p.compose()?],
        Command::TracrValidate => vec![p.tracr_validate()?],
        Command::Report => vec![p.report()?],
        Command::Run => p.run_all()?,
        Command::Keys => {
            println!("{}", serde_json::to_string_pretty(&p.cfg)?);
            for (stage, key) in p.keys() {
                println!("{}\t{}", stage, key);
            }
            return Ok(());
        }
    };
    for o in outcomes {
        println!("{}", ws.dir(o.stage, &o.key).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
