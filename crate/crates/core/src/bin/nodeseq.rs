use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use nodeseq::harness::{build_world, run_on_world, sweep, RunConfig, SweepConfig, TrainingEnv};
use nodeseq::neural::Checkpoint;
use nodeseq::scoring::{score_all_nodes, Execution, ScoreVariant, ScoringConfig};
use nodeseq::sequencer::{oracle_search, Objective};
use nodeseq::tasks::{LabeledDataset, PartitionManifest};
use nodeseq::{Error, Result};

#[derive(Parser)]
#[command(name = "nodeseq", version, about = "Sequenced continual learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its logs.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every arm of a sweep file over its seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Score every node of a saved partition with a saved model.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, value_enum, default_value = "relu")]
        variant: VariantArg,
        #[arg(long, default_value_t = nodeseq::scoring::DEFAULT_SCORE_BATCH)]
        minibatch_size: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 1)]
        step: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate every visit sequence of a small run config.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "final-global-acc")]
        objective: ObjectiveArg,
        #[arg(long, default_value = "oracle.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Relu,
    Aid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    FinalGlobalAcc,
    SumDeltaM,
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let world = Arc::new(build_world(&cfg)?);
    std::fs::create_dir_all(out)?;
    world.global.save_csv(&out.join("global.csv"))?;
    world.partition.manifest().save(&out.join("partition.json"))?;
    let log = run_on_world(&cfg, world)?;
    log.save_steps_csv(&out.join("steps.csv"))?;
    std::fs::write(out.join("run.json"), log.to_json()?)?;
    Checkpoint::from_model(&log.final_model).save(&out.join("model_final.json"))?;
    println!(
        "{}: {} steps, global accuracy {:.4} -> {:.4}",
        log.label,
        log.steps.len(),
        log.initial_global_acc,
        log.final_global_acc()
    );
    match log.failure {
        Some(f) => Err(Error::Numeric(f)),
        None => Ok(()),
    }
}

fn run_sweep(config: &Path, out: &Path) -> Result<()> {
    let cfg = SweepConfig::load(config)?;
    let report = sweep(&cfg.arm_configs(), &cfg.seeds)?;
    report.save(out)?;
    for p in &report.paired {
        println!(
            "{:>20} vs {}: mean final diff {:+.4} (wins {}, losses {}, ties {})",
            p.label, p.baseline, p.mean, p.wins, p.losses, p.ties
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn score(
    checkpoint: &Path,
    dataset: &Path,
    partition: &Path,
    variant: VariantArg,
    minibatch_size: usize,
    jitter: f64,
    step: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let global = LabeledDataset::load_csv(dataset)?;
    let part = PartitionManifest::load(partition)?.materialize(&global)?;
    let config = ScoringConfig {
        variant: match variant {
            VariantArg::Relu => ScoreVariant::Relu,
            VariantArg::Aid => ScoreVariant::Aid,
        },
        minibatch_size,
        jitter,
    };
    let scores = score_all_nodes(&model, &part.nodes, &config, step, seed, Execution::Parallel)?;
    let json = scores.to_json()?;
    match out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn oracle(config: &Path, objective: ObjectiveArg, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let world = Arc::new(build_world(&cfg)?);
    let env = TrainingEnv::new(world, cfg.training(), cfg.seed);
    let objective = match objective {
        ObjectiveArg::FinalGlobalAcc => Objective::FinalGlobalAcc,
        ObjectiveArg::SumDeltaM => Objective::SumDeltaM,
    };
    let table = oracle_search(
        &env,
        cfg.horizon,
        cfg.policy.candidate_rule,
        objective,
        cfg.epsilon,
        cfg.oracle_cap,
    )?;
    table.save_csv(out)?;
    match (&table.best_sequence, table.best_value) {
        (Some(seq), Some(v)) => println!("best feasible sequence {seq:?}, value {v:.6}"),
        _ => println!("no feasible sequence among {} rows", table.rows.len()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out } => simulate(config, out),
        Command::Sweep { config, out } => run_sweep(config, out),
        Command::Score {
            checkpoint,
            dataset,
            partition,
            variant,
            minibatch_size,
            jitter,
            step,
            seed,
            out,
        } => score(
            checkpoint,
            dataset,
            partition,
            *variant,
            *minibatch_size,
            *jitter,
            *step,
            *seed,
            out.as_deref(),
        ),
        Command::Oracle { config, objective, out } => oracle(config, *objective, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
