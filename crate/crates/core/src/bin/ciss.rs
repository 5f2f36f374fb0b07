use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ciss::eval::{emit_report, fmt_sig6, miou, read_run_summary, summary_csv};
use ciss::model::read_checkpoint;
use ciss::scenario::{scenario_file_text, write_dataset, ClassId};
use ciss::trainer::{eval_branch, evaluate, joint_train, run_scenario, Dataset, ProposalBank, RunConfig, Variant};
use ciss::{Exec, Result};

#[derive(Parser)]
#[command(name = "ciss", version, about = "Class-incremental semantic segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value run configuration; defaults to the standard fixture.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run on the calling thread only.
    #[arg(long)]
    serial: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset and its scenario file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every step of the scenario and write run artifacts.
    Run(RunArgs),
    /// Train all classes in one step.
    Joint(RunArgs),
    /// Re-evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Selects the evaluated branch.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Aggregate run directories into comparison tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&fs::read_to_string(p)?),
        None => Ok(RunConfig::standard()),
    }
}

fn configure(args: &RunArgs) -> Result<RunConfig> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(v) = args.variant {
        config.variant = v;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.serial {
        config.exec = Exec::Serial;
    }
    config.validate()?;
    Ok(config)
}

fn train(args: &RunArgs, joint: bool) -> Result<()> {
    let config = configure(args)?;
    let started = Instant::now();
    let artifacts = if joint { joint_train(&config)? } else { run_scenario(&config)? };
    artifacts.write(&args.out)?;
    for s in &artifacts.steps {
        let r = &s.report;
        println!(
            "step {}: base {} novel {} all {}",
            s.step,
            fmt_sig6(r.base_miou.unwrap_or(f64::NAN)),
            fmt_sig6(r.novel_miou.unwrap_or(f64::NAN)),
            fmt_sig6(r.all_miou)
        );
    }
    eprintln!(
        "{} seed {} finished in {:.1}s, artifacts in {}",
        artifacts.config.variant,
        artifacts.config.seed,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let config = load_config(config.as_deref())?;
            let data = Dataset::load(&config)?;
            write_dataset(&out, &data.train, &data.val)?;
            fs::write(out.join("scenario.txt"), scenario_file_text(&config.scenario, config.order_seed))?;
            println!("{} train and {} val samples in {}", data.train.len(), data.val.len(), out.display());
        }
        Command::Run(args) => train(&args, false)?,
        Command::Joint(args) => train(&args, true)?,
        Command::Eval {
            config,
            checkpoint,
            variant,
        } => {
            let mut config = load_config(config.as_deref())?;
            if let Some(v) = variant {
                config.variant = v;
            }
            let state = read_checkpoint(&checkpoint)?;
            let data = Dataset::load(&config)?;
            let props = ProposalBank::build(&data.val, config.proposals, config.fixed_n, config.exec)?;
            let conf = evaluate(&state, &data.val, &props, eval_branch(config.variant), config.exec)?;
            let base_all: BTreeSet<ClassId> = config.scenario.base_classes().iter().copied().collect();
            let seen: BTreeSet<ClassId> = state.registry().iter().copied().collect();
            let base = seen.intersection(&base_all).copied().collect();
            let novel = seen.difference(&base_all).copied().collect();
            let report = miou(&conf, &base, &novel)?;
            print!("{}", summary_csv(&[(state.step, report)]));
        }
        Command::Report { out, runs } => {
            let summaries = runs.iter().map(|r| read_run_summary(r)).collect::<Result<Vec<_>>>()?;
            for path in emit_report(&summaries, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
