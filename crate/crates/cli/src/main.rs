use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ticket_forge::config::RunConfig;
use ticket_forge::experiment::{Finetune, PRETEXT_SOURCE};
use ticket_forge_cli::{format_overlap, format_summary, Init, Store, OUT_ENV};

#[derive(Parser)]
#[command(name = "ticket-forge", version, about = "Lottery-ticket experiments on miniature multimodal transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; artifacts go under `<out>/<config hash>/`.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    /// Finish an interrupted run instead of refusing to touch it.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Iterative magnitude pruning on tasks or the pretext corpus.
    Find {
        #[command(flatten)]
        common: Common,
        /// Task id or `pretext`; repeatable. Defaults to every configured task.
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Retrain one mask on a task and report dev accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, value_enum, default_value_t = Init::Theta0)]
        init: Init,
        /// Retrain with the adversarial objective.
        #[arg(long)]
        adversarial: bool,
        /// Label for the mask's origin in the report.
        #[arg(long, default_value = "mask")]
        source: String,
    },
    /// Evaluate every source's masks on every configured task.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Source task id or `pretext`; repeatable. Defaults to all tasks plus `pretext`.
        #[arg(long = "source")]
        sources: Vec<String>,
    },
    /// Accuracy against sparsity for IMP, pretext IMP and random pruning.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Pairwise overlap of masks.
    Overlap {
        #[command(flatten)]
        common: Common,
        /// Mask files to compare; repeatable. Without it, compares IMP masks of all sources.
        #[arg(long = "mask")]
        masks: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        sparsity: f64,
    },
    /// Iterative magnitude pruning with adversarial finetuning.
    AdvFind {
        #[command(flatten)]
        common: Common,
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
    /// Compare standard and adversarial tickets.
    AdvEval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "task")]
        tasks: Vec<String>,
    },
}

fn open(common: &Common) -> Result<(Store, Vec<u64>)> {
    let config = RunConfig::load(&common.config)?;
    let seeds = common.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
    let store = Store::open(config, &common.out, common.resume)?;
    eprintln!("run directory {}", store.root().display());
    Ok((store, seeds))
}

fn or_all_tasks(store: &Store, tasks: Vec<String>) -> Vec<String> {
    if tasks.is_empty() {
        store.config().tasks.iter().map(|t| t.task_id.clone()).collect()
    } else {
        tasks
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Find { common, tasks } => {
            let (store, seeds) = open(&common)?;
            let tasks = or_all_tasks(&store, tasks);
            for dir in store.find(&tasks, &seeds, Finetune::Standard)? {
                println!("{}", dir.display());
            }
        }
        Command::AdvFind { common, tasks } => {
            let (store, seeds) = open(&common)?;
            let tasks = or_all_tasks(&store, tasks);
            if tasks.iter().any(|t| t == PRETEXT_SOURCE) {
                anyhow::bail!("adv-find runs on downstream tasks only");
            }
            for dir in store.find(&tasks, &seeds, Finetune::Adversarial)? {
                println!("{}", dir.display());
            }
        }
        Command::Eval {
            common,
            mask,
            task,
            init,
            adversarial,
            source,
        } => {
            let (store, seeds) = open(&common)?;
            let finetune = if adversarial { Finetune::Adversarial } else { Finetune::Standard };
            let (report, path) = store.eval(&mask, &source, &task, init, finetune, &seeds)?;
            print!("{}", format_summary(&report));
            println!("{}", path.display());
        }
        Command::Transfer { common, sources } => {
            let (store, seeds) = open(&common)?;
            let (report, path) = store.transfer(&sources, &seeds)?;
            print!("{}", format_summary(&report));
            println!("{}", path.display());
        }
        Command::Sweep { common, tasks } => {
            let (store, seeds) = open(&common)?;
            for task in or_all_tasks(&store, tasks) {
                let (report, path) = store.sweep(&task, &seeds)?;
                print!("{}", format_summary(&report));
                println!("{}", path.display());
            }
        }
        Command::Overlap {
            common,
            masks,
            sparsity,
        } => {
            let (store, seeds) = open(&common)?;
            let results = if masks.is_empty() {
                store.overlap_runs(sparsity, &seeds)?
            } else {
                vec![store.overlap_files(&masks)?]
            };
            for (m, path) in results {
                print!("{}", format_overlap(&m));
                println!("{}", path.display());
            }
        }
        Command::AdvEval { common, tasks } => {
            let (store, seeds) = open(&common)?;
            let tasks = or_all_tasks(&store, tasks);
            let (report, path) = store.adv_eval(&tasks, &seeds)?;
            print!("{}", format_summary(&report));
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
