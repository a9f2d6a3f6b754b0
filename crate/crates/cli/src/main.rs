use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mqf_cli::commands::{
    cmd_eval, cmd_finetune, cmd_gen_data, cmd_inspect_masks, cmd_pretrain, EvalArgs, FinetuneArgs, PretrainArgs,
};
use mqf_cli::{CliError, RunConfig};
use mqformer::templates::Task;

/// Dual-query vision-language pipeline: synthetic data, two training stages,
/// evaluation and mask inspection.
#[derive(Parser)]
#[command(name = "mqf", version, disable_help_subcommand = true)]
struct Cli {
    /// Key=value config file; flags override file keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override (beats MQF_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write N synthetic scene records.
    GenData {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: four-objective pre-training over a scene file.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace path (default: <out>.trace).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps override (train.total_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size override (train.batch_size).
        #[arg(long)]
        batch_size: Option<usize>,
        /// Ablations: no-vit, no-odm, no-ssm, no-vr (repeatable).
        #[arg(long)]
        ablate: Vec<String>,
    },
    /// Stage 2: instruction fine-tuning with a frozen base language model.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated tasks: caption,vqa,grounded-caption,rec,referential-dialogue,multi-choice-vqa.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Steps override (ft.steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Records per task override (ft.records_per_task).
        #[arg(long)]
        records_per_task: Option<usize>,
        /// Base LM pre-training steps override (lm.steps).
        #[arg(long)]
        lm_steps: Option<usize>,
    },
    /// Score a fine-tuned checkpoint on a task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        /// Report path prefix (writes <out>.summary.txt and <out>.records.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exit with code 3 when accuracy falls below this.
        #[arg(long)]
        min_accuracy: Option<f64>,
        /// Generation budget per example.
        #[arg(long, default_value_t = 24)]
        max_new: usize,
    },
    /// Render internals for audit.
    Inspect {
        #[command(subcommand)]
        what: InspectCmd,
    },
}

#[derive(Subcommand)]
enum InspectCmd {
    /// Print one objective's attention visibility as a character grid.
    Masks {
        /// Four comma-separated group sizes: vq,gq,spatial,caption.
        #[arg(long)]
        layout: String,
        /// itc, itm, icg or msp.
        #[arg(long)]
        objective: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("MQF_SEED") {
        let seed: u64 = env_seed
            .parse()
            .map_err(|_| CliError::Validation(format!("MQF_SEED must be an integer, got {env_seed:?}")))?;
        config.train.seed = seed;
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let mut config = resolve_config(&cli)?;
    match cli.cmd {
        Cmd::GenData { scenes, seed, out } => cmd_gen_data(&config, scenes, seed, &out),
        Cmd::Pretrain { data, out, trace, resume, steps, batch_size, ablate } => {
            if let Some(steps) = steps {
                config.train.total_steps = steps;
            }
            if let Some(b) = batch_size {
                config.train.batch_size = b;
            }
            for name in &ablate {
                config.apply_ablation(name)?;
            }
            cmd_pretrain(config, &PretrainArgs { data, out, trace, resume })
        }
        Cmd::Finetune { ckpt, data, tasks, out, steps, records_per_task, lm_steps } => {
            let tasks: Vec<Task> = tasks
                .iter()
                .map(|t| Task::from_name(t).ok_or_else(|| CliError::Usage(format!("unknown task {t:?}"))))
                .collect::<Result<_, _>>()?;
            let mut overrides: Vec<(String, String)> = Vec::new();
            if let Some(s) = steps {
                overrides.push(("ft.steps".into(), s.to_string()));
            }
            if let Some(r) = records_per_task {
                overrides.push(("ft.records_per_task".into(), r.to_string()));
            }
            if let Some(s) = lm_steps {
                overrides.push(("lm.steps".into(), s.to_string()));
            }
            cmd_finetune(&overrides, &FinetuneArgs { ckpt, data, tasks, out })
        }
        Cmd::Eval { ckpt, task, data, out, min_accuracy, max_new } => {
            cmd_eval(&EvalArgs { ckpt, task, data, out, min_accuracy, max_new }).map(|_| ())
        }
        Cmd::Inspect { what: InspectCmd::Masks { layout, objective } } => {
            let grid = cmd_inspect_masks(&layout, &objective)?;
            print!("{grid}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version through the error path too.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
