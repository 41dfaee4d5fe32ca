//! Command-line driver for the region-conversation pipeline.
//!
//! One configuration feeds every command. It is assembled in strict
//! precedence order: built-in defaults, then the config file (given by
//! `--config` or the `RGPTKIT_CONFIG` environment variable), then `--set`
//! overrides, then dedicated flags. Every run writes the fully resolved
//! configuration into the output directory so it can be replayed.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, bad config,
//! unreadable inputs, unreachable backends), 2 for internal errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rgptkit::config::{resolve_config_path, RunConfig, CONFIG_ENV};
use rgptkit::error::Error;

#[derive(Parser)]
#[command(name = "rgptkit", version, about = "Region-level conversation toolkit")]
struct Cli {
    /// Config file. Falls back to $RGPTKIT_CONFIG, then built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set stage.steps=50. Repeatable;
    /// applied after the config file, before dedicated flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Global random seed (config key `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (config key `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn annotation files into training conversations.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Caption regions with a two-stage captioner.
    Recap {
        #[command(subcommand)]
        command: RecapCommand,
    },
    /// Train the pipeline on a conversations file.
    Train {
        /// pretrain or finetune (config key `stage.name`).
        #[arg(long)]
        stage: Option<String>,
        /// Optimizer steps to run (config key `stage.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Conversations JSONL (config key `stage.input`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Checkpoint to resume from (config key `stage.init_from`).
        #[arg(long, value_name = "FILE")]
        init_from: Option<PathBuf>,
    },
    /// Run an evaluation protocol and write its report.
    Eval {
        /// classification, caption, rec or pope (config key `eval.protocol`).
        #[arg(long)]
        protocol: Option<String>,
        /// Question layout for classification (config key `eval.mode`).
        #[arg(long)]
        mode: Option<String>,
        /// Items JSONL (config key `eval.input`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Trained checkpoint to evaluate (config key `eval.checkpoint`).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Also compute mean average precision from candidate scores.
        #[arg(long)]
        use_scores: bool,
        /// Answer from ground truth instead of a checkpoint (plumbing check).
        #[arg(long)]
        oracle: bool,
    },
    /// Summarize a caption-record corpus.
    Stats {
        /// Caption records JSONL (config key `recap.input`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Read annotations, sample them, and write conversations + manifest.
    Prepare {
        /// Annotation file (config key `data.input`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// coco_detection, vg_regions or refexp (config key `data.format`).
        #[arg(long)]
        format: Option<String>,
        /// Comma-separated task list (config key `data.tasks`).
        #[arg(long)]
        tasks: Option<String>,
        /// Keep at most this many records per class (config key
        /// `data.per_class_cap`).
        #[arg(long)]
        per_class_cap: Option<usize>,
        /// Keep at most this many records per image (config key
        /// `data.per_image_cap`).
        #[arg(long)]
        per_image_cap: Option<usize>,
    },
}

#[derive(Subcommand)]
enum RecapCommand {
    /// Caption every record with the configured backend, then filter by
    /// region-text similarity.
    Run {
        /// mock or remote (config key `recap.backend`).
        #[arg(long)]
        backend: Option<String>,
        /// Similarity cutoff in [-1, 1] (config key `recap.threshold`).
        #[arg(long)]
        threshold: Option<f64>,
        /// Annotation records JSONL (config key `recap.input`).
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        /// Worker threads (config key `recap.workers`).
        #[arg(long)]
        workers: Option<usize>,
    },
}

/// Collects `key=value` override strings contributed by dedicated flags.
struct Overrides(Vec<String>);

impl Overrides {
    fn push<T: std::fmt::Display>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.0.push(format!("{key}={v}"));
        }
    }

    fn push_path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.0.push(format!("{key}={}", p.display()));
        }
    }

    fn push_flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.push(format!("{key}=true"));
        }
    }
}

fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = Overrides(Vec::new());
    o.push("seed", &cli.seed);
    o.push_path("out_dir", &cli.out_dir);
    match &cli.command {
        Command::Data {
            command:
                DataCommand::Prepare {
                    input,
                    format,
                    tasks,
                    per_class_cap,
                    per_image_cap,
                },
        } => {
            o.push_path("data.input", input);
            o.push("data.format", format);
            o.push("data.tasks", tasks);
            o.push("data.per_class_cap", per_class_cap);
            o.push("data.per_image_cap", per_image_cap);
        }
        Command::Recap {
            command:
                RecapCommand::Run {
                    backend,
                    threshold,
                    input,
                    workers,
                },
        } => {
            o.push("recap.backend", backend);
            o.push("recap.threshold", threshold);
            o.push_path("recap.input", input);
            o.push("recap.workers", workers);
        }
        Command::Train {
            stage,
            steps,
            input,
            init_from,
        } => {
            o.push("stage.name", stage);
            o.push("stage.steps", steps);
            o.push_path("stage.input", input);
            o.push_path("stage.init_from", init_from);
        }
        Command::Eval {
            protocol,
            mode,
            input,
            checkpoint,
            use_scores,
            oracle,
        } => {
            o.push("eval.protocol", protocol);
            o.push("eval.mode", mode);
            o.push_path("eval.input", input);
            o.push_path("eval.checkpoint", checkpoint);
            o.push_flag("eval.use_scores", *use_scores);
            o.push_flag("eval.oracle", *oracle);
        }
        Command::Stats { input } => {
            o.push_path("recap.input", input);
        }
    }
    o.0
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = resolve_config_path(
        cli.config.clone(),
        std::env::var_os(CONFIG_ENV).as_deref(),
    ) {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    cfg.apply_overrides(&flag_overrides(cli))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = build_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("resolved.cfg"), cfg.snapshot())?;
    match &cli.command {
        Command::Data {
            command: DataCommand::Prepare { .. },
        } => commands::data_prepare(&cfg),
        Command::Recap {
            command: RecapCommand::Run { .. },
        } => commands::recap_run(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Eval { .. } => commands::eval(&cfg),
        Command::Stats { .. } => commands::stats(&cfg),
    }
}

/// 1 for problems in the user's inputs or environment, 2 for violated
/// internal invariants.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape(_)
        | Error::Sequence(_)
        | Error::NoSupervisedTokens
        | Error::NonFiniteGradient(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a user error.
            let ok = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
