use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bai_cli::commands::{self, ConfigSource, DECODED_FILE};
use bai_cli::{CliError, CliResult};
use clap::{Args, Parser, Subcommand};

/// Train and inspect sequence models with bidirectional awareness induction.
#[derive(Parser)]
#[command(name = "bai", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set one configuration key, e.g. `model.hidden=32`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shortcut for `bai.enabled`.
    #[arg(long, value_parser = ["on", "off"])]
    bai: Option<String>,
    /// Shortcut for `bai.schedule`; repeat it to list ablation schedules.
    #[arg(long)]
    schedule: Vec<String>,
    /// Shortcut for `eval.beam`.
    #[arg(long)]
    beam: Option<usize>,
}

impl ConfigArgs {
    fn source(&self) -> CliResult<ConfigSource> {
        if self.schedule.len() > 1 {
            return Err(CliError::usage("--schedule may be given once here"));
        }
        Ok(ConfigSource {
            schedule: self.schedule.first().cloned(),
            ..self.ablation_source()
        })
    }

    fn ablation_source(&self) -> ConfigSource {
        ConfigSource {
            config: self.config.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
            bai: self.bai.as_deref().map(|s| s == "on"),
            schedule: None,
            beam: self.beam,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes manifest, metrics and per-epoch checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint with its stored configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Accuracy, cross-entropy, reconstruction error and beam BLEU of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also write the report to `<out>/eval.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beam-decode sources into `<out>/decoded.txt`.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Whitespace-tokenized sources, one per line; defaults to the validation split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the weight schedule as CSV, one row per optimizer step.
    Lambda {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100)]
        iters_per_epoch: usize,
        /// Write `<out>/lambda.csv` instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per `--schedule` (`off` disables BAI) and a summary table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and the full objective.
    Gradcheck {
        #[arg(long, default_value = "transformer")]
        arch: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write `<out>/gradcheck.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { cfg, out, resume } => {
            let outcome = commands::train(&cfg.source()?, &out, resume.as_deref(), &mut |l| println!("{l}"))?;
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Eval { checkpoint, cfg, out } => {
            let report = commands::eval(&checkpoint, &cfg.source()?)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            if let Some(out) = out {
                write(&out.join("eval.json"), &json)?;
            }
        }
        Command::Decode {
            checkpoint,
            input,
            cfg,
            out,
        } => {
            let lines = commands::decode_lines(&checkpoint, &cfg.source()?, input.as_deref())?;
            let mut text = lines.join("\n");
            text.push('\n');
            write(&out.join(DECODED_FILE), &text)?;
            println!("decoded {} sequences into {}", lines.len(), out.join(DECODED_FILE).display());
        }
        Command::Lambda {
            cfg,
            iters_per_epoch,
            out,
        } => {
            let csv = commands::lambda_csv(&cfg.source()?, iters_per_epoch)?;
            match out {
                Some(out) => write(&out.join("lambda.csv"), &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Ablate { cfg, out } => {
            let rows = commands::ablate(&cfg.ablation_source(), &cfg.schedule, &out)?;
            print!("{}", commands::ablation_table(&rows));
        }
        Command::Gradcheck { arch, seed, out } => {
            let report = commands::gradcheck(&arch, seed)?;
            let table = commands::gradcheck_table(&report);
            print!("{table}");
            if let Some(out) = out {
                write(&out.join("gradcheck.txt"), &table)?;
            }
            if !report.passed() {
                let bad: Vec<String> = report
                    .rows
                    .iter()
                    .filter(|r| r.max_rel_err > report.tolerance)
                    .map(|r| format!("{} ({:.3e})", r.name, r.max_rel_err))
                    .collect();
                return Err(CliError::runtime(format!(
                    "gradient check failed above {:e}: {}",
                    report.tolerance,
                    bad.join(", ")
                )));
            }
            println!("all {} checks within {:e}", report.rows.len(), report.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
