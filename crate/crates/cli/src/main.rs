use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fscl_cli::commands::{self, ExportOptions, TrainOptions};
use fscl_cli::io::write_json;
use fscl_cli::{CliError, ExperimentConfig};
use fscl_core::LossKind;

#[derive(Parser)]
#[command(name = "fscl", version, about = "Fair supervised contrastive learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; every key is optional.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs_repr=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test JSONL splits and a manifest to the output directory.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train encoder and classifier for one or more losses on the generated data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Loss to train; repeat for paired runs on the same data and seed.
        #[arg(long = "loss", value_parser = parse_loss)]
        losses: Vec<LossKind>,
        /// Continue each loss from `<output>/<loss>/checkpoint.json`.
        #[arg(long)]
        resume: bool,
        /// Directory holding train.jsonl and test.jsonl (defaults to the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// Run the ΔV sign study and the counting checks.
    VerifyTheorem {
        #[command(flatten)]
        common: Common,
    },
    /// Export group-stratified representations from a checkpoint.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL dataset (defaults to the test split in the output directory).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fairness report for a CSV of y,prediction,s rows.
    Metrics {
        predictions: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: fscl_core::Error| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = common.load()?;
            let m = commands::generate(&cfg)?;
            println!(
                "wrote {} train and {} test samples to {}",
                m.train.samples,
                m.test.samples,
                cfg.output_dir().display()
            );
        }
        Command::Train {
            common,
            losses,
            resume,
            data,
            quiet,
        } => {
            let cfg = common.load()?;
            let opts = TrainOptions {
                losses: &losses,
                resume,
                data_dir: data.as_deref(),
                quiet,
            };
            for r in commands::train(&cfg, &opts)? {
                println!(
                    "{}: accuracy {:.2} EO {:.2} DP {:.2} EOpp {:.2} probe {}",
                    r.loss,
                    r.accuracy,
                    r.equalized_odds,
                    r.demographic_parity,
                    r.equal_opportunity,
                    r.sensitive_probe.map_or("-".into(), |p| format!("{p:.3}"))
                );
            }
        }
        Command::VerifyTheorem { common } => {
            let cfg = common.load()?;
            let out = commands::verify_theorem(&cfg)?;
            if out.study.assumption_violated {
                eprintln!(
                    "warning: r = {} is below m² = {}; the sign pattern is not guaranteed",
                    cfg.study.r,
                    cfg.study.m * cfg.study.m
                );
            }
            let a = out.study.sign_agreement;
            println!(
                "{} seeds: dV<0 {:.2}, dV_p>0 {:.2}, dV_a<=0 {:.2}; counts {} rows, {} mismatches",
                out.study.rows.len(),
                a.v_negative,
                a.v_p_positive,
                a.v_a_nonpositive,
                out.count_rows,
                out.count_mismatches
            );
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            data,
            out,
        } => {
            let cfg = common.load()?;
            let (path, rows) =
                commands::export_embeddings(&cfg, &ExportOptions { checkpoint, data, out })?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::Metrics { predictions, out } => {
            let report = commands::metrics(&predictions)?;
            match out {
                Some(path) => write_json(&path, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("serializes")),
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
            e.exit_code()
        }
    }
}
