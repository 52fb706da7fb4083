use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use clusterbal::runner::{
    audit_checkpoint, parse_grid, run_sweep, run_training, AuditData, ExperimentConfig,
};
use clusterbal::synthdata::Mixture;
use clusterbal::Error;

#[derive(Parser)]
#[command(name = "clusterbal", version, about = "Balanced online clustering on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write telemetry, checkpoint and audit.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `section.key=value`, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Cluster-size audit of a checkpoint's teacher under plain inference.
    Audit {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV (`x0..,label`) or TOML mixture spec. Defaults to the
        /// checkpoint's own evaluation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sequential grid over named config fields.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Load and validate a config, then print it fully resolved.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a config's evaluation set as CSV.
    ExportData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

fn load(config: Option<&PathBuf>, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    Ok(match config {
        Some(p) => ExperimentConfig::load(p, overrides)?,
        None => ExperimentConfig::default().with_overrides(overrides)?,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
            quiet,
        } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let summary = run_training(&cfg, resume.as_deref(), &mut |s| {
                if !quiet {
                    eprintln!(
                        "epoch {:>3}  loss {:.4}  purity {:.3}  agreement {:.3}  rel size [{:.2}, {:.2}]  empty {:.3}",
                        s.epoch, s.loss, s.purity, s.agreement, s.min_rel_size, s.max_rel_size, s.empty_frac
                    );
                }
            })?;
            println!(
                "{}",
                json!({
                    "dir": summary.dir,
                    "steps": summary.steps,
                    "final": summary.final_epoch(),
                    "audit": {
                        "purity": summary.audit.purity,
                        "min_rel_size": summary.audit.sizes.min_rel,
                        "max_rel_size": summary.audit.sizes.max_rel,
                        "empty_frac": summary.audit.sizes.empty_frac,
                    },
                })
            );
        }
        Command::Audit { checkpoint, data } => {
            let source = match data {
                Some(p) => AuditData::from_path(&p)?,
                None => AuditData::Checkpoint,
            };
            let report = audit_checkpoint(&checkpoint, &source)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.into()))?
            );
        }
        Command::Sweep {
            config,
            grid,
            overrides,
        } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", grid.display())))?;
            let axes = parse_grid(&text)?;
            run_sweep(&cfg, &axes, &mut |i, s| {
                eprintln!("run-{i:03} done: {}", s.dir.display());
            })?;
        }
        Command::ValidateConfig { config, overrides } => {
            let cfg = load(config.as_ref(), &overrides)?;
            print!("{}", cfg.to_toml_string()?);
        }
        Command::ExportData {
            config,
            overrides,
            out,
        } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let data = Mixture::new(cfg.data)?.eval_dataset::<f64>();
            let file = std::fs::File::create(&out).map_err(|e| Failure::Run(e.into()))?;
            data.write_csv(std::io::BufWriter::new(file))?;
        }
    }
    Ok(())
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            report("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            report("config", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
