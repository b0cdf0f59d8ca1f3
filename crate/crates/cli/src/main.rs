use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigma_cli::gradcheck::{cmd_gradcheck, DEFAULT_TOLERANCE};
use sigma_cli::{ablate, paramcount, train, CliError, ExperimentConfig, RunReport};
use sigma_core::vit::VitConfig;

#[derive(Parser)]
#[command(name = "sigma", version, about = "Adapter parameter audits, gradient checks, training and ablations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.json and other artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Trainable-parameter table for every method.
    Paramcount(Common),
    /// Finite-difference check of every op and the adapter layer.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Train one method and write metrics, report and checkpoint.
    Train(Common),
    /// Fusion/modulation ablation and bottleneck-width sweep.
    Ablate(Common),
}

fn load(common: &Common) -> Result<Option<ExperimentConfig>, CliError> {
    common.config.as_deref().map(ExperimentConfig::load).transpose()
}

fn execute(cmd: &Command) -> Result<(RunReport, PathBuf), CliError> {
    match cmd {
        Command::Paramcount(c) => {
            // Without a config the audit runs on the ViT-B-shaped backbone.
            let (backbone, echo) = match load(c)? {
                Some(cfg) => (cfg.backbone.clone(), cfg.canonical()),
                None => {
                    let b = VitConfig::vit_b_audit();
                    let echo = serde_json::json!({ "backbone": b });
                    (b, echo)
                }
            };
            Ok((paramcount::cmd_paramcount(&backbone, echo, c.seed)?, c.out.clone()))
        }
        Command::Gradcheck { common, tolerance } => {
            let cfg = load(common)?.unwrap_or_default();
            let mut echo = cfg.canonical();
            echo["tolerance"] = serde_json::json!(tolerance);
            Ok((cmd_gradcheck(*tolerance, common.seed, echo)?, common.out.clone()))
        }
        Command::Train(c) => {
            let cfg = load(c)?.unwrap_or_default();
            Ok((train::cmd_train(&cfg, c.seed, &c.out)?, c.out.clone()))
        }
        Command::Ablate(c) => {
            let cfg = load(c)?.unwrap_or_default();
            Ok((ablate::cmd_ablate(&cfg, c.seed, &c.out)?, c.out.clone()))
        }
    }
}

fn out_dir(cmd: &Command) -> &PathBuf {
    match cmd {
        Command::Paramcount(c) | Command::Train(c) | Command::Ablate(c) => &c.out,
        Command::Gradcheck { common, .. } => &common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok((report, out)) => {
            if let Err(e) = report.write(&out) {
                eprintln!("{e}");
                return ExitCode::from(e.exit_code() as u8);
            }
            println!("{}", serde_json::to_string_pretty(&report.results).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let CliError::Failed { report: Some(report), .. } = &e {
                let _ = report.write(out_dir(&cli.command));
                println!("{}", serde_json::to_string_pretty(&report.results).expect("json"));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
