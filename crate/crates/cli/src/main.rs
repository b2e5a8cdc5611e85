use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use histo_cli::{exit_code, pipeline, ExperimentConfig, RunDir};
use histo_core::Result;

#[derive(Parser)]
#[command(name = "histo", version, about = "Multi-expert histopathology classifier experiments")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a scalar key, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset index and write split and fold manifests.
    Prepare,
    /// Train the k-fold ensemble of every protocol run.
    Train {
        /// Continue from saved fold states.
        #[arg(long)]
        resume: bool,
    },
    /// Score the trained ensembles and write reports.
    Eval,
    /// Occlusion maps and XAI metrics for a confident cohort.
    Explain,
    /// Regenerate figures from the reports.
    Plot,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?.with_overrides(&cli.overrides)?;
    let run = RunDir::new(cfg.run_dir());
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let _lock = run.lock()?;
    match cli.command {
        Command::Prepare => {
            let out = pipeline::prepare(&cfg, &run)?;
            print!("{}", out.summary);
            for (file, digest) in &out.digests {
                println!("{file}\t{digest}");
            }
        }
        Command::Train { resume } => {
            for o in pipeline::train(&cfg, &run, resume)? {
                println!("{}: checkpoint {}", o.run, o.checkpoint.display());
                for f in &o.folds {
                    println!(
                        "  fold {}: val F1 {:.4}, val accuracy {:.4}, best epoch {}, final train accuracy {}",
                        f.fold,
                        f.val_f1,
                        f.val_accuracy,
                        f.best_epoch.map_or("-".into(), |e| e.to_string()),
                        f.final_train_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                    );
                }
            }
        }
        Command::Eval => {
            for r in pipeline::evaluate(&cfg, &run)? {
                println!(
                    "{}: n={} accuracy {:.4} weighted P/R/F1 {:.4}/{:.4}/{:.4} avg uncertainty {:.5} flagged {}",
                    r.run,
                    r.n_samples,
                    r.accuracy,
                    r.weighted_precision,
                    r.weighted_recall,
                    r.weighted_f1,
                    r.avg_uncertainty,
                    r.n_flagged
                );
            }
        }
        Command::Explain => {
            let out = pipeline::explain(&cfg, &run)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: {} occlusion maps, summary in {}",
                out.run,
                out.heatmaps.len(),
                run.xai_summary().display()
            );
        }
        Command::Plot => {
            for p in pipeline::plot(&run)? {
                println!("{}", p.display());
            }
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
        Err(_) => ExitCode::from(2),
    }
}
