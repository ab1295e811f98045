use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use seqfuse::config::ExperimentConfig;
use seqfuse::experiment::{self, ExperimentError};

#[derive(Parser)]
#[command(name = "seqfuse", version, about = "Multi-sequence fusion experiments on synthetic MR phantoms")]
struct Cli {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment and phantom seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val/test phantom datasets.
    Generate,
    /// Train the configured model grid.
    Train,
    /// Evaluate checkpoints on the test split.
    Eval {
        /// One checkpoint instead of every finished run's best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequences to withhold, comma separated.
        #[arg(long)]
        censor: Option<String>,
    },
    /// mAP over every non-empty subset of sequences.
    Assay {
        /// Checkpoint to assay.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Plot cumulative saliency for trained runs.
    SaliencyReport {
        /// Report only the run holding this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Overlay ground truth and prediction contours on test slices.
    Visualize {
        /// Checkpoint to predict with.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test patient id; the first test patient when omitted.
        #[arg(long)]
        patient: Option<String>,
        /// Half-open slice range `START:END`.
        #[arg(long)]
        z: Option<String>,
    },
    /// Print the effective config as JSON.
    ShowConfig,
}

fn parse_range(text: &str) -> Result<(usize, usize), ExperimentError> {
    let bad = || ExperimentError::Config(format!("z range {text:?} is not START:END"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialises")
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let canonical = cfg.canonical();
    match cli.command {
        Command::Generate => {
            for s in experiment::cmd_generate(&cfg)? {
                println!("{}: {} patients, {} lesions -> {}", s.split, s.patients, s.lesions, s.root.display());
            }
        }
        Command::Train => {
            for s in experiment::cmd_train(&cfg)? {
                if s.skipped {
                    println!("{}: already trained in {}, skipping", s.label, s.run_dir.display());
                } else {
                    println!(
                        "{}: best val mAP {:?} at iteration {:?} -> {}",
                        s.label,
                        s.best_score,
                        s.best_iteration,
                        s.run_dir.display()
                    );
                }
            }
        }
        Command::Eval { checkpoint, censor } => {
            let censor: Option<BTreeSet<String>> =
                censor.map(|c| experiment::parse_censor(&c, &canonical)).transpose()?;
            for r in experiment::cmd_eval(&cfg, checkpoint.as_deref(), censor.as_ref())? {
                let ci = r.map_ci.map(|[a, b]| format!(" ({a:.3}, {b:.3})")).unwrap_or_default();
                println!(
                    "{} censor={:?}: mAP {:.3}{ci} -> {}",
                    r.model,
                    r.censor,
                    r.report.map_score,
                    r.report_path.display()
                );
            }
        }
        Command::Assay { checkpoint } => {
            let rows = experiment::cmd_assay(&cfg, &checkpoint)?;
            println!("{}", json(&rows));
        }
        Command::SaliencyReport { checkpoint } => {
            for s in experiment::cmd_saliency_report(&cfg, checkpoint.as_deref())? {
                println!("{}", json(&s));
            }
        }
        Command::Visualize { checkpoint, patient, z } => {
            let range = z.as_deref().map(parse_range).transpose()?;
            let dir = cfg.output_dir.join("overlays");
            let files = experiment::cmd_visualize(&cfg, &checkpoint, patient.as_deref(), range, Path::new(&dir))?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::ShowConfig => println!("{}", cfg.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqfuse: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
