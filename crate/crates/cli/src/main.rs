use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use sliceocc_cli::checkpoint::Checkpoint;
use sliceocc_cli::commands::{make_scene, run_export, run_gradcheck, run_overfit, run_predict, run_sweep, sweep_csv, SweepAxis};
use sliceocc_cli::config::RunConfig;
use sliceocc_cli::scene_io::load_scene;

#[derive(Parser)]
#[command(name = "sliceocc", version, about = "Slice-based 3D semantic occupancy on synthetic scenes")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks; exits nonzero on any failure.
    Gradcheck {
        /// Step sizes to report; pass/fail is decided at 1e-5.
        #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-5,1e-6")]
        eps: Vec<f64>,
        /// Only run the full-pipeline check.
        #[arg(long)]
        skip_ops: bool,
    },
    /// Train on one synthetic scene and export metrics and grids.
    Overfit {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Repeat the overfit run over values of one setting.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write the configured scene (or a saved one) and its ground-truth grid.
    Export {
        #[arg(long)]
        scene: Option<PathBuf>,
    },
    /// Run a trained checkpoint on a saved scene.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn print_eval(prefix: &str, r: &sliceocc::train::EvalRecord) {
    eprintln!(
        "{prefix}step {:>5}  loss {:.5} (ce {:.5} geo {:.5} sem {:.5})  mIoU {:.4}  acc {:.4}",
        r.step, r.loss.l_total, r.loss.l_ce, r.loss.l_geo, r.loss.l_sem, r.miou, r.accuracy
    );
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Gradcheck { eps, skip_ops } => {
            let report = run_gradcheck(&cfg, &eps, !skip_ops)?;
            print!("{}", report.to_text());
            std::fs::create_dir_all(&cfg.out)?;
            std::fs::write(cfg.out.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            Ok(report.passed)
        }
        Command::Overfit { steps } => {
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let o = run_overfit(&cfg, Some(&cfg.out), |r| print_eval("", r))?;
            println!("final mIoU {:.4} accuracy {:.4} in {:.1}s; outputs in {}", o.miou, o.accuracy, o.wall_seconds, cfg.out.display());
            Ok(true)
        }
        Command::Sweep { axis, values, steps } => {
            if let Some(s) = steps {
                cfg.steps = s;
            }
            let rows = run_sweep(&cfg, axis, &values, Some(&cfg.out), |v, r| print_eval(&format!("[{}={v}] ", axis.name()), r))?;
            print!("{}", sweep_csv(axis, &rows));
            Ok(true)
        }
        Command::Export { scene } => {
            let scene = match scene {
                Some(p) => load_scene(&p)?,
                None => make_scene(&cfg)?,
            };
            run_export(&cfg, &scene, &cfg.out)?;
            println!("wrote scene.json and gt.socc to {}", cfg.out.display());
            Ok(true)
        }
        Command::Predict { checkpoint, scene } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let scene = load_scene(&scene)?;
            let o = run_predict(&ckpt, &scene, &cfg.out).context("prediction")?;
            println!("mIoU {:.4} accuracy {:.4}; wrote {}", o.miou, o.accuracy, cfg.out.join("pred.socc").display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
