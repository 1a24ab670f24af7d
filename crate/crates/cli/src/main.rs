//! `clp`: train, calibrate, prune, tune and evaluate from one config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use clp::config::RunConfig;
use clp::gate::PruneWindow;
use clp::pipeline::{configure_threads, write_synthetic_corpora, Pipeline};
use clp::tune::TuneMode;
use clp::{ClpError, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "clp", version, about = "Contiguous layer pruning for small transformer LMs")]
struct Cli {
    /// Run configuration (JSON). Without it the `defaults` profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    prune_rate: Option<f64>,
    #[arg(long, global = true)]
    k: Option<f64>,
    #[arg(long, global = true)]
    a_init: Option<f64>,
    /// Recovery tuning mode: endpoint, lowrank, full or none.
    #[arg(long, global = true)]
    mode: Option<TuneMode>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use artifacts produced under a different config.
    #[arg(long, global = true)]
    allow_lineage_mismatch: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense model.
    Train,
    /// Search the window start by gradient descent on the gate.
    Calibrate,
    /// Remove the calibrated window (or the one given by --start).
    Prune {
        #[arg(long)]
        start: Option<usize>,
    },
    /// Recovery tuning of the pruned model.
    Finetune,
    /// Score every window exhaustively and compare with the calibrated one.
    Oracle,
    /// Perplexity, retention, CKA and optional throughput.
    Eval {
        /// Evaluate this checkpoint instead of the tuned model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Prune the last n layers instead.
    BaselineReverse,
    /// train, calibrate, prune, finetune and eval in sequence.
    RunAll,
    /// Calibrate once per k in the sweep grid.
    KSweep,
    /// Calibrate once per initial start in the sweep grid.
    AInitSweep,
    /// Print the resolved configuration.
    ShowConfig,
    /// Write synthetic train/calib/finetune/eval corpora.
    SynthData {
        #[arg(long, default_value = "data")]
        dir: PathBuf,
        /// Size of the training corpus in bytes.
        #[arg(long, default_value_t = 1_000_000)]
        bytes: usize,
    },
}

fn resolve_config(cli: &Cli) -> clp::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::defaults(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(rate) = cli.prune_rate {
        cfg.prune_rate = rate;
    }
    if let Some(k) = cli.k {
        cfg.calib.k = k;
    }
    if let Some(a) = cli.a_init {
        cfg.calib.a_init = Some(a);
    }
    if let Some(mode) = cli.mode {
        cfg.set_mode(mode);
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> clp::Result<()> {
    configure_threads()?;
    let cfg = resolve_config(&cli)?;
    if let Command::SynthData { dir, bytes } = &cli.command {
        let paths = write_synthetic_corpora(dir, *bytes, cfg.seed)?;
        println!("{}", serde_json::to_string_pretty(&paths)?);
        return Ok(());
    }
    if let Command::ShowConfig = cli.command {
        cfg.validate()?;
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let mut pipeline = Pipeline::new(cfg)?;
    pipeline.allow_lineage_mismatch = cli.allow_lineage_mismatch;
    let n = pipeline.cfg.prune_count();
    match cli.command {
        Command::Train => println!("{}", pipeline.cmd_train()?.display()),
        Command::Calibrate => {
            let w = pipeline.cmd_calibrate()?;
            println!("window start {} length {} (a = {:.4})", w.window.start, w.window.length, w.final_a);
        }
        Command::Prune { start } => {
            println!("{}", pipeline.cmd_prune(start.map(|s| PruneWindow::new(s, n)))?.display())
        }
        Command::Finetune => println!("{}", pipeline.cmd_finetune()?.display()),
        Command::Oracle => {
            let (scores, agreement) = pipeline.cmd_oracle()?;
            for s in &scores {
                println!("start {:>3}  kl {:.6}", s.window.start, s.kl);
            }
            if let Some(a) = agreement {
                println!("calibrated start {} ranks {} of {}", a.found.start, a.rank, a.candidates);
            }
        }
        Command::Eval { checkpoint } => {
            let r = pipeline.cmd_eval(checkpoint.as_deref())?;
            println!("ppl {:.4} dense {:.4} retention {:.4}", r.ppl, r.dense_ppl, r.retention);
        }
        Command::BaselineReverse => println!("{}", pipeline.cmd_baseline_reverse()?.display()),
        Command::RunAll => {
            let r = pipeline.run_all()?;
            println!("ppl {:.4} dense {:.4} retention {:.4}", r.ppl, r.dense_ppl, r.retention);
        }
        Command::KSweep | Command::AInitSweep => {
            let rows = if matches!(cli.command, Command::KSweep) {
                pipeline.cmd_k_sweep()?
            } else {
                pipeline.cmd_a_init_sweep()?
            };
            for r in rows {
                println!(
                    "k {:>5} a_init {:>5} -> start {} rank {} ppl {:.4}",
                    r.k, r.a_init, r.window.start, r.rank, r.ppl
                );
            }
        }
        Command::ShowConfig | Command::SynthData { .. } => unreachable!(),
    }
    Ok(())
}

fn exit_code(err: &ClpError) -> u8 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Lineage => 5,
        ErrorKind::Other => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
