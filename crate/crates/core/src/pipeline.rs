//! The end-to-end commands behind the `clp` binary.
//!
//! Every command reads its inputs from the output directory, checks that
//! they were produced under the same config (the stage hash embedded in
//! each artifact), and writes its own artifacts next to them.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{optimize_a, trajectory_csv, CalibConfig, CalibOutcome};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataPaths, RunConfig, Stage};
use crate::data::{sample_calibration, synthetic_text, tokenize_file, Batch, Corpus};
use crate::error::{ClpError, Result};
use crate::eval::{cka_matrix, eval_batches, perplexity, retention, throughput, EvalReport};
use crate::gate::PruneWindow;
use crate::model::TransformerLM;
use crate::oracle::{agreement_report, enumerate_windows, oracle_csv, Agreement, WindowScore};
use crate::prune::{prune, PrunedModelMeta};
use crate::train::{loss_curve_csv, train_lm};
use crate::tune::{tune, TuneMode};

pub const DENSE: &str = "dense.ckpt";
pub const PRUNED: &str = "pruned.ckpt";
pub const REVERSE: &str = "reverse.ckpt";
pub const WINDOW: &str = "window.json";
pub const TRAJECTORY: &str = "trajectory.csv";

pub fn tuned_name(mode: TuneMode) -> String {
    format!("tuned_{mode}.ckpt")
}

/// Window chosen by calibration, stored alongside its trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub config_hash: String,
    pub window: PruneWindow,
    pub initial_a: f64,
    pub final_a: f64,
    pub steps: usize,
    pub stopped_early_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: f64,
    pub a_init: f64,
    pub final_a: f64,
    pub window: PruneWindow,
    pub rank: usize,
    pub kl: f64,
    pub ppl: f64,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    /// Accept artifacts stamped with a different config hash.
    pub allow_lineage_mismatch: bool,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| ClpError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| ClpError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

fn csv_with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash: {hash}\n{body}")
}

impl Pipeline {
    /// Validates the config and checks that every corpus exists.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(Self {
            cfg,
            allow_lineage_mismatch: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn hash(&self, stage: Stage) -> String {
        self.cfg.stage_hash(stage)
    }

    fn check_lineage(&self, what: &Path, found: Option<&str>, expected: &[String]) -> Result<()> {
        if found.is_some_and(|h| expected.iter().any(|e| e == h)) {
            return Ok(());
        }
        let msg = format!(
            "{} was produced under config hash {} but the current config expects {}",
            what.display(),
            found.unwrap_or("<none>"),
            expected.join(" or ")
        );
        if self.allow_lineage_mismatch {
            warn!("{msg}; continuing because the lineage check is overridden");
            Ok(())
        } else {
            Err(ClpError::Lineage(msg))
        }
    }

    fn load_checked(&self, path: &Path, producer: Stage, expected: &[String]) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(ClpError::MissingArtifact {
                path: path.to_path_buf(),
                producer: producer.command(),
            });
        }
        let ckpt = checkpoint::load(path)?;
        self.check_lineage(path, ckpt.config_hash.as_deref(), expected)?;
        Ok(ckpt)
    }

    fn dense(&self) -> Result<TransformerLM> {
        let path = self.path(DENSE);
        Ok(self.load_checked(&path, Stage::Train, &[self.hash(Stage::Train)])?.model)
    }

    fn corpus(&self, path: &Path) -> Result<Corpus> {
        tokenize_file(path)
    }

    fn save(&self, model: TransformerLM, meta: Option<PrunedModelMeta>, stage: Stage, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        checkpoint::save(
            &Checkpoint {
                model,
                pruned: meta,
                config_hash: Some(self.hash(stage)),
            },
            &path,
        )?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn calibration_batches(&self) -> Result<Vec<Batch>> {
        let c = &self.cfg.calib;
        let corpus = self.corpus(&self.cfg.data.calib)?;
        sample_calibration(&corpus, c.samples, c.seq_len, c.batch_size, self.cfg.seed)
    }

    pub fn write_config(&self) -> Result<()> {
        write_text(&self.path("config.json"), &self.cfg.to_json())
    }

    pub fn cmd_train(&self) -> Result<PathBuf> {
        self.write_config()?;
        let corpus = self.corpus(&self.cfg.data.train)?;
        let mut model = TransformerLM::init(&self.cfg.model)?;
        let outcome = train_lm(&mut model, &corpus, &self.cfg.train)?;
        info!("dense model eval ppl {:.4}", outcome.final_eval_ppl());
        let hash = self.hash(Stage::Train);
        write_text(&self.path("train_curve.csv"), &csv_with_hash(&hash, &loss_curve_csv(&outcome.curve)))?;
        self.save(model, None, Stage::Train, DENSE)
    }

    fn calibrate_with(&self, model: &TransformerLM, batches: &[Batch], cfg: &CalibConfig) -> Result<CalibOutcome> {
        optimize_a(model, batches, cfg)
    }

    pub fn cmd_calibrate(&self) -> Result<WindowRecord> {
        let model = self.dense()?;
        let batches = self.calibration_batches()?;
        let outcome = self.calibrate_with(&model, &batches, &self.cfg.calib_config())?;
        let hash = self.hash(Stage::Calibrate);
        write_text(&self.path(TRAJECTORY), &trajectory_csv(&outcome.records, Some(&hash)))?;
        let record = WindowRecord {
            config_hash: hash,
            window: outcome.window,
            initial_a: outcome.initial_a,
            final_a: outcome.final_a,
            steps: outcome.records.len(),
            stopped_early_at: outcome.stopped_early_at,
        };
        write_text(&self.path(WINDOW), &to_json(&record))?;
        Ok(record)
    }

    pub fn read_window(&self) -> Result<WindowRecord> {
        let path = self.path(WINDOW);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ClpError::MissingArtifact {
                path: path.clone(),
                producer: Stage::Calibrate.command(),
            },
            _ => ClpError::io(&path, e),
        })?;
        let record: WindowRecord = serde_json::from_str(&text)?;
        self.check_lineage(&path, Some(&record.config_hash), &[self.hash(Stage::Calibrate)])?;
        Ok(record)
    }

    /// Prunes the dense model at `window`, or at the calibrated window.
    pub fn cmd_prune(&self, window: Option<PruneWindow>) -> Result<PathBuf> {
        let model = self.dense()?;
        let window = match window {
            Some(w) => w,
            None => self.read_window()?.window,
        };
        let (pruned, meta) = prune(&model, window)?;
        info!("pruned layers {}..{} -> {} layers", window.start, window.end(), pruned.num_layers());
        self.save(pruned, Some(meta), Stage::Prune, PRUNED)
    }

    /// The naive baseline: drop the last `n` layers.
    pub fn cmd_baseline_reverse(&self) -> Result<PathBuf> {
        let model = self.dense()?;
        let window = PruneWindow::tail(model.num_layers(), self.cfg.prune_count());
        let (pruned, meta) = prune(&model, window)?;
        self.save(pruned, Some(meta), Stage::Prune, REVERSE)
    }

    pub fn cmd_finetune(&self) -> Result<PathBuf> {
        let mode = self.cfg.tune.mode;
        let ckpt = self.load_checked(&self.path(PRUNED), Stage::Prune, &[self.hash(Stage::Prune)])?;
        let train = self.corpus(&self.cfg.data.finetune)?;
        let eval = self.corpus(&self.cfg.data.eval)?;
        let outcome = tune(&ckpt.model, ckpt.pruned.as_ref(), &train, &eval, &self.cfg.tune)?;
        let hash = self.hash(Stage::Finetune);
        write_text(
            &self.path(&format!("tune_curve_{mode}.csv")),
            &csv_with_hash(&hash, &loss_curve_csv(&outcome.curve)),
        )?;
        self.save(outcome.model, ckpt.pruned, Stage::Finetune, &tuned_name(mode))
    }

    fn oracle_batches<'b>(&self, batches: &'b [Batch]) -> &'b [Batch] {
        let count = match self.cfg.oracle.samples {
            Some(s) => s.div_ceil(self.cfg.calib.batch_size).max(1),
            None => batches.len(),
        };
        &batches[..count.min(batches.len())]
    }

    fn oracle_scores(&self, model: &TransformerLM, batches: &[Batch], with_ppl: bool) -> Result<Vec<WindowScore>> {
        enumerate_windows(model, self.cfg.prune_count(), self.oracle_batches(batches), with_ppl)
    }

    /// Scores every window; compares against the calibrated window when one
    /// exists.
    pub fn cmd_oracle(&self) -> Result<(Vec<WindowScore>, Option<Agreement>)> {
        let model = self.dense()?;
        let batches = self.calibration_batches()?;
        let scores = self.oracle_scores(&model, &batches, self.cfg.oracle.with_ppl)?;
        let hash = self.hash(Stage::Calibrate);
        write_text(&self.path("oracle.csv"), &oracle_csv(&scores, Some(&hash)))?;
        let agreement = if self.path(WINDOW).exists() {
            let found = self.read_window()?;
            let report = agreement_report(&scores, found.window)?;
            info!(
                "calibrated window {} ranks {} of {}",
                found.window.start, report.rank, report.candidates
            );
            write_text(&self.path("agreement.json"), &to_json(&report))?;
            Some(report)
        } else {
            warn!("no {WINDOW} yet; run `clp calibrate` for an agreement report");
            None
        };
        Ok((scores, agreement))
    }

    /// Evaluates the tuned model of the configured mode, or `checkpoint`.
    pub fn cmd_eval(&self, checkpoint: Option<&Path>) -> Result<EvalReport> {
        let (path, label) = match checkpoint {
            Some(p) => (
                p.to_path_buf(),
                p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
            ),
            None => (self.path(&tuned_name(self.cfg.tune.mode)), format!("tuned_{}", self.cfg.tune.mode)),
        };
        let expected: Vec<String> = match checkpoint {
            Some(_) => Stage::ALL.iter().map(|s| self.hash(*s)).collect(),
            None => vec![self.hash(Stage::Finetune)],
        };
        let model = self.load_checked(&path, Stage::Finetune, &expected)?.model;
        let dense = self.dense()?;
        let report = self.evaluate(&model, &dense)?;
        write_text(&self.path(&format!("cka_{label}.csv")), &report.cka.to_csv())?;
        write_text(&self.path(&format!("report_{label}.json")), &to_json(&report))?;
        info!("ppl {:.4} (dense {:.4}), retention {:.4}", report.ppl, report.dense_ppl, report.retention);
        Ok(report)
    }

    pub fn evaluate(&self, model: &TransformerLM, dense: &TransformerLM) -> Result<EvalReport> {
        let e = &self.cfg.eval;
        let corpus = self.corpus(&self.cfg.data.eval)?;
        let ppl = perplexity(model, &corpus, e.seq_len, e.batch_size)?;
        let dense_ppl = perplexity(dense, &corpus, e.seq_len, e.batch_size)?;
        let cka_batches = eval_batches(&corpus, e.seq_len, e.cka_sequences)?;
        let cka = cka_matrix(model, &cka_batches[..1])?;
        let throughput = match &e.throughput {
            Some(t) => {
                let needed = t.batch * t.prompt_len;
                if corpus.len() < needed {
                    return Err(ClpError::Data(format!(
                        "eval corpus has {} tokens; throughput prompts need {needed}",
                        corpus.len()
                    )));
                }
                Some(throughput(model, &corpus.tokens()[..needed], t)?)
            }
            None => None,
        };
        Ok(EvalReport {
            config_hash: self.hash(Stage::Eval),
            model_checksum: model.checksum(),
            num_layers: model.num_layers(),
            ppl,
            dense_ppl,
            retention: retention(dense_ppl, ppl),
            cka,
            throughput,
        })
    }

    /// Chains train, calibrate, prune, finetune and eval.
    pub fn run_all(&self) -> Result<EvalReport> {
        self.cmd_train()?;
        self.cmd_calibrate()?;
        self.cmd_prune(None)?;
        self.cmd_finetune()?;
        self.cmd_eval(None)
    }

    fn sweep(&self, grid: Vec<(f64, f64)>, name: &str) -> Result<Vec<SweepRow>> {
        let model = self.dense()?;
        let batches = self.calibration_batches()?;
        let scores = self.oracle_scores(&model, &batches, false)?;
        let eval = self.corpus(&self.cfg.data.eval)?;
        let base = self.cfg.calib_config();
        let rows = grid
            .into_par_iter()
            .map(|(k, a_init)| -> Result<SweepRow> {
                let cfg = CalibConfig {
                    k,
                    a_init: Some(a_init),
                    ..base.clone()
                };
                let outcome = self.calibrate_with(&model, &batches, &cfg)?;
                let agreement = agreement_report(&scores, outcome.window)?;
                let (pruned, _) = prune(&model, outcome.window)?;
                let ppl = perplexity(&pruned, &eval, self.cfg.eval.seq_len, self.cfg.eval.batch_size)?;
                Ok(SweepRow {
                    k,
                    a_init: outcome.initial_a,
                    final_a: outcome.final_a,
                    window: outcome.window,
                    rank: agreement.rank,
                    kl: agreement.kl_gap + scores[0].kl,
                    ppl,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut csv = String::from("k,a_init,final_a,start,n,rank,kl,ppl\n");
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{:.12},{},{},{},{:.12e},{:.12e}\n",
                r.k, r.a_init, r.final_a, r.window.start, r.window.length, r.rank, r.kl, r.ppl
            ));
        }
        write_text(&self.path(name), &csv_with_hash(&self.hash(Stage::Calibrate), &csv))?;
        Ok(rows)
    }

    /// Calibrates once per configured `k` at the configured initial start.
    pub fn cmd_k_sweep(&self) -> Result<Vec<SweepRow>> {
        let a_init = self
            .cfg
            .calib
            .a_init
            .unwrap_or((self.cfg.model.num_layers - self.cfg.prune_count()) as f64);
        let grid = self.cfg.sweep.k_values.iter().map(|&k| (k, a_init)).collect();
        self.sweep(grid, "k_sweep.csv")
    }

    /// Calibrates once per initial start at the configured `k`.
    pub fn cmd_a_init_sweep(&self) -> Result<Vec<SweepRow>> {
        let grid = self.cfg.a_init_grid().into_iter().map(|a| (self.cfg.calib.k, a)).collect();
        self.sweep(grid, "a_init_sweep.csv")
    }
}

/// Thread budget from `CLP_THREADS`, if set.
pub fn thread_budget() -> Result<Option<usize>> {
    match std::env::var("CLP_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ClpError::Config(format!("CLP_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

/// Caps the global worker pool at `CLP_THREADS`. Call once, before any
/// parallel work.
pub fn configure_threads() -> Result<()> {
    if let Some(n) = thread_budget()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ClpError::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

/// Writes train, calib, finetune and eval corpora of synthetic text into
/// `dir`, each from its own seed.
pub fn write_synthetic_corpora(dir: &Path, bytes: usize, seed: u64) -> Result<DataPaths> {
    let paths = DataPaths {
        train: dir.join("train.txt"),
        calib: dir.join("calib.txt"),
        finetune: dir.join("finetune.txt"),
        eval: dir.join("eval.txt"),
    };
    let sizes = [bytes, bytes / 4, bytes / 2, bytes / 10];
    for (i, (path, size)) in [&paths.train, &paths.calib, &paths.finetune, &paths.eval]
        .into_iter()
        .zip(sizes)
        .enumerate()
    {
        write_text(path, &synthetic_text(seed.wrapping_add(i as u64), size.max(1024)))?;
    }
    Ok(paths)
}
