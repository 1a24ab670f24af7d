//! Run configuration: one JSON document, layered over a named profile.
//!
//! A config file may name a `profile` (`defaults` or `quick`) and override
//! any subset of fields; unspecified fields come from the profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::calibrate::CalibConfig;
use crate::error::{ClpError, Result};
use crate::eval::ThroughputConfig;
use crate::model::ModelSpec;
use crate::train::TrainConfig;
use crate::tune::{TuneConfig, TuneMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub calib: PathBuf,
    pub finetune: PathBuf,
    pub eval: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSettings {
    pub k: f64,
    /// `None` starts at `L - n`.
    pub a_init: Option<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub samples: usize,
    pub seq_len: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    /// Calibration samples scored per window; `None` uses them all.
    pub samples: Option<usize>,
    pub with_ppl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Sequences of the eval split pooled for the CKA matrix.
    pub cka_sequences: usize,
    /// Throughput is wall-clock dependent, so it is off unless asked for.
    pub throughput: Option<ThroughputConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub k_values: Vec<f64>,
    /// `None` uses `{0, L/2, L - n}`.
    pub a_init_values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub model: ModelSpec,
    pub data: DataPaths,
    pub train: TrainConfig,
    pub prune_rate: f64,
    pub calib: CalibSettings,
    pub oracle: OracleSettings,
    pub tune: TuneConfig,
    pub eval: EvalSettings,
    pub sweep: SweepSettings,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Pipeline stages, each of which stamps its artifacts with a hash of the
/// config sections it depends on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Calibrate,
    Prune,
    Finetune,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Train, Stage::Calibrate, Stage::Prune, Stage::Finetune, Stage::Eval];

    pub fn command(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Prune => "prune",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

impl RunConfig {
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "defaults" => Ok(Self::defaults()),
            "quick" => Ok(Self::quick()),
            other => Err(ClpError::Config(format!(
                "unknown profile {other:?} (expected defaults or quick)"
            ))),
        }
    }

    /// Calibration and tuning hyperparameters as published; the reference
    /// 12-layer toy model and byte corpora stand in for the LLMs.
    pub fn defaults() -> Self {
        Self {
            profile: "defaults".into(),
            model: ModelSpec::default(),
            data: DataPaths {
                train: "data/train.txt".into(),
                calib: "data/calib.txt".into(),
                finetune: "data/finetune.txt".into(),
                eval: "data/eval.txt".into(),
            },
            train: TrainConfig::default(),
            prune_rate: 0.25,
            calib: CalibSettings {
                k: 5.0,
                a_init: None,
                learning_rate: 0.5,
                epochs: 1,
                samples: 3000,
                seq_len: 256,
                batch_size: 8,
            },
            oracle: OracleSettings {
                samples: Some(256),
                with_ppl: true,
            },
            tune: TuneConfig::default(),
            eval: EvalSettings {
                seq_len: 256,
                batch_size: 16,
                cka_sequences: 16,
                throughput: None,
            },
            sweep: SweepSettings {
                k_values: vec![3.0, 5.0, 10.0],
                a_init_values: None,
            },
            seed: 0,
            out_dir: "runs/default".into(),
        }
    }

    /// A small model and short schedules that finish in seconds.
    pub fn quick() -> Self {
        let mut cfg = Self::defaults();
        cfg.profile = "quick".into();
        cfg.model = ModelSpec {
            num_layers: 8,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 64,
            ..ModelSpec::default()
        };
        cfg.train = TrainConfig {
            steps: 40,
            batch_size: 4,
            seq_len: 32,
            warmup_steps: 5,
            eval_every: 20,
            ..TrainConfig::default()
        };
        cfg.calib.samples = 32;
        cfg.calib.seq_len = 32;
        cfg.oracle.samples = Some(16);
        cfg.tune = TuneConfig {
            epochs: 1,
            learning_rate: 1e-3,
            batch_size: 4,
            seq_len: 32,
            rank: 4,
            max_steps: Some(10),
            ..TuneConfig::default()
        };
        cfg.eval.seq_len = 32;
        cfg.eval.batch_size = 8;
        cfg.eval.cka_sequences = 4;
        cfg.out_dir = "runs/quick".into();
        cfg
    }

    /// Parses a config document, filling unspecified fields from its profile.
    pub fn from_json(text: &str) -> Result<Self> {
        let overrides: Value =
            serde_json::from_str(text).map_err(|e| ClpError::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(map) = &overrides else {
            return Err(ClpError::Config("config must be a JSON object".into()));
        };
        let profile = match map.get("profile") {
            None => "defaults",
            Some(Value::String(s)) => s.as_str(),
            Some(other) => return Err(ClpError::Config(format!("profile must be a string, got {other}"))),
        };
        let mut merged = serde_json::to_value(Self::profile(profile)?)?;
        merge(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| ClpError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ClpError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Layers removed: `round(rate * L)`.
    pub fn prune_count(&self) -> usize {
        (self.prune_rate * self.model.num_layers as f64).round() as usize
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            learning_rate: self.calib.learning_rate,
            epochs: self.calib.epochs,
            k: self.calib.k,
            a_init: self.calib.a_init,
            n: self.prune_count(),
            seed: self.seed,
        }
    }

    /// Default a-init grid `{0, L/2, L - n}` unless configured.
    pub fn a_init_grid(&self) -> Vec<f64> {
        self.sweep.a_init_values.clone().unwrap_or_else(|| {
            let l = self.model.num_layers;
            vec![0.0, (l / 2) as f64, (l - self.prune_count()) as f64]
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tune.validate()?;
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(ClpError::Config(format!("prune rate must lie in (0, 1), got {}", self.prune_rate)));
        }
        let n = self.prune_count();
        if n == 0 {
            return Err(ClpError::Config(format!(
                "prune rate {} removes no layers of {}",
                self.prune_rate, self.model.num_layers
            )));
        }
        if self.model.num_layers < n + 2 {
            return Err(ClpError::Config(format!(
                "removing {n} of {} layers would leave fewer than two",
                self.model.num_layers
            )));
        }
        self.calib_config().validate()?;
        let seqs = [
            ("train", self.train.seq_len),
            ("calibration", self.calib.seq_len),
            ("tuning", self.tune.seq_len),
            ("eval", self.eval.seq_len),
        ];
        for (what, len) in seqs {
            if len == 0 || len > self.model.max_seq_len {
                return Err(ClpError::Config(format!(
                    "{what} sequence length {len} must be in 1..={}",
                    self.model.max_seq_len
                )));
            }
        }
        if self.calib.samples == 0 || self.calib.batch_size == 0 {
            return Err(ClpError::Config("calibration needs at least one sample and batch size >= 1".into()));
        }
        if self.eval.batch_size == 0 || self.eval.cka_sequences == 0 {
            return Err(ClpError::Config("eval batch size and CKA sequences must be positive".into()));
        }
        if self.sweep.k_values.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(ClpError::Config("sweep k values must be positive".into()));
        }
        Ok(())
    }

    /// Checks that every corpus path exists.
    pub fn check_paths(&self) -> Result<()> {
        let DataPaths { train, calib, finetune, eval } = &self.data;
        for (what, path) in [("train", train), ("calib", calib), ("finetune", finetune), ("eval", eval)] {
            if !path.is_file() {
                return Err(ClpError::Config(format!("{what} corpus {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Hash of the config sections that `stage` and its predecessors read.
    /// The output directory never contributes.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut parts = vec![
            ("seed", serde_json::to_value(self.seed)),
            ("model", serde_json::to_value(&self.model)),
            ("train", serde_json::to_value(&self.train)),
            ("data.train", serde_json::to_value(&self.data.train)),
        ];
        if stage != Stage::Train {
            parts.push(("prune_rate", serde_json::to_value(self.prune_rate)));
            parts.push(("calib", serde_json::to_value(&self.calib)));
            parts.push(("data.calib", serde_json::to_value(&self.data.calib)));
        }
        if matches!(stage, Stage::Finetune | Stage::Eval) {
            parts.push(("tune", serde_json::to_value(&self.tune)));
            parts.push(("data.finetune", serde_json::to_value(&self.data.finetune)));
        }
        if stage == Stage::Eval {
            parts.push(("eval", serde_json::to_value(&self.eval)));
            parts.push(("data.eval", serde_json::to_value(&self.data.eval)));
        }
        let mut hasher = Sha256::new();
        for (name, value) in parts {
            let value = value.expect("config sections serialize");
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(value.to_string().as_bytes());
            hasher.update([0]);
        }
        hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sets the master seed and every per-stage seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.tune.seed = seed;
    }

    pub fn set_mode(&mut self, mode: TuneMode) {
        self.tune.mode = mode;
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key and
/// everything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}
