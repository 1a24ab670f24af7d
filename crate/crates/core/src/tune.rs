//! Recovery fine-tuning of a pruned model: the two layers adjacent to the
//! cut, low-rank adapters on every layer, or everything.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Corpus};
use crate::error::{ClpError, Result};
use crate::eval::mean_cross_entropy;
use crate::model::{checksum_of, TransformerLM, ADAPTED_PROJECTIONS, BLOCK_PARAM_NAMES};
use crate::optim::Optimizer;
use crate::prune::PrunedModelMeta;
use crate::train::{apply_gradients, clip_grad_norm, lm_loss_and_grads, LossPoint, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuneMode {
    /// Full parameters of the layers on either side of the removed window.
    Endpoint,
    /// Rank-r adapters on every attention and MLP projection.
    Lowrank,
    Full,
    None,
}

impl fmt::Display for TuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TuneMode::Endpoint => "endpoint",
            TuneMode::Lowrank => "lowrank",
            TuneMode::Full => "full",
            TuneMode::None => "none",
        })
    }
}

impl FromStr for TuneMode {
    type Err = ClpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "endpoint" => Ok(TuneMode::Endpoint),
            "lowrank" => Ok(TuneMode::Lowrank),
            "full" => Ok(TuneMode::Full),
            "none" => Ok(TuneMode::None),
            other => Err(ClpError::Config(format!(
                "unknown tuning mode {other:?} (expected endpoint, lowrank, full or none)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub mode: TuneMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub rank: usize,
    /// Caps the number of optimiser steps, e.g. to match budgets across modes.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            mode: TuneMode::Endpoint,
            epochs: 2,
            learning_rate: 1e-5,
            batch_size: 64,
            seq_len: 256,
            rank: 8,
            max_steps: None,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClpError::Config(format!(
                "tuning learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.mode == TuneMode::Lowrank && self.rank == 0 {
            return Err(ClpError::Config("low-rank tuning needs rank >= 1".into()));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(ClpError::Config("tuning batch size and sequence length must be positive".into()));
        }
        Ok(())
    }
}

/// Names of the tensors a tuning run may change.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableSet {
    pub mode: TuneMode,
    pub names: BTreeSet<String>,
}

impl TrainableSet {
    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Number of trainable values in `model`.
    pub fn parameter_count(&self, model: &TransformerLM) -> usize {
        model
            .named_parameters()
            .iter()
            .filter(|(n, _)| self.contains(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Trainable tensors for `mode`. Low-rank selection expects adapters to be
/// attached already.
pub fn select_trainable(model: &TransformerLM, meta: Option<&PrunedModelMeta>, mode: TuneMode) -> Result<TrainableSet> {
    let names: BTreeSet<String> = match mode {
        TuneMode::Endpoint => {
            let meta = meta.ok_or_else(|| {
                ClpError::Contract("endpoint tuning needs the pruning metadata of the model".into())
            })?;
            if meta.resulting_layers != model.num_layers() {
                return Err(ClpError::Contract(format!(
                    "metadata describes {} layers but the model has {}",
                    meta.resulting_layers,
                    model.num_layers()
                )));
            }
            let layers = meta.endpoints_after_pruning();
            match (meta.prev, meta.next) {
                (None, None) => {
                    return Err(ClpError::Contract(
                        "window covers the whole stack; there are no endpoints to tune".into(),
                    ))
                }
                (Some(_), None) => warn!("window touches the last layer; tuning only the layer before it"),
                (None, Some(_)) => warn!("window touches the first layer; tuning only the layer after it"),
                _ => {}
            }
            layers
                .iter()
                .flat_map(|i| BLOCK_PARAM_NAMES.iter().map(move |n| format!("layers.{i}.{n}")))
                .collect()
        }
        TuneMode::Lowrank => {
            if model.blocks.iter().any(|b| b.adapters.is_none()) {
                return Err(ClpError::Contract("low-rank tuning needs adapters on every layer".into()));
            }
            (0..model.num_layers())
                .flat_map(|i| {
                    ADAPTED_PROJECTIONS.iter().flat_map(move |(p, _)| {
                        [format!("layers.{i}.{p}.lora_down"), format!("layers.{i}.{p}.lora_up")]
                    })
                })
                .collect()
        }
        TuneMode::Full => model.named_parameters().into_iter().map(|(n, _)| n).collect(),
        TuneMode::None => BTreeSet::new(),
    };
    Ok(TrainableSet { mode, names })
}

/// Checksum over every tensor outside `trainable`.
pub fn frozen_checksum(model: &TransformerLM, trainable: &TrainableSet) -> String {
    checksum_of(model.named_parameters().into_iter().filter(|(n, _)| !trainable.contains(n)))
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    /// Tuned model; low-rank adapters are merged into their projections.
    pub model: TransformerLM,
    pub trainable: TrainableSet,
    pub trainable_params: usize,
    pub steps: usize,
    pub curve: Vec<LossPoint>,
    pub eval_loss_before: f64,
    pub eval_loss_after: f64,
    pub frozen_checksum_before: String,
    pub frozen_checksum_after: String,
}

fn planned_steps(cfg: &TuneConfig, per_epoch: usize) -> usize {
    let total = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(total, |m| m.min(total))
}

/// AdamW on the trainable set only, with a linearly decaying learning rate.
pub fn tune(
    model: &TransformerLM,
    meta: Option<&PrunedModelMeta>,
    train: &Corpus,
    eval: &Corpus,
    cfg: &TuneConfig,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let eval_batch = cfg.batch_size.min(16);
    let eval_loss_before = mean_cross_entropy(model, eval, cfg.seq_len, eval_batch)?;
    let per_epoch = epoch_batches(train, cfg.seq_len, cfg.batch_size, cfg.seed)?.len();
    let steps = if cfg.mode == TuneMode::None { 0 } else { planned_steps(cfg, per_epoch) };

    let mut work = model.clone();
    if cfg.mode == TuneMode::Lowrank {
        work.attach_adapters(cfg.rank, cfg.seed)?;
    }
    let trainable = select_trainable(&work, meta, cfg.mode)?;
    let trainable_params = trainable.parameter_count(&work);
    let frozen_checksum_before = frozen_checksum(&work, &trainable);
    let mut curve = vec![LossPoint {
        step: 0,
        split: Split::Eval,
        loss: eval_loss_before,
    }];
    if steps == 0 {
        return Ok(TuneOutcome {
            model: model.clone(),
            trainable,
            trainable_params,
            steps: 0,
            curve,
            eval_loss_before,
            eval_loss_after: eval_loss_before,
            frozen_checksum_after: frozen_checksum_before.clone(),
            frozen_checksum_before,
        });
    }
    info!(
        "{} tuning: {} tensors, {trainable_params} values, {steps} steps",
        cfg.mode,
        trainable.len()
    );

    let mut opt = Optimizer::adamw(cfg.learning_rate, cfg.weight_decay)?;
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let batches = epoch_batches(train, cfg.seq_len, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        for batch in &batches {
            if step == steps {
                break 'outer;
            }
            let (loss, mut grads) = lm_loss_and_grads(&work, batch, &|n| trainable.contains(n))
                .map_err(|e| ClpError::Diverged { step, detail: e.to_string() })?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.set_learning_rate(cfg.learning_rate * (1.0 - step as f64 / steps as f64));
            apply_gradients(&mut work, &mut opt, &grads).map_err(|e| ClpError::Diverged { step, detail: e.to_string() })?;
            curve.push(LossPoint {
                step: step + 1,
                split: Split::Train,
                loss,
            });
            step += 1;
        }
    }

    let frozen_checksum_after = frozen_checksum(&work, &trainable);
    if frozen_checksum_after != frozen_checksum_before {
        return Err(ClpError::Contract("a frozen parameter changed during tuning".into()));
    }
    work.merge_adapters();
    let eval_loss_after = mean_cross_entropy(&work, eval, cfg.seq_len, eval_batch)?;
    curve.push(LossPoint {
        step,
        split: Split::Eval,
        loss: eval_loss_after,
    });
    info!(
        "eval ppl {:.4} -> {:.4}",
        eval_loss_before.exp(),
        eval_loss_after.exp()
    );
    Ok(TuneOutcome {
        model: work,
        trainable,
        trainable_params,
        steps,
        curve,
        eval_loss_before,
        eval_loss_after,
        frozen_checksum_before,
        frozen_checksum_after,
    })
}
