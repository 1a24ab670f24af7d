//! Next-token training loop shared by dense pretraining and recovery tuning.

use std::collections::HashSet;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{epoch_batches, Batch, Corpus};
use crate::error::{ClpError, Result};
use crate::eval::mean_cross_entropy;
use crate::model::{LayerGate, TransformerLM};
use crate::optim::Optimizer;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Trailing fraction of the corpus held out for evaluation.
    pub eval_fraction: f64,
    pub eval_every: usize,
    /// Training fails if the final held-out perplexity exceeds this.
    pub max_eval_ppl: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            seq_len: 64,
            learning_rate: 3e-3,
            warmup_steps: 40,
            weight_decay: 0.01,
            grad_clip: 1.0,
            eval_fraction: 0.05,
            eval_every: 100,
            max_eval_ppl: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(ClpError::Config("steps, batch size and sequence length must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ClpError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Linear warmup followed by cosine decay to a tenth of the peak.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (0.1 + 0.9 * cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
}

/// Loss curve as `step,split,loss` CSV.
pub fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,split,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{:.9}\n", p.step, p.split.as_str(), p.loss));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<LossPoint>,
    pub final_eval_loss: f64,
}

impl TrainOutcome {
    pub fn final_eval_ppl(&self) -> f64 {
        self.final_eval_loss.exp()
    }
}

/// Mean cross-entropy of one batch and the gradients of every tensor for
/// which `trainable` holds, in canonical parameter order. Frozen tensors
/// enter the tape as constants and receive no gradient at all.
pub fn lm_loss_and_grads(
    model: &TransformerLM,
    batch: &Batch,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let gates = vec![LayerGate::Run; model.num_layers()];
    let logits = model.logits_on_tape(&mut tape, &bound, &batch.inputs, batch.batch, &gates)?;
    let loss = tape.cross_entropy(logits, &batch.target_ids())?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(ClpError::NumericDomain(format!("non-finite training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let out = bound
        .named()
        .iter()
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect();
    Ok((value, out))
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as Real;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Applies named gradients (canonical order) to the matching parameters.
pub fn apply_gradients(model: &mut TransformerLM, opt: &mut Optimizer, grads: &[(String, Tensor)]) -> Result<()> {
    let wanted: HashSet<&str> = grads.iter().map(|(n, _)| n.as_str()).collect();
    let mut params: Vec<(String, &mut Tensor)> = model
        .named_parameters_mut()
        .into_iter()
        .filter(|(n, _)| wanted.contains(n.as_str()))
        .collect();
    if params.len() != grads.len() || params.iter().zip(grads).any(|((a, _), (b, _))| a != b) {
        return Err(ClpError::Contract("gradient names do not match model parameters".into()));
    }
    let mut tensors: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
    let grad_refs: Vec<&Tensor> = grads.iter().map(|(_, g)| g).collect();
    opt.step(&mut tensors, &grad_refs)
}

/// Trains every parameter of `model` on the head of `corpus`, holding out
/// the tail for evaluation.
pub fn train_lm(model: &mut TransformerLM, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train, held_out) = corpus.split_tail(cfg.eval_fraction)?;
    let mut opt = Optimizer::adamw(cfg.learning_rate, cfg.weight_decay)?;
    let mut curve = Vec::new();
    let eval_batch = cfg.batch_size.max(1);
    let mut epoch = 0u64;
    let mut batches = epoch_batches(&train, cfg.seq_len, cfg.batch_size, cfg.seed)?;
    let mut cursor = 0;
    for step in 0..cfg.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = epoch_batches(&train, cfg.seq_len, cfg.batch_size, cfg.seed.wrapping_add(epoch))?;
            cursor = 0;
        }
        let batch = &batches[cursor];
        cursor += 1;
        let (loss, mut grads) = lm_loss_and_grads(model, batch, &|_| true).map_err(|e| ClpError::Diverged {
            step,
            detail: e.to_string(),
        })?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.set_learning_rate(cfg.learning_rate_at(step));
        apply_gradients(model, &mut opt, &grads).map_err(|e| ClpError::Diverged {
            step,
            detail: e.to_string(),
        })?;
        curve.push(LossPoint {
            step,
            split: Split::Train,
            loss,
        });
        debug!("train step {step} loss {loss:.4}");
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
            let eval = mean_cross_entropy(model, &held_out, cfg.seq_len, eval_batch)?;
            info!("step {} eval loss {eval:.4} (ppl {:.3})", step + 1, eval.exp());
            curve.push(LossPoint {
                step: step + 1,
                split: Split::Eval,
                loss: eval,
            });
        }
    }
    let final_eval_loss = mean_cross_entropy(model, &held_out, cfg.seq_len, eval_batch)?;
    curve.push(LossPoint {
        step: cfg.steps,
        split: Split::Eval,
        loss: final_eval_loss,
    });
    info!("final eval ppl {:.3}", final_eval_loss.exp());
    if let Some(limit) = cfg.max_eval_ppl {
        if final_eval_loss.exp() > limit {
            return Err(ClpError::Diverged {
                step: cfg.steps,
                detail: format!("eval ppl {:.3} above threshold {limit}", final_eval_loss.exp()),
            });
        }
    }
    Ok(TrainOutcome { curve, final_eval_loss })
}
