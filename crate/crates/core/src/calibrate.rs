//! Search for the window start `a` by gradient descent on the KL divergence
//! between dense and gated next-token distributions.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Batch;
use crate::error::{ClpError, Result};
use crate::functional::softmax;
use crate::gate::{round_window, soft_mask, soft_mask_on_tape, start_leaf, GateParams, LayerMask, PruneWindow};
use crate::model::{LayerGate, TransformerLM};
use crate::tensor::Real;

/// `|Δa|` below which the trajectory counts as settled.
pub const STABILITY_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub k: f64,
    /// Initial window start; `None` starts at the last valid position `L - n`.
    pub a_init: Option<f64>,
    pub n: usize,
    /// Seeds the batch order of every epoch.
    pub seed: u64,
}

impl CalibConfig {
    pub fn new(n: usize) -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 1,
            k: 5.0,
            a_init: None,
            n,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClpError::Config(format!(
                "calibration learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.n == 0 {
            return Err(ClpError::Config("window length n must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(ClpError::Config("calibration needs at least one epoch".into()));
        }
        Ok(())
    }
}

/// One optimiser step: `a` after the update and the KL before it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibRecord {
    pub step: usize,
    pub a: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibOutcome {
    pub window: PruneWindow,
    pub initial_a: f64,
    pub final_a: f64,
    pub records: Vec<CalibRecord>,
    /// Step at which the stability window was satisfied, if before the end.
    pub stopped_early_at: Option<usize>,
}

/// Trajectory as `step,a,loss` CSV, optionally preceded by a
/// `# config_hash:` comment line.
pub fn trajectory_csv(records: &[CalibRecord], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash: {h}\n"));
    }
    out.push_str("step,a,loss\n");
    for r in records {
        out.push_str(&format!("{},{:.12},{:.12e}\n", r.step, r.a, r.loss));
    }
    out
}

/// Next-token distributions of the dense model, one row per position.
pub fn dense_targets(model: &TransformerLM, batch: &Batch) -> Result<Vec<Real>> {
    let logits = model.forward(&batch.inputs, batch.batch)?;
    Ok(softmax(&logits, 2)?.into_data())
}

/// Mean per-token `KL(P_dense || P_gated)` for any fixed mask. The oracle
/// scores hard masks through this same function.
pub fn kl_objective_with_targets(
    model: &TransformerLM,
    mask: &LayerMask,
    batch: &Batch,
    targets: &[Real],
) -> Result<f64> {
    let gated = model.forward_gated(&batch.inputs, batch.batch, mask)?;
    let mut tape = Tape::new();
    let logits = tape.constant(gated);
    let kl = tape.kl_div(targets, logits)?;
    Ok(tape.value(kl).item() as f64)
}

/// Mean KL of the gated model under `mask` against the dense model.
pub fn kl_objective(model: &TransformerLM, mask: &LayerMask, batch: &Batch) -> Result<f64> {
    let targets = dense_targets(model, batch)?;
    kl_objective_with_targets(model, mask, batch, &targets)
}

/// Mean KL under the soft gate of `gp`.
pub fn kl_objective_soft(model: &TransformerLM, gp: &GateParams, batch: &Batch) -> Result<f64> {
    kl_objective(model, &soft_mask(gp), batch)
}

/// KL under the soft gate and its derivative with respect to `a`. Only `a`
/// is a gradient leaf; model tensors enter the tape as constants.
pub fn kl_and_grad(model: &TransformerLM, gp: &GateParams, batch: &Batch, targets: &[Real]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, &|_| false);
    let a = start_leaf(&mut tape, gp);
    let gates: Vec<LayerGate> = soft_mask_on_tape(&mut tape, a, gp)
        .into_iter()
        .map(LayerGate::Learned)
        .collect();
    let logits = model.logits_on_tape(&mut tape, &bound, &batch.inputs, batch.batch, &gates)?;
    let kl = tape.kl_div(targets, logits)?;
    let loss = tape.value(kl).item() as f64;
    let grads = tape.backward(kl)?;
    let grad = grads.get(a).expect("a is a gradient leaf").item() as f64;
    Ok((loss, grad))
}

/// Number of trailing records that must be stable: 10% of the planned
/// steps, at least two.
pub fn stability_window(total_steps: usize) -> usize {
    ((total_steps as f64 * 0.1).ceil() as usize).max(2)
}

/// True when the last `window` values of `a` stay within the tolerance of
/// the final one.
pub fn is_stable(records: &[CalibRecord], window: usize) -> bool {
    if records.len() < window {
        return false;
    }
    let last = records[records.len() - 1].a;
    records[records.len() - window..]
        .iter()
        .all(|r| (r.a - last).abs() < STABILITY_TOLERANCE)
}

/// Plain SGD on `a` with clamping to `[0, L - n]` after every step.
pub fn optimize_a(model: &TransformerLM, calib: &[Batch], cfg: &CalibConfig) -> Result<CalibOutcome> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(ClpError::Data("calibration set is empty".into()));
    }
    let num_layers = model.num_layers();
    let a_init = cfg.a_init.unwrap_or(num_layers.saturating_sub(cfg.n) as f64);
    let mut gp = GateParams::new(a_init, cfg.n, cfg.k, num_layers)?;
    if gp.a() != a_init {
        info!("initial a = {a_init} clamped to {}", gp.a());
    }
    let initial_a = gp.a();
    let total = cfg.epochs * calib.len();
    let window = stability_window(total);
    let mut records: Vec<CalibRecord> = Vec::with_capacity(total);
    let mut stopped_early_at = None;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..calib.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        for idx in order {
            let batch = &calib[idx];
            let step = records.len() + 1;
            let targets = dense_targets(model, batch)?;
            let (loss, grad) = kl_and_grad(model, &gp, batch, &targets)?;
            if !loss.is_finite() || !grad.is_finite() {
                return Err(ClpError::Diverged {
                    step,
                    detail: format!(
                        "loss {loss}, gradient {grad}; last valid a = {} after step {}",
                        gp.a(),
                        step - 1
                    ),
                });
            }
            gp.set_a(gp.a() - cfg.learning_rate * grad);
            records.push(CalibRecord { step, a: gp.a(), loss });
            debug!("calibration step {step}: loss {loss:.6} grad {grad:.6} a {:.4}", gp.a());
            if step < total && is_stable(&records, window) {
                stopped_early_at = Some(step);
                break 'epochs;
            }
        }
    }
    let window = round_window(&gp);
    info!(
        "calibrated a = {:.4} -> window start {} (length {})",
        gp.a(),
        window.start,
        window.length
    );
    Ok(CalibOutcome {
        window,
        initial_a,
        final_a: gp.a(),
        records,
        stopped_early_at,
    })
}
