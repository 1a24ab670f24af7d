//! Exhaustive scoring of every contiguous window of a fixed length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{dense_targets, kl_objective_with_targets};
use crate::data::Batch;
use crate::error::{ClpError, Result};
use crate::eval::nll_sum;
use crate::gate::{hard_mask, PruneWindow};
use crate::model::TransformerLM;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub window: PruneWindow,
    /// Mean per-token KL against the dense model over the calibration set.
    pub kl: f64,
    /// Perplexity of the masked model on the same batches.
    pub ppl: Option<f64>,
}

/// Scores every window of length `n` with its hard mask and returns them
/// sorted by ascending KL (ties broken by start).
pub fn enumerate_windows(model: &TransformerLM, n: usize, calib: &[Batch], with_ppl: bool) -> Result<Vec<WindowScore>> {
    let num_layers = model.num_layers();
    if n > num_layers {
        return Err(ClpError::Config(format!("window length {n} exceeds {num_layers} layers")));
    }
    if calib.is_empty() {
        return Err(ClpError::Data("calibration set is empty".into()));
    }
    if n == 0 {
        return Ok(vec![WindowScore {
            window: PruneWindow::new(0, 0),
            kl: 0.0,
            ppl: None,
        }]);
    }
    let targets: Vec<Vec<Real>> = calib.iter().map(|b| dense_targets(model, b)).collect::<Result<_>>()?;
    let vocab = model.spec.vocab_size;
    let mut scores = (0..=num_layers - n)
        .into_par_iter()
        .map(|start| {
            let window = PruneWindow::new(start, n);
            let mask = hard_mask(window, num_layers)?;
            let mut kl = 0.0;
            let mut nll = 0.0;
            let mut tokens = 0usize;
            for (b, t) in calib.iter().zip(&targets) {
                kl += kl_objective_with_targets(model, &mask, b, t)?;
                if with_ppl {
                    let logits = model.forward_gated(&b.inputs, b.batch, &mask)?;
                    nll += nll_sum(logits.data(), vocab, &b.targets);
                    tokens += b.tokens();
                }
            }
            Ok(WindowScore {
                window,
                kl: kl / calib.len() as f64,
                ppl: with_ppl.then(|| (nll / tokens as f64).exp()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(|a, b| a.kl.total_cmp(&b.kl).then(a.window.start.cmp(&b.window.start)));
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub found: PruneWindow,
    pub best: PruneWindow,
    /// 1-based position of `found` in the oracle ordering.
    pub rank: usize,
    pub candidates: usize,
    /// KL of `found` minus KL of the best window.
    pub kl_gap: f64,
}

pub fn agreement_report(oracle: &[WindowScore], found: PruneWindow) -> Result<Agreement> {
    let best = oracle
        .first()
        .ok_or_else(|| ClpError::Data("oracle table is empty".into()))?;
    if found.length != best.window.length {
        return Err(ClpError::Contract(format!(
            "found window has length {} but the oracle scored length {}",
            found.length, best.window.length
        )));
    }
    let pos = oracle
        .iter()
        .position(|s| s.window == found)
        .ok_or_else(|| ClpError::Contract(format!("window {found:?} is not in the oracle table")))?;
    Ok(Agreement {
        found,
        best: best.window,
        rank: pos + 1,
        candidates: oracle.len(),
        kl_gap: oracle[pos].kl - best.kl,
    })
}

/// Oracle table as `start,n,kl,ppl` CSV (empty `ppl` when not computed),
/// optionally preceded by a `# config_hash:` comment line.
pub fn oracle_csv(scores: &[WindowScore], config_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = config_hash {
        out.push_str(&format!("# config_hash: {h}\n"));
    }
    out.push_str("start,n,kl,ppl\n");
    for s in scores {
        let ppl = s.ppl.map(|p| format!("{p:.9}")).unwrap_or_default();
        out.push_str(&format!("{},{},{:.12e},{ppl}\n", s.window.start, s.window.length, s.kl));
    }
    out
}
