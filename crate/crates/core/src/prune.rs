//! Structural removal of a contiguous layer window.

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};
use crate::gate::PruneWindow;
use crate::model::TransformerLM;

/// Provenance of a pruned model. Endpoint indices use the parent's layer
/// numbering and are absent when the window touches that end of the stack.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedModelMeta {
    pub parent_checksum: String,
    pub window: PruneWindow,
    pub parent_layers: usize,
    pub resulting_layers: usize,
    /// Surviving layer just before the window (`start - 1`).
    pub prev: Option<usize>,
    /// Surviving layer just after the window (`start + length`).
    pub next: Option<usize>,
}

impl PrunedModelMeta {
    /// Indices of the cut endpoints in the pruned model's numbering.
    pub fn endpoints_after_pruning(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(p) = self.prev {
            out.push(p);
        }
        if self.next.is_some() {
            out.push(self.window.start);
        }
        out
    }
}

/// Drops layers `[start, start + length)`; everything else is copied
/// unchanged and the remaining layers are renumbered contiguously.
pub fn prune(model: &TransformerLM, w: PruneWindow) -> Result<(TransformerLM, PrunedModelMeta)> {
    let parent_layers = model.num_layers();
    w.validate(parent_layers)?;
    let mut spec = model.spec.clone();
    spec.num_layers = parent_layers - w.length;
    spec.validate().map_err(|e| {
        ClpError::Config(format!(
            "removing {} of {parent_layers} layers leaves an invalid model: {e}",
            w.length
        ))
    })?;
    let blocks = model
        .blocks
        .iter()
        .enumerate()
        .filter(|(i, _)| !w.contains(*i))
        .map(|(_, b)| b.clone())
        .collect();
    let pruned = TransformerLM {
        spec,
        tok_emb: model.tok_emb.clone(),
        pos_emb: model.pos_emb.clone(),
        blocks,
        lnf_gamma: model.lnf_gamma.clone(),
        lnf_beta: model.lnf_beta.clone(),
        head: model.head.clone(),
    };
    let meta = PrunedModelMeta {
        parent_checksum: model.checksum(),
        window: w,
        parent_layers,
        resulting_layers: pruned.num_layers(),
        prev: w.start.checked_sub(1),
        next: (w.end() < parent_layers).then_some(w.end()),
    };
    Ok((pruned, meta))
}
