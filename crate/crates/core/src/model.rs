//! Toy pre-norm decoder-only transformer with per-layer gated execution.
//!
//! Layer `i` maps `o_{i-1}` to `o_i`. A gate value `m_i` blends the layer
//! output with its input, `o_i = m_i * layer_i(o_{i-1}) + (1 - m_i) * o_{i-1}`,
//! outside the layer's own residual connections. Gates of exactly 1 or 0 run
//! or skip the layer outright, so a hard mask computes the same thing as the
//! structurally pruned model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::data::VOCAB_SIZE;
use crate::error::{ClpError, Result};
use crate::gate::LayerMask;
use crate::tensor::{hex_digest, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    /// The 12-layer reference toy model.
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ClpError::Config(format!("{name} must be at least 1")));
        }
        if self.num_layers < 2 {
            return Err(ClpError::Config(format!(
                "model needs at least 2 layers, got {}",
                self.num_layers
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ClpError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn params_per_layer(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + 2 * d * f + f + d + 4 * d
    }

    /// Parameters outside the layer stack (embeddings, final norm, head).
    pub fn shared_params(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_seq_len * d + 2 * d + d * self.vocab_size
    }

    pub fn parameter_count(&self) -> usize {
        self.shared_params() + self.num_layers * self.params_per_layer()
    }
}

/// Names of a block's tensors, relative to `layers.{i}.`.
pub const BLOCK_PARAM_NAMES: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

/// Projections that carry low-rank adapters, with their index in
/// [`BLOCK_PARAM_NAMES`].
pub const ADAPTED_PROJECTIONS: [(&str, usize); 6] = [
    ("attn.wq", 2),
    ("attn.wk", 3),
    ("attn.wv", 4),
    ("attn.wo", 5),
    ("mlp.w1", 8),
    ("mlp.w2", 10),
];

/// Additive `x @ down @ up` correction to one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub down: Tensor,
    pub up: Tensor,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// Tensors in [`BLOCK_PARAM_NAMES`] order.
    pub params: Vec<Tensor>,
    /// One adapter per entry of [`ADAPTED_PROJECTIONS`], when attached.
    pub adapters: Option<Vec<LowRankAdapter>>,
}

impl Block {
    pub fn param(&self, name: &str) -> &Tensor {
        let i = BLOCK_PARAM_NAMES
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("unknown block parameter {name}"));
        &self.params[i]
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = BLOCK_PARAM_NAMES
            .iter()
            .zip(&self.params)
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(adapters) = &self.adapters {
            for ((proj, _), a) in ADAPTED_PROJECTIONS.iter().zip(adapters) {
                out.push((format!("{proj}.lora_down"), &a.down));
                out.push((format!("{proj}.lora_up"), &a.up));
            }
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = BLOCK_PARAM_NAMES
            .iter()
            .zip(self.params.iter_mut())
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(adapters) = &mut self.adapters {
            for ((proj, _), a) in ADAPTED_PROJECTIONS.iter().zip(adapters.iter_mut()) {
                out.push((format!("{proj}.lora_down"), &mut a.down));
                out.push((format!("{proj}.lora_up"), &mut a.up));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLM {
    pub spec: ModelSpec,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gamma: Tensor,
    pub lnf_beta: Tensor,
    pub head: Tensor,
}

/// How one layer participates in a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum LayerGate {
    Run,
    Skip,
    Blend(Real),
    /// Gate value held by a one-element node on the tape.
    Learned(Var),
}

impl LayerGate {
    pub fn from_value(m: Real) -> Self {
        if m == 1.0 {
            LayerGate::Run
        } else if m == 0.0 {
            LayerGate::Skip
        } else {
            LayerGate::Blend(m)
        }
    }
}

/// Tape handles for every model tensor.
pub struct BoundModel {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    lnf_gamma: Var,
    lnf_beta: Var,
    head: Var,
    named: Vec<(String, Var)>,
}

struct BoundBlock {
    params: Vec<Var>,
    adapters: Option<Vec<(Var, Var)>>,
}

impl BoundModel {
    /// Handles in canonical parameter order.
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

impl TransformerLM {
    /// Seeded initialisation: N(0, 0.02) weights, residual output
    /// projections scaled by `1/sqrt(2L)`, unit norms and zero biases.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let std = 0.02;
        let resid_std = std / (2.0 * spec.num_layers as f64).sqrt();
        let mut normal = |shape: &[usize], sd: f64| -> Tensor {
            let dist = Normal::new(0.0, sd).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng) as Real).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let (d, f, v) = (spec.d_model, spec.d_ff, spec.vocab_size);
        let tok_emb = normal(&[v, d], std);
        let pos_emb = normal(&[spec.max_seq_len, d], std);
        let blocks = (0..spec.num_layers)
            .map(|_| Block {
                params: vec![
                    Tensor::full(&[d], 1.0),
                    Tensor::zeros(&[d]),
                    normal(&[d, d], std),
                    normal(&[d, d], std),
                    normal(&[d, d], std),
                    normal(&[d, d], resid_std),
                    Tensor::full(&[d], 1.0),
                    Tensor::zeros(&[d]),
                    normal(&[d, f], std),
                    Tensor::zeros(&[f]),
                    normal(&[f, d], resid_std),
                    Tensor::zeros(&[d]),
                ],
                adapters: None,
            })
            .collect();
        let head = normal(&[d, v], std);
        Ok(Self {
            spec: spec.clone(),
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma: Tensor::full(&[d], 1.0),
            lnf_beta: Tensor::zeros(&[d]),
            head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, block) in self.blocks.iter().enumerate() {
            out.extend(
                block
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gamma".into(), &self.lnf_gamma));
        out.push(("ln_f.beta".into(), &self.lnf_beta));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            out.extend(
                block
                    .named_tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("layers.{i}.{n}"), t)),
            );
        }
        out.push(("ln_f.gamma".into(), &mut self.lnf_gamma));
        out.push(("ln_f.beta".into(), &mut self.lnf_beta));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and values of every tensor.
    pub fn checksum(&self) -> String {
        checksum_of(self.named_parameters().into_iter())
    }

    /// Attaches zero-effect low-rank adapters (`up` is zero) to every block.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) -> Result<()> {
        if rank == 0 {
            return Err(ClpError::Config("adapter rank must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in &mut self.blocks {
            let adapters = ADAPTED_PROJECTIONS
                .iter()
                .map(|&(_, idx)| {
                    let w = &block.params[idx];
                    let (din, dout) = (w.shape()[0], w.shape()[1]);
                    let dist = Normal::new(0.0, 1.0 / (din as f64).sqrt()).expect("positive std");
                    let down = (0..din * rank).map(|_| dist.sample(&mut rng) as Real).collect();
                    LowRankAdapter {
                        down: Tensor::new(vec![din, rank], down).expect("shape"),
                        up: Tensor::zeros(&[rank, dout]),
                    }
                })
                .collect();
            block.adapters = Some(adapters);
        }
        Ok(())
    }

    /// Folds attached adapters into their projections and drops them.
    pub fn merge_adapters(&mut self) {
        for block in &mut self.blocks {
            let Some(adapters) = block.adapters.take() else { continue };
            for (&(_, idx), a) in ADAPTED_PROJECTIONS.iter().zip(&adapters) {
                let w = &mut block.params[idx];
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let r = a.rank();
                let wd = w.data_mut();
                for i in 0..din {
                    for j in 0..dout {
                        let delta: f64 = (0..r)
                            .map(|p| (a.down.data()[i * r + p] * a.up.data()[p * dout + j]) as f64)
                            .sum();
                        wd[i * dout + j] += delta as Real;
                    }
                }
            }
        }
    }

    /// Places every tensor on the tape, marking those accepted by
    /// `trainable` as gradient leaves.
    pub fn bind<'m>(&'m self, tape: &mut Tape<'m>, trainable: &dyn Fn(&str) -> bool) -> BoundModel {
        let mut named = Vec::new();
        let mut leaf = |tape: &mut Tape<'m>, name: String, t: &'m Tensor| {
            let v = tape.leaf(t, trainable(&name));
            named.push((name, v));
            v
        };
        let tok_emb = leaf(tape, "tok_emb".into(), &self.tok_emb);
        let pos_emb = leaf(tape, "pos_emb".into(), &self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, block)| {
                let params = BLOCK_PARAM_NAMES
                    .iter()
                    .zip(&block.params)
                    .map(|(n, t)| leaf(tape, format!("layers.{i}.{n}"), t))
                    .collect();
                let adapters = block.adapters.as_ref().map(|adapters| {
                    ADAPTED_PROJECTIONS
                        .iter()
                        .zip(adapters)
                        .map(|((proj, _), a)| {
                            (
                                leaf(tape, format!("layers.{i}.{proj}.lora_down"), &a.down),
                                leaf(tape, format!("layers.{i}.{proj}.lora_up"), &a.up),
                            )
                        })
                        .collect()
                });
                BoundBlock { params, adapters }
            })
            .collect();
        let lnf_gamma = leaf(tape, "ln_f.gamma".into(), &self.lnf_gamma);
        let lnf_beta = leaf(tape, "ln_f.beta".into(), &self.lnf_beta);
        let head = leaf(tape, "head".into(), &self.head);
        BoundModel {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gamma,
            lnf_beta,
            head,
            named,
        }
    }

    fn check_inputs(&self, ids: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(ClpError::Shape(format!(
                "{} token ids cannot form {batch} equal rows",
                ids.len()
            )));
        }
        let seq = ids.len() / batch;
        if seq > self.spec.max_seq_len {
            return Err(ClpError::Shape(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.spec.max_seq_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(ClpError::Data(format!(
                "token id {bad} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok(seq)
    }

    fn gates_from_mask(&self, mask: &LayerMask) -> Result<Vec<LayerGate>> {
        if mask.len() != self.num_layers() {
            return Err(ClpError::Shape(format!(
                "mask of length {} for a {}-layer model",
                mask.len(),
                self.num_layers()
            )));
        }
        if let Some(bad) = mask.values().iter().find(|&&m| !(0.0..=1.0).contains(&m)) {
            return Err(ClpError::NumericDomain(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(mask.values().iter().map(|&m| LayerGate::from_value(m as Real)).collect())
    }

    /// Residual stream `o_0..=o_L` recorded on `tape`.
    pub fn trunk_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        ids: &[u32],
        batch: usize,
        gates: &[LayerGate],
    ) -> Result<Vec<Var>> {
        let seq = self.check_inputs(ids, batch)?;
        if gates.len() != self.num_layers() {
            return Err(ClpError::Shape(format!(
                "{} gates for a {}-layer model",
                gates.len(),
                self.num_layers()
            )));
        }
        let tokens: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let tok = tape.embedding(bound.tok_emb, &tokens)?;
        let pos = tape.embedding(bound.pos_emb, &positions)?;
        let mut o = tape.add(tok, pos)?;
        let mut states = vec![o];
        for (block, gate) in bound.blocks.iter().zip(gates) {
            o = match *gate {
                LayerGate::Skip => o,
                LayerGate::Run => self.block_on_tape(tape, block, o, batch)?,
                LayerGate::Blend(m) => {
                    let y = self.block_on_tape(tape, block, o, batch)?;
                    let kept = tape.affine(y, m, 0.0);
                    let passed = tape.affine(o, 1.0 - m, 0.0);
                    tape.add(kept, passed)?
                }
                LayerGate::Learned(m) => {
                    let y = self.block_on_tape(tape, block, o, batch)?;
                    let kept = tape.scale_by(y, m)?;
                    let rest = tape.affine(m, -1.0, 1.0);
                    let passed = tape.scale_by(o, rest)?;
                    tape.add(kept, passed)?
                }
            };
            states.push(o);
        }
        Ok(states)
    }

    /// Final norm and LM head: `[rows, d] -> [rows, vocab]`.
    pub fn head_on_tape(&self, tape: &mut Tape<'_>, bound: &BoundModel, last: Var) -> Result<Var> {
        let normed = tape.layer_norm(last, bound.lnf_gamma, bound.lnf_beta)?;
        tape.matmul(normed, bound.head)
    }

    /// Flattened `[batch*seq, vocab]` logits on the tape.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<'_>,
        bound: &BoundModel,
        ids: &[u32],
        batch: usize,
        gates: &[LayerGate],
    ) -> Result<Var> {
        let states = self.trunk_on_tape(tape, bound, ids, batch, gates)?;
        self.head_on_tape(tape, bound, *states.last().expect("o_0 is always present"))
    }

    fn projection(
        &self,
        tape: &mut Tape<'_>,
        block: &BoundBlock,
        x: Var,
        slot: usize,
    ) -> Result<Var> {
        let base = tape.matmul(x, block.params[ADAPTED_PROJECTIONS[slot].1])?;
        match &block.adapters {
            Some(adapters) => {
                let (down, up) = adapters[slot];
                let low = tape.matmul(x, down)?;
                let delta = tape.matmul(low, up)?;
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }

    fn block_on_tape(&self, tape: &mut Tape<'_>, block: &BoundBlock, x: Var, batch: usize) -> Result<Var> {
        let p = &block.params;
        let h = tape.layer_norm(x, p[0], p[1])?;
        let q = self.projection(tape, block, h, 0)?;
        let k = self.projection(tape, block, h, 1)?;
        let v = self.projection(tape, block, h, 2)?;
        let att = tape.causal_attention(q, k, v, batch, self.spec.n_heads)?;
        let att = self.projection(tape, block, att, 3)?;
        let x = tape.add(x, att)?;
        let h = tape.layer_norm(x, p[6], p[7])?;
        let up = self.projection(tape, block, h, 4)?;
        let up = tape.add_bias(up, p[9])?;
        let act = tape.gelu(up);
        let down = self.projection(tape, block, act, 5)?;
        let down = tape.add_bias(down, p[11])?;
        tape.add(x, down)
    }

    fn run(&self, ids: &[u32], batch: usize, gates: &[LayerGate]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &|_| false);
        let logits = self.logits_on_tape(&mut tape, &bound, ids, batch, gates)?;
        let seq = ids.len() / batch;
        tape.value(logits)
            .clone()
            .reshape(&[batch, seq, self.spec.vocab_size])
    }

    /// Logits `[batch, seq, vocab]` for row-major token ids.
    pub fn forward(&self, ids: &[u32], batch: usize) -> Result<Tensor> {
        self.run(ids, batch, &vec![LayerGate::Run; self.num_layers()])
    }

    /// Forward pass with every layer blended by its mask value.
    pub fn forward_gated(&self, ids: &[u32], batch: usize, mask: &LayerMask) -> Result<Tensor> {
        let gates = self.gates_from_mask(mask)?;
        self.run(ids, batch, &gates)
    }

    /// Residual stream `o_0..=o_L`, each `[batch*seq, d_model]`.
    pub fn hidden_states(&self, ids: &[u32], batch: usize) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &|_| false);
        let gates = vec![LayerGate::Run; self.num_layers()];
        let states = self.trunk_on_tape(&mut tape, &bound, ids, batch, &gates)?;
        Ok(states.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Applies the final norm and head to a `[rows, d_model]` activation.
    pub fn logits_from_hidden(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, &|_| false);
        let h = tape.constant(hidden);
        let logits = self.head_on_tape(&mut tape, &bound, h)?;
        Ok(tape.value(logits).clone())
    }
}

pub(crate) fn checksum_of<'a>(tensors: impl Iterator<Item = (String, &'a Tensor)>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        t.digest_into(&mut hasher);
    }
    hex_digest(hasher)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_spec() -> ModelSpec {
        ModelSpec {
            num_layers: 4,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 32,
            seed: 11,
        }
    }

    fn ids(batch: usize, seq: usize, salt: u32) -> Vec<u32> {
        (0..batch * seq).map(|i| (i as u32 * 37 + salt * 11) % 256).collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerLM::init(&tiny_spec()).unwrap();
        let b = TransformerLM::init(&tiny_spec()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut other = tiny_spec();
        other.seed = 12;
        assert_ne!(a.checksum(), TransformerLM::init(&other).unwrap().checksum());
    }

    #[test]
    fn reference_spec_is_valid() {
        let spec = ModelSpec::default();
        assert_eq!((spec.num_layers, spec.d_model, spec.n_heads, spec.d_ff), (12, 128, 4, 256));
        spec.validate().unwrap();
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = tiny_spec();
        spec.d_model = 5;
        spec.n_heads = 2;
        assert!(matches!(TransformerLM::init(&spec), Err(ClpError::Config(_))));
        let mut spec = tiny_spec();
        spec.num_layers = 1;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.d_ff = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn parameter_count_follows_spec() {
        let spec = tiny_spec();
        let m = TransformerLM::init(&spec).unwrap();
        assert_eq!(m.parameter_count(), spec.parameter_count());
    }

    #[test]
    fn logits_shape() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let out = m.forward(&ids(2, 16, 0), 2).unwrap();
        assert_eq!(out.shape(), &[2, 16, VOCAB_SIZE]);
    }

    #[test]
    fn oversize_sequence_and_bad_ids_are_rejected() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        assert!(matches!(m.forward(&ids(1, 33, 0), 1), Err(ClpError::Shape(_))));
        assert!(matches!(m.forward(&[300, 1], 1), Err(ClpError::Data(_))));
        assert!(m.forward(&[1, 2, 3], 2).is_err());
    }

    #[test]
    fn causal_under_any_mask() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let base = ids(1, 12, 1);
        let t = 7;
        let mut changed = base.clone();
        changed[t] = (changed[t] + 100) % 256;
        let masks = [
            LayerMask::ones(4),
            LayerMask::soft(vec![0.9, 0.2, 0.5, 1.0]).unwrap(),
        ];
        for mask in &masks {
            let a = m.forward_gated(&base, 1, mask).unwrap();
            let b = m.forward_gated(&changed, 1, mask).unwrap();
            let v = VOCAB_SIZE;
            assert_eq!(&a.data()[..t * v], &b.data()[..t * v]);
            assert_ne!(&a.data()[t * v..(t + 1) * v], &b.data()[t * v..(t + 1) * v]);
        }
    }

    #[test]
    fn all_ones_mask_is_plain_forward() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let x = ids(2, 8, 3);
        assert_eq!(
            m.forward(&x, 2).unwrap(),
            m.forward_gated(&x, 2, &LayerMask::ones(4)).unwrap()
        );
    }

    #[test]
    fn all_zeros_mask_skips_every_layer() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let x = ids(1, 8, 4);
        let gated = m.forward_gated(&x, 1, &LayerMask::hard_from_values(vec![0.0; 4]).unwrap()).unwrap();
        let o0 = &m.hidden_states(&x, 1).unwrap()[0];
        let direct = m.logits_from_hidden(o0).unwrap();
        assert_eq!(gated.data(), direct.data());
    }

    #[test]
    fn mask_length_mismatch() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        assert!(matches!(
            m.forward_gated(&ids(1, 4, 0), 1, &LayerMask::ones(3)),
            Err(ClpError::Shape(_))
        ));
    }

    #[test]
    fn hidden_states_line_up_with_forward() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let x = ids(2, 6, 5);
        let states = m.hidden_states(&x, 2).unwrap();
        assert_eq!(states.len(), 5);
        // o_0 is the token embedding plus position embedding
        let d = 16;
        for (r, &tok) in x.iter().enumerate() {
            let pos = r % 6;
            for j in 0..d {
                let want = m.tok_emb.data()[tok as usize * d + j] + m.pos_emb.data()[pos * d + j];
                assert_eq!(states[0].data()[r * d + j], want);
            }
        }
        let via_head = m.logits_from_hidden(states.last().unwrap()).unwrap();
        assert_eq!(via_head.data(), m.forward(&x, 2).unwrap().data());
    }

    #[test]
    fn zero_adapters_do_not_change_outputs_and_merge_cleanly() {
        let m = TransformerLM::init(&tiny_spec()).unwrap();
        let x = ids(1, 8, 6);
        let mut adapted = m.clone();
        adapted.attach_adapters(2, 0).unwrap();
        let base = m.forward(&x, 1).unwrap();
        assert!(adapted.forward(&x, 1).unwrap().max_abs_diff(&base) < 1e-12);
        // give the adapters some effect, then check merging preserves it
        for block in &mut adapted.blocks {
            for a in block.adapters.as_mut().unwrap() {
                for (i, v) in a.up.data_mut().iter_mut().enumerate() {
                    *v = 0.01 * ((i % 7) as Real - 3.0);
                }
            }
        }
        let with = adapted.forward(&x, 1).unwrap();
        let mut merged = adapted.clone();
        merged.merge_adapters();
        assert!(merged.blocks.iter().all(|b| b.adapters.is_none()));
        assert!(merged.forward(&x, 1).unwrap().max_abs_diff(&with) < 1e-9);
    }
}
