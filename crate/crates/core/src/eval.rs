//! Perplexity, linear CKA between layer activations, and generation
//! throughput.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Corpus};
use crate::error::{ClpError, Result};
use crate::model::TransformerLM;
use crate::tensor::{gemm, MatRef, Real, Tensor, REAL_DTYPE};

/// At most this many token positions are pooled per CKA matrix.
pub const CKA_MAX_SAMPLES: usize = 4096;

/// Sum of next-token negative log-likelihoods for `[rows, vocab]` logits.
pub(crate) fn nll_sum(logits: &[Real], vocab: usize, targets: &[u32]) -> f64 {
    logits
        .chunks(vocab)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().fold(Real::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            max + sum.ln() - row[t as usize] as f64
        })
        .sum()
}

/// Evaluation chunks covering every next-token target of `corpus` exactly
/// once: full windows of `seq_len` grouped by `batch_size`, then the
/// leftover tail as its own single-row batch.
pub fn eval_batches(corpus: &Corpus, seq_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if seq_len == 0 || batch_size == 0 {
        return Err(ClpError::Config("sequence length and batch size must be at least 1".into()));
    }
    let tokens = corpus.tokens();
    if tokens.len() < 2 {
        return Err(ClpError::Data(format!(
            "evaluation split has {} tokens; at least 2 are needed",
            tokens.len()
        )));
    }
    let full = (tokens.len() - 1) / seq_len;
    let mut batches: Vec<Batch> = (0..full)
        .collect::<Vec<_>>()
        .chunks(batch_size)
        .map(|chunk| {
            Batch::from_windows(
                chunk.iter().map(|&w| &tokens[w * seq_len..w * seq_len + seq_len + 1]),
                seq_len,
            )
        })
        .collect();
    let covered = full * seq_len;
    let rest = tokens.len() - 1 - covered;
    if rest > 0 {
        batches.push(Batch::from_windows([&tokens[covered..]], rest));
    }
    Ok(batches)
}

/// Mean next-token cross-entropy (nats) over an evaluation split.
pub fn mean_cross_entropy(model: &TransformerLM, corpus: &Corpus, seq_len: usize, batch_size: usize) -> Result<f64> {
    let batches = eval_batches(corpus, seq_len, batch_size)?;
    let vocab = model.spec.vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    for b in &batches {
        let logits = model.forward(&b.inputs, b.batch)?;
        total += nll_sum(logits.data(), vocab, &b.targets);
        count += b.tokens();
    }
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(ClpError::NumericDomain(format!("non-finite evaluation loss {mean}")));
    }
    Ok(mean)
}

/// `exp` of the mean next-token cross-entropy.
pub fn perplexity(model: &TransformerLM, corpus: &Corpus, seq_len: usize, batch_size: usize) -> Result<f64> {
    Ok(mean_cross_entropy(model, corpus, seq_len, batch_size)?.exp())
}

/// Column-centred copy of a `[samples, features]` matrix.
fn centred(x: &Tensor) -> Result<Vec<Real>> {
    if x.shape().len() != 2 {
        return Err(ClpError::Shape(format!("CKA expects a matrix, got shape {:?}", x.shape())));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j] as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= mean as Real;
        }
    }
    Ok(out)
}

/// `||Aᵀ B||_F²` for row-aligned matrices.
fn cross_norm2(a: &[Real], da: usize, b: &[Real], db: usize, n: usize) -> f64 {
    let mut prod = vec![0.0; da * db];
    gemm(1.0, MatRef::new(a, n, da).t(), MatRef::new(b, n, db), 0.0, &mut prod, db);
    prod.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

struct CentredActs {
    data: Vec<Real>,
    dim: usize,
    self_norm: f64,
}

fn prepare(x: &Tensor) -> Result<CentredActs> {
    let data = centred(x)?;
    let (n, dim) = (x.shape()[0], x.shape()[1]);
    let self_norm = cross_norm2(&data, dim, &data, dim, n).sqrt();
    if !(self_norm > 0.0) || !self_norm.is_finite() {
        return Err(ClpError::NumericDomain(
            "CKA is undefined for activations with zero variance".into(),
        ));
    }
    Ok(CentredActs { data, dim, self_norm })
}

fn cka_prepared(x: &CentredActs, y: &CentredActs, n: usize) -> f64 {
    cross_norm2(&y.data, y.dim, &x.data, x.dim, n) / (x.self_norm * y.self_norm)
}

/// Linear CKA between two activation matrices with one row per sample.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(ClpError::Shape(format!(
            "CKA needs matrices with equal sample counts, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.shape()[0];
    Ok(cka_prepared(&prepare(x)?, &prepare(y)?, n))
}

/// Symmetric matrix of CKA scores between residual-stream states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub values: Vec<Vec<f64>>,
    pub samples: usize,
}

impl CkaMatrix {
    pub fn size(&self) -> usize {
        self.values.len()
    }

    /// Mean CKA between consecutive states `o_i`, `o_{i+1}`.
    pub fn mean_adjacent(&self) -> f64 {
        let n = self.size();
        (0..n - 1).map(|i| self.values[i][i + 1]).sum::<f64>() / (n - 1) as f64
    }

    /// Grid with a header row and column of state indices.
    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::from("state");
        for j in 0..n {
            out.push_str(&format!(",o{j}"));
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&format!("o{i}"));
            for v in row {
                out.push_str(&format!(",{v:.9}"));
            }
            out.push('\n');
        }
        out
    }
}

/// CKA between every pair of states `o_0..=o_L`, pooling token positions
/// from `batches` in order up to [`CKA_MAX_SAMPLES`].
pub fn cka_matrix(model: &TransformerLM, batches: &[Batch]) -> Result<CkaMatrix> {
    let d = model.spec.d_model;
    let states = model.num_layers() + 1;
    let mut pooled: Vec<Vec<Real>> = vec![Vec::new(); states];
    let mut samples = 0;
    for b in batches {
        if samples >= CKA_MAX_SAMPLES {
            break;
        }
        let hidden = model.hidden_states(&b.inputs, b.batch)?;
        let take = (CKA_MAX_SAMPLES - samples).min(b.tokens());
        for (dst, h) in pooled.iter_mut().zip(&hidden) {
            dst.extend_from_slice(&h.data()[..take * d]);
        }
        samples += take;
    }
    if samples < 2 {
        return Err(ClpError::Data("CKA needs at least two token positions".into()));
    }
    let prepared = pooled
        .into_iter()
        .map(|v| prepare(&Tensor::new(vec![samples, d], v)?))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![vec![0.0; states]; states];
    for i in 0..states {
        for j in i..states {
            let v = cka_prepared(&prepared[i], &prepared[j], samples);
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    Ok(CkaMatrix { values, samples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            prompt_len: 32,
            gen_len: 32,
            warmup: 1,
            repetitions: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Median generated tokens per second.
    pub tokens_per_sec: f64,
    pub samples: Vec<f64>,
    pub config: ThroughputConfig,
    pub num_layers: usize,
    pub dtype: String,
    pub threads: usize,
}

/// Greedy generation of `gen_len` tokens for `batch` prompts, timed.
/// Returns generated tokens (row-major) and elapsed seconds.
fn generate(model: &TransformerLM, prompts: &[u32], cfg: &ThroughputConfig) -> Result<(Vec<u32>, f64)> {
    let vocab = model.spec.vocab_size;
    let mut rows: Vec<Vec<u32>> = prompts.chunks(cfg.prompt_len).map(|c| c.to_vec()).collect();
    let started = Instant::now();
    for _ in 0..cfg.gen_len {
        let seq = rows[0].len();
        let ids: Vec<u32> = rows.iter().flatten().copied().collect();
        let logits = model.forward(&ids, cfg.batch)?;
        for (b, row) in rows.iter_mut().enumerate() {
            let last = &logits.data()[(b * seq + seq - 1) * vocab..(b * seq + seq) * vocab];
            let next = last
                .iter()
                .enumerate()
                .fold((0, Real::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            row.push(next as u32);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let generated = rows.into_iter().flat_map(|r| r[cfg.prompt_len..].to_vec()).collect();
    Ok((generated, elapsed))
}

/// Median tokens/sec of greedy generation over `repetitions` timed runs,
/// after `warmup` untimed ones, on a single worker thread.
pub fn throughput(model: &TransformerLM, prompts: &[u32], cfg: &ThroughputConfig) -> Result<Throughput> {
    if cfg.batch == 0 || cfg.prompt_len == 0 || cfg.gen_len == 0 || cfg.repetitions == 0 {
        return Err(ClpError::Config(
            "throughput batch, prompt, generation length and repetitions must be positive".into(),
        ));
    }
    if prompts.len() != cfg.batch * cfg.prompt_len {
        return Err(ClpError::Shape(format!(
            "{} prompt tokens for batch {} of length {}",
            prompts.len(),
            cfg.batch,
            cfg.prompt_len
        )));
    }
    if cfg.prompt_len + cfg.gen_len > model.spec.max_seq_len {
        return Err(ClpError::Config(format!(
            "prompt plus generation ({}) exceeds max_seq_len {}",
            cfg.prompt_len + cfg.gen_len,
            model.spec.max_seq_len
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| ClpError::Config(format!("cannot build benchmark thread pool: {e}")))?;
    let samples = pool.install(|| -> Result<Vec<f64>> {
        for _ in 0..cfg.warmup {
            generate(model, prompts, cfg)?;
        }
        (0..cfg.repetitions)
            .map(|_| {
                let (_, secs) = generate(model, prompts, cfg)?;
                Ok((cfg.batch * cfg.gen_len) as f64 / secs.max(1e-12))
            })
            .collect()
    })?;
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok(Throughput {
        tokens_per_sec: median,
        samples,
        config: cfg.clone(),
        num_layers: model.num_layers(),
        dtype: REAL_DTYPE.to_string(),
        threads: 1,
    })
}

/// Quality summary of one model, written as JSON by the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model_checksum: String,
    pub num_layers: usize,
    pub ppl: f64,
    pub dense_ppl: f64,
    /// `dense_ppl / ppl`: the pruned model's score relative to the dense one,
    /// scoring a model by inverse perplexity.
    pub retention: f64,
    pub cka: CkaMatrix,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub throughput: Option<Throughput>,
}

/// Score ratio of a pruned model against its dense parent.
pub fn retention(dense_ppl: f64, ppl: f64) -> f64 {
    dense_ppl / ppl
}
