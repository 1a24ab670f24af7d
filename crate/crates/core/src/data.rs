//! Byte-level corpora, calibration sampling and batching.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ClpError, Result};

/// Raw byte values occupy ids `0..256`.
pub const BYTE_VOCAB: usize = 256;
pub const BOS_ID: u32 = 256;
pub const EOS_ID: u32 = 257;
/// Byte values plus the two reserved specials.
pub const VOCAB_SIZE: usize = BYTE_VOCAB + 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    source: Option<PathBuf>,
    tokens: Vec<u32>,
}

impl Corpus {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Splits off the trailing `fraction` of tokens as a held-out corpus.
    pub fn split_tail(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(ClpError::Config(format!("split fraction {fraction} not in [0, 1)")));
        }
        let cut = self.len() - ((self.len() as f64 * fraction).round() as usize);
        if cut == 0 || cut == self.len() {
            return Err(ClpError::Data(format!(
                "corpus of {} tokens too small to split at {fraction}",
                self.len()
            )));
        }
        let head = Corpus {
            source: self.source.clone(),
            tokens: self.tokens[..cut].to_vec(),
        };
        let tail = Corpus {
            source: self.source.clone(),
            tokens: self.tokens[cut..].to_vec(),
        };
        Ok((head, tail))
    }
}

/// Maps every byte to its own id.
pub fn tokenize(bytes: &[u8]) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(ClpError::Data("cannot tokenize an empty byte stream".into()));
    }
    Ok(Corpus {
        source: None,
        tokens: bytes.iter().map(|&b| b as u32).collect(),
    })
}

pub fn tokenize_file(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| ClpError::io(path, e))?;
    if bytes.is_empty() {
        return Err(ClpError::Data(format!("{} is empty", path.display())));
    }
    let mut corpus = tokenize(&bytes)?;
    corpus.source = Some(path.to_path_buf());
    Ok(corpus)
}

/// Inverse of [`tokenize`]; special ids carry no bytes and are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_VOCAB)
        .map(|&t| t as u8)
        .collect()
}

/// `batch` sequences of `seq_len` inputs with next-token targets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Builds a batch from windows of `seq_len + 1` tokens each.
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [u32]>, seq_len: usize) -> Self {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut batch = 0;
        for w in windows {
            assert_eq!(w.len(), seq_len + 1, "window must hold seq_len + 1 tokens");
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
            batch += 1;
        }
        Self {
            inputs,
            targets,
            batch,
            seq_len,
        }
    }

    pub fn input_ids(&self) -> Vec<usize> {
        self.inputs.iter().map(|&t| t as usize).collect()
    }

    pub fn target_ids(&self) -> Vec<usize> {
        self.targets.iter().map(|&t| t as usize).collect()
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

fn check_window_fits(corpus: &Corpus, seq_len: usize) -> Result<usize> {
    if seq_len == 0 {
        return Err(ClpError::Config("sequence length must be at least 1".into()));
    }
    let needed = seq_len + 1;
    if corpus.len() < needed {
        return Err(ClpError::Data(format!(
            "corpus has {} tokens; sequence length {seq_len} needs at least {needed}",
            corpus.len()
        )));
    }
    Ok(corpus.len() - needed + 1)
}

/// Start offsets of `count` windows drawn uniformly from every valid start.
pub fn sample_window_starts(corpus: &Corpus, count: usize, seq_len: usize, seed: u64) -> Result<Vec<usize>> {
    let starts = check_window_fits(corpus, seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| rng.random_range(0..starts)).collect())
}

/// Draws `count` random windows and groups them into batches of
/// `batch_size` (the last batch may be short).
pub fn sample_calibration(
    corpus: &Corpus,
    count: usize,
    seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(ClpError::Config("batch size must be at least 1".into()));
    }
    let starts = sample_window_starts(corpus, count, seq_len, seed)?;
    let tokens = corpus.tokens();
    Ok(starts
        .chunks(batch_size)
        .map(|chunk| Batch::from_windows(chunk.iter().map(|&s| &tokens[s..s + seq_len + 1]), seq_len))
        .collect())
}

/// Cuts the corpus into consecutive non-overlapping windows and returns one
/// epoch of shuffled batches.
pub fn epoch_batches(corpus: &Corpus, seq_len: usize, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(ClpError::Config("batch size must be at least 1".into()));
    }
    check_window_fits(corpus, seq_len)?;
    let tokens = corpus.tokens();
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * seq_len)
        .take_while(|s| s + seq_len < tokens.len())
        .collect();
    starts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(starts
        .chunks(batch_size)
        .map(|chunk| Batch::from_windows(chunk.iter().map(|&s| &tokens[s..s + seq_len + 1]), seq_len))
        .collect())
}

/// Deterministic synthetic text for demos and tests.
///
/// Lines mix four kinds of content so that a small model has work for
/// several layers: sentences with subject-verb agreement across a relative
/// clause, copy lines (`key w is w.`), two-digit sums and item counts.
pub fn synthetic_text(seed: u64, target_bytes: usize) -> String {
    const NOUNS: &[(&str, &str)] = &[
        ("model", "models"),
        ("engine", "engines"),
        ("student", "students"),
        ("river", "rivers"),
        ("reader", "readers"),
        ("compiler", "compilers"),
        ("garden", "gardens"),
        ("market", "markets"),
        ("teacher", "teachers"),
        ("signal", "signals"),
    ];
    // (singular, plural) verb forms
    const VERBS: &[(&str, &str)] = &[
        ("reads", "read"),
        ("builds", "build"),
        ("follows", "follow"),
        ("carries", "carry"),
        ("finds", "find"),
        ("changes", "change"),
        ("watches", "watch"),
        ("repairs", "repair"),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noun = |rng: &mut ChaCha8Rng, plural: bool| {
        let (s, p) = NOUNS[rng.random_range(0..NOUNS.len())];
        if plural { p } else { s }
    };
    let verb = |rng: &mut ChaCha8Rng, plural: bool| {
        let (s, p) = VERBS[rng.random_range(0..VERBS.len())];
        if plural { p } else { s }
    };
    let letters = |rng: &mut ChaCha8Rng, n: usize| -> Vec<char> {
        (0..n).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
    };
    let mut out = String::with_capacity(target_bytes + 64);
    while out.len() < target_bytes {
        match rng.random_range(0..4) {
            0 => {
                let plural = rng.random_bool(0.5);
                out.push_str("the ");
                out.push_str(noun(&mut rng, plural));
                if rng.random_bool(0.6) {
                    let inner = rng.random_bool(0.5);
                    out.push_str(" that the ");
                    out.push_str(noun(&mut rng, inner));
                    out.push(' ');
                    out.push_str(verb(&mut rng, inner));
                }
                out.push(' ');
                out.push_str(verb(&mut rng, plural));
                out.push_str(" the ");
                let object = rng.random_bool(0.5);
                out.push_str(noun(&mut rng, object));
                out.push_str(".\n");
            }
            1 => {
                let n = rng.random_range(3..7);
                let w: String = letters(&mut rng, n).into_iter().collect();
                out.push_str(&format!("key {w} is {w}.\n"));
            }
            2 => {
                let a = rng.random_range(0..100);
                let b = rng.random_range(0..100);
                out.push_str(&format!("{a} + {b} = {}.\n", a + b));
            }
            _ => {
                let n = rng.random_range(1..8);
                let items: Vec<String> = letters(&mut rng, n).into_iter().map(String::from).collect();
                out.push_str(&format!("count {} -> {n}.\n", items.join(" ")));
            }
        }
    }
    out
}
