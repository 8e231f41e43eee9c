//! Synthetic expressive-sequence task.
//!
//! Each utterance has a style label, a content sequence, and an input context
//! whose tokens hint at the style. The target speech token interleaves both
//! channels: `y_j = c_j · S + style`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n_styles: usize,
    pub content_vocab: usize,
    pub context_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub context_len: usize,
    pub style_noise: f64,
    pub hidden_dim: usize,
    pub intent_dim: usize,
    pub embed_dim: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_styles: 4,
            content_vocab: 16,
            context_vocab: 12,
            min_len: 4,
            max_len: 8,
            context_len: 6,
            style_noise: 0.1,
            hidden_dim: 32,
            intent_dim: 8,
            embed_dim: 16,
        }
    }
}

impl TaskConfig {
    pub fn speech_vocab(&self) -> usize {
        self.content_vocab * self.n_styles
    }

    /// Style that context token `x` points at.
    pub fn context_style(&self, x: usize) -> usize {
        x % self.n_styles
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_styles", self.n_styles),
            ("content_vocab", self.content_vocab),
            ("context_vocab", self.context_vocab),
            ("min_len", self.min_len),
            ("context_len", self.context_len),
            ("hidden_dim", self.hidden_dim),
            ("intent_dim", self.intent_dim),
            ("embed_dim", self.embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!(
                "task config: {name} must be positive"
            )));
        }
        if self.n_styles < 2 {
            return Err(Error::contract("task config: need at least two styles"));
        }
        if self.max_len < self.min_len {
            return Err(Error::contract(format!(
                "task config: length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if self.context_vocab % self.n_styles != 0 {
            return Err(Error::contract(format!(
                "task config: context_vocab {} must be a multiple of n_styles {}",
                self.context_vocab, self.n_styles
            )));
        }
        if !(0.0..0.5).contains(&self.style_noise) {
            return Err(Error::contract(format!(
                "task config: style_noise {} must be in [0, 0.5)",
                self.style_noise
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: u64,
    pub style: usize,
    pub content: Vec<usize>,
    pub context: Vec<usize>,
    pub target_speech: Vec<usize>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.content.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content.is_empty()
    }
}

pub fn speech_token(content: usize, style: usize, n_styles: usize) -> usize {
    content * n_styles + style
}

pub fn decode_content(tokens: &[usize], n_styles: usize) -> Vec<usize> {
    tokens.iter().map(|y| y / n_styles).collect()
}

pub fn decode_style(tokens: &[usize], n_styles: usize) -> Vec<usize> {
    tokens.iter().map(|y| y % n_styles).collect()
}

/// Plurality vote over context token styles; ties go to the lowest style.
pub fn majority_style(cfg: &TaskConfig, context: &[usize]) -> usize {
    let mut counts = vec![0usize; cfg.n_styles];
    for &x in context {
        counts[cfg.context_style(x)] += 1;
    }
    let best = *counts.iter().max().expect("n_styles > 0");
    counts.iter().position(|&c| c == best).expect("max exists")
}

fn generate_one(cfg: &TaskConfig, id: u64, rng: &mut StreamRng) -> Utterance {
    let s = cfg.n_styles;
    let style = rng.below(s);
    let n = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
    let content: Vec<usize> = (0..n).map(|_| rng.below(cfg.content_vocab)).collect();
    let per_style = cfg.context_vocab / s;
    let context = (0..cfg.context_len)
        .map(|_| {
            // A corrupted token points at one of the other styles.
            let token_style = if rng.uniform() < cfg.style_noise {
                (style + 1 + rng.below(s - 1)) % s
            } else {
                style
            };
            token_style + s * rng.below(per_style)
        })
        .collect();
    let target_speech = content.iter().map(|&c| speech_token(c, style, s)).collect();
    Utterance {
        id,
        style,
        content,
        context,
        target_speech,
    }
}

/// Deterministic corpus of `n` utterances; utterance `i` draws from its own stream.
pub fn generate_corpus(cfg: &TaskConfig, n: usize, seed: u64) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::contract("generate_corpus: n must be at least 1"));
    }
    let root = StreamRng::new(seed, "corpus");
    Ok((0..n as u64)
        .map(|i| generate_one(cfg, i, &mut root.fork(i)))
        .collect())
}

/// Fixed 80/20 split: returns (train, held-out) index lists.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = StreamRng::new(seed, "split").permutation(n);
    let n_train = (n * 4) / 5;
    let mut train = perm[..n_train].to_vec();
    let mut test = perm[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Corpus split into training and held-out utterances.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

impl Dataset {
    pub fn from_corpus(corpus: &[Utterance], seed: u64) -> Self {
        let (tr, te) = holdout_split(corpus.len(), seed);
        Dataset {
            train: tr.iter().map(|&i| corpus[i].clone()).collect(),
            heldout: te.iter().map(|&i| corpus[i].clone()).collect(),
        }
    }
}

pub fn write_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for u in corpus {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
