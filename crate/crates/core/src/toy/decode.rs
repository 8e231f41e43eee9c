//! Autoregressive decoding and teacher-forced rescoring.

use serde::{Deserialize, Serialize};

use super::model::{argmax, SeqInput, ToyModel};
use super::task::{decode_content, Utterance};
use crate::error::{Error, Result};
use crate::grad::{DenseArray, Graph};
use crate::reward::RubricScore;
use crate::rng::StreamRng;
use crate::vib::SampleMode;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    /// Temperature sampling; a temperature of 0 decodes greedily.
    Sample {
        temperature: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    pub content: Vec<usize>,
    /// Per-token log-probabilities under the decoding model at temperature 1.
    pub logp: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<RubricScore>,
}

impl Rollout {
    pub fn from_tokens(tokens: Vec<usize>, logp: Vec<f64>, n_styles: usize) -> Result<Self> {
        if tokens.len() != logp.len() {
            return Err(Error::contract(format!(
                "rollout: {} tokens but {} log-probs",
                tokens.len(),
                logp.len()
            )));
        }
        Ok(Rollout {
            content: decode_content(&tokens, n_styles),
            tokens,
            logp,
            score: None,
        })
    }

    pub fn total_logp(&self) -> f64 {
        self.logp.iter().sum()
    }

    pub fn reward(&self) -> Option<f64> {
        self.score.map(|s| s.reward)
    }
}

fn pick_token(lp: &[f64], mode: DecodeMode, rng: &mut StreamRng) -> Result<usize> {
    match mode {
        DecodeMode::Greedy => Ok(argmax(lp)),
        DecodeMode::Sample { temperature } if temperature == 0.0 => Ok(argmax(lp)),
        DecodeMode::Sample { temperature } => {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::contract(format!(
                    "decode: temperature {temperature} must be >= 0"
                )));
            }
            let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = lp.iter().map(|v| ((v - m) / temperature).exp()).collect();
            Ok(rng.categorical(&w))
        }
    }
}

/// Decodes `k` rollouts of one utterance in lockstep. Rollout `j` samples
/// from `rng.fork(j)`, so results do not depend on `k`.
pub fn decode_many(
    model: &ToyModel,
    utt: &Utterance,
    text: &[usize],
    mode: DecodeMode,
    k: usize,
    rng: &StreamRng,
) -> Result<Vec<Rollout>> {
    if k == 0 {
        return Err(Error::contract("decode: need at least one rollout"));
    }
    let seq = SeqInput {
        utt,
        text,
        speech: &utt.target_speech,
    };
    let mut g = Graph::new();
    let mut unused = rng.substream("unused");
    let feats = model.features(&mut g, &[seq], SampleMode::InferMean, &mut unused, &|_| {
        false
    })?;
    let (f, r) = (g.value(feats.f).clone(), g.value(feats.r).clone());
    let n = utt.len();
    let mut streams: Vec<StreamRng> = (0..k as u64).map(|j| rng.fork(j)).collect();
    let mut tokens = vec![Vec::with_capacity(n); k];
    let mut logp = vec![Vec::with_capacity(n); k];
    for t in 0..n {
        let mut g = Graph::new();
        let fr = g.constant(repeat_row(&f, t, k)?);
        let rr = g.constant(repeat_row(&r, t, k)?);
        let prev: Vec<usize> = tokens
            .iter()
            .map(|ts: &Vec<usize>| ts.last().copied().unwrap_or(model.bos()))
            .collect();
        let lp = model.head_log_probs(&mut g, fr, rr, &prev, &|_| false)?;
        let lp = g.value(lp);
        for j in 0..k {
            let row = lp.row(j);
            let y = pick_token(row, mode, &mut streams[j])?;
            tokens[j].push(y);
            logp[j].push(row[y]);
        }
    }
    tokens
        .into_iter()
        .zip(logp)
        .map(|(t, l)| Rollout::from_tokens(t, l, model.task.n_styles))
        .collect()
}

pub fn decode_speech(
    model: &ToyModel,
    utt: &Utterance,
    text: &[usize],
    mode: DecodeMode,
    rng: &StreamRng,
) -> Result<Rollout> {
    Ok(decode_many(model, utt, text, mode, 1, rng)?.remove(0))
}

fn repeat_row(a: &DenseArray, row: usize, k: usize) -> Result<DenseArray> {
    let r = a.row(row);
    DenseArray::matrix(k, r.len(), r.repeat(k))
}

/// Teacher-forced per-token log-probabilities of `tokens` with infer-mean intents.
pub fn rescore(
    model: &ToyModel,
    utt: &Utterance,
    text: &[usize],
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let seq = SeqInput {
        utt,
        text,
        speech: tokens,
    };
    let mut g = Graph::new();
    let mut unused = StreamRng::new(0, "unused");
    let feats = model.features(&mut g, &[seq], SampleMode::InferMean, &mut unused, &|_| {
        false
    })?;
    let lp = model.speech_token_log_probs(&mut g, &feats, &[seq], &|_| false)?;
    Ok(g.value(lp).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionStrategy;
    use crate::toy::model::{GroundingMode, ModelConfig};
    use crate::toy::task::{generate_corpus, TaskConfig};

    fn jittered(strategy: FusionStrategy, grounding: GroundingMode) -> ToyModel {
        let mut m = ToyModel::new(
            TaskConfig::default(),
            ModelConfig::default(),
            strategy,
            grounding,
            &StreamRng::new(4, "model"),
        )
        .unwrap();
        let mut r = StreamRng::new(5, "jitter");
        for (n, v) in m.params.iter_mut() {
            if n.starts_with("head.") || n.starts_with("fusion.") {
                for x in v.data_mut() {
                    *x += 0.5 * r.normal();
                }
            }
        }
        m
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = jittered(FusionStrategy::VibAdaln, GroundingMode::Acoustic);
        for u in generate_corpus(&m.task, 10, 1).unwrap() {
            let a = decode_speech(
                &m,
                &u,
                &u.content,
                DecodeMode::Greedy,
                &StreamRng::new(1, "d"),
            )
            .unwrap();
            let b = decode_speech(
                &m,
                &u,
                &u.content,
                DecodeMode::Greedy,
                &StreamRng::new(2, "d"),
            )
            .unwrap();
            assert_eq!(a, b);
            assert_eq!(a.tokens.len(), u.len());
        }
    }

    #[test]
    fn cold_sampling_matches_greedy() {
        let m = jittered(FusionStrategy::Additive, GroundingMode::Semantic);
        for u in generate_corpus(&m.task, 10, 2).unwrap() {
            let g = decode_speech(
                &m,
                &u,
                &u.content,
                DecodeMode::Greedy,
                &StreamRng::new(1, "d"),
            )
            .unwrap();
            for t in [0.0, 1e-6] {
                let s = decode_speech(
                    &m,
                    &u,
                    &u.content,
                    DecodeMode::Sample { temperature: t },
                    &StreamRng::new(3, "d"),
                )
                .unwrap();
                assert_eq!(s.tokens, g.tokens, "T = {t}");
            }
        }
    }

    #[test]
    fn recorded_log_probs_match_rescoring() {
        for s in FusionStrategy::ALL {
            let m = jittered(s, GroundingMode::Acoustic);
            for u in generate_corpus(&m.task, 8, 3).unwrap() {
                let ro = decode_speech(
                    &m,
                    &u,
                    &u.content,
                    DecodeMode::Sample { temperature: 1.0 },
                    &StreamRng::new(7, "d"),
                )
                .unwrap();
                let re = rescore(&m, &u, &u.content, &ro.tokens).unwrap();
                let diff = (ro.total_logp() - re.iter().sum::<f64>()).abs();
                assert!(diff < 1e-10, "{s}: {diff}");
            }
        }
    }

    #[test]
    fn rollouts_do_not_depend_on_batch_size() {
        let m = jittered(FusionStrategy::VibAdaln, GroundingMode::Acoustic);
        let u = &generate_corpus(&m.task, 1, 4).unwrap()[0];
        let mode = DecodeMode::Sample { temperature: 1.0 };
        let many = decode_many(&m, u, &u.content, mode, 5, &StreamRng::new(9, "d")).unwrap();
        let few = decode_many(&m, u, &u.content, mode, 2, &StreamRng::new(9, "d")).unwrap();
        assert_eq!(&many[..2], &few[..]);
    }

    #[test]
    fn negative_temperature_rejected() {
        let m = jittered(FusionStrategy::ContentOnly, GroundingMode::None);
        let u = &generate_corpus(&m.task, 1, 4).unwrap()[0];
        let mode = DecodeMode::Sample { temperature: -1.0 };
        assert!(decode_speech(&m, u, &u.content, mode, &StreamRng::new(0, "d")).is_err());
    }
}
