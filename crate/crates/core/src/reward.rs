//! Self-reward collection: rubric scoring with an intelligibility gate,
//! anchor generation, winner/loser partitioning and the replay buffer.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::rng::StreamRng;
use crate::toy::decode::{decode_many, decode_speech, DecodeMode, Rollout};
use crate::toy::model::{GroundingMode, ToyModel};
use crate::toy::task::{decode_style, TaskConfig, Utterance};

/// Token-level Levenshtein distance divided by `|reference|`.
pub fn wer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("wer: empty reference"));
    }
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[hyp.len()] as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub s_emo: f64,
    pub s_pro: f64,
    pub s_nat: f64,
    pub wer: f64,
    pub reward: f64,
}

impl RubricScore {
    pub fn new(s_emo: f64, s_pro: f64, s_nat: f64, wer: f64, tau: f64) -> Result<Self> {
        for (name, v) in [("s_emo", s_emo), ("s_pro", s_pro), ("s_nat", s_nat)] {
            if ![0.0, 0.5, 1.0].contains(&v) {
                return Err(Error::contract(format!(
                    "{name} = {v} is not on the three-point scale"
                )));
            }
        }
        if !(wer >= 0.0) {
            return Err(Error::contract(format!("wer must be >= 0, got {wer}")));
        }
        let reward = if wer > tau {
            0.0
        } else {
            s_emo + s_pro + s_nat
        };
        Ok(RubricScore {
            s_emo,
            s_pro,
            s_nat,
            wer,
            reward,
        })
    }
}

/// Three-point scale: 1 at or above `hi`, 0.5 at or above `lo`, else 0.
fn three_point(x: f64, hi: f64, lo: f64) -> f64 {
    if x >= hi {
        1.0
    } else if x >= lo {
        0.5
    } else {
        0.0
    }
}

/// Frozen smoothed bigram over speech tokens, the reference for naturalness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalnessScorer {
    vocab: usize,
    /// `[V+1, V]` log-probabilities; row `V` is the start state.
    log_probs: Vec<f64>,
    pub median: f64,
    pub p25: f64,
}

impl NaturalnessScorer {
    pub const SMOOTHING: f64 = 0.5;

    pub fn fit(corpus: &[Utterance], vocab: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("naturalness scorer: empty corpus"));
        }
        let mut counts = vec![Self::SMOOTHING; (vocab + 1) * vocab];
        for u in corpus {
            let mut prev = vocab;
            for &y in &u.target_speech {
                counts[prev * vocab + y] += 1.0;
                prev = y;
            }
        }
        let mut log_probs = counts;
        for row in log_probs.chunks_mut(vocab) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|c| *c = (*c / total).ln());
        }
        let mut s = NaturalnessScorer {
            vocab,
            log_probs,
            median: 0.0,
            p25: 0.0,
        };
        let mut scores: Vec<f64> = corpus
            .iter()
            .map(|u| s.mean_log_prob(&u.target_speech))
            .collect();
        scores.sort_by(f64::total_cmp);
        s.median = quantile(&scores, 0.5);
        s.p25 = quantile(&scores, 0.25);
        Ok(s)
    }

    pub fn mean_log_prob(&self, tokens: &[usize]) -> f64 {
        if tokens.is_empty() {
            return f64::NEG_INFINITY;
        }
        let mut prev = self.vocab;
        let mut total = 0.0;
        for &y in tokens {
            total += self.log_probs[prev * self.vocab + y];
            prev = y;
        }
        total / tokens.len() as f64
    }

    /// Strictly above the median scores 1, strictly above the 25th percentile 0.5.
    pub fn score(&self, tokens: &[usize]) -> f64 {
        let m = self.mean_log_prob(tokens);
        if m > self.median {
            1.0
        } else if m > self.p25 {
            0.5
        } else {
            0.0
        }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-dimension rubric targets for one input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubrics {
    /// Expressive style the response should carry.
    pub style: usize,
    /// Content the response must preserve.
    pub content: Vec<usize>,
}

/// Scores rollouts against per-input rubrics on the three-point scale.
pub trait Critic: Sync {
    fn make_rubrics(&self, utt: &Utterance, text_response: &[usize]) -> Rubrics;
    /// Returns `(s_emo, s_pro, s_nat)`.
    fn score(&self, rollout: &Rollout, rubrics: &Rubrics) -> (f64, f64, f64);
}

/// Deterministic stand-in for a model-judged critic, driven by the task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCritic {
    pub n_styles: usize,
    pub naturalness: NaturalnessScorer,
}

impl OracleCritic {
    pub const HI: f64 = 0.9;
    pub const LO: f64 = 0.5;

    pub fn fit(task: &TaskConfig, corpus: &[Utterance]) -> Result<Self> {
        Ok(OracleCritic {
            n_styles: task.n_styles,
            naturalness: NaturalnessScorer::fit(corpus, task.speech_vocab())?,
        })
    }
}

impl Critic for OracleCritic {
    fn make_rubrics(&self, utt: &Utterance, _text_response: &[usize]) -> Rubrics {
        Rubrics {
            style: utt.style,
            content: utt.content.clone(),
        }
    }

    fn score(&self, rollout: &Rollout, rubrics: &Rubrics) -> (f64, f64, f64) {
        let styles = decode_style(&rollout.tokens, self.n_styles);
        let n = styles.len().max(1) as f64;
        let agree = styles.iter().filter(|&&s| s == rubrics.style).count() as f64 / n;
        let consistent = if styles.len() < 2 {
            1.0
        } else {
            styles.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (styles.len() - 1) as f64
        };
        (
            three_point(agree, Self::HI, Self::LO),
            three_point(consistent, Self::HI, Self::LO),
            self.naturalness.score(&rollout.tokens),
        )
    }
}

/// Full rubric score of a rollout for one input.
pub fn score_rollout(
    critic: &dyn Critic,
    rollout: &Rollout,
    rubrics: &Rubrics,
    tau: f64,
) -> Result<RubricScore> {
    let (e, p, n) = critic.score(rollout, rubrics);
    RubricScore::new(e, p, n, wer(&rollout.content, &rubrics.content)?, tau)
}

pub fn oracle_score(
    critic: &OracleCritic,
    rollout: &Rollout,
    utt: &Utterance,
    tau: f64,
) -> Result<RubricScore> {
    let rubrics = critic.make_rubrics(utt, &utt.content);
    score_rollout(critic, rollout, &rubrics, tau)
}

/// Context-unaware generator of the anchor response.
#[derive(Debug, Clone)]
pub struct AnchorPolicy {
    model: ToyModel,
}

impl AnchorPolicy {
    pub fn new(model: ToyModel) -> Result<Self> {
        if model.strategy != FusionStrategy::ContentOnly || model.grounding != GroundingMode::None {
            return Err(Error::contract(format!(
                "anchor policy must be content-only with no grounding, got {}/{}",
                model.strategy, model.grounding
            )));
        }
        Ok(AnchorPolicy { model })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    /// Greedy decode from the text response alone.
    pub fn generate(&self, utt: &Utterance, text: &[usize]) -> Result<Rollout> {
        decode_speech(
            &self.model,
            utt,
            text,
            DecodeMode::Greedy,
            &StreamRng::new(0, "anchor"),
        )
    }
}

/// Indices of winners and losers, or `None` when either set is empty.
///
/// Winners are the rollouts above the anchor that share the maximum reward;
/// losers are those below it sharing the minimum reward.
pub fn partition(rewards: &[f64], anchor: f64) -> Option<(Vec<usize>, Vec<usize>)> {
    let above = rewards.iter().filter(|&&r| r > anchor);
    let below = rewards.iter().filter(|&&r| r < anchor);
    let best = above.cloned().reduce(f64::max)?;
    let worst = below.cloned().reduce(f64::min)?;
    let winners = (0..rewards.len()).filter(|&i| rewards[i] == best).collect();
    let losers = (0..rewards.len())
        .filter(|&i| rewards[i] == worst)
        .collect();
    Some((winners, losers))
}

/// A rollout as stored in the buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredSeq {
    pub tokens: Vec<usize>,
    pub logp: Vec<f64>,
}

impl From<&Rollout> for StoredSeq {
    fn from(r: &Rollout) -> Self {
        StoredSeq {
            tokens: r.tokens.clone(),
            logp: r.logp.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TupleRewards {
    pub winner: f64,
    pub loser: f64,
    pub anchor: f64,
    /// Rewards of all K rollouts, in sampling order.
    pub rollouts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTuple {
    pub input_id: u64,
    /// Text response the rollouts were generated from.
    pub text: Vec<usize>,
    pub winners: Vec<StoredSeq>,
    pub losers: Vec<StoredSeq>,
    pub anchor: StoredSeq,
    pub rewards: TupleRewards,
    pub seed: u64,
    pub checkpoint_id: String,
}

impl PreferenceTuple {
    pub fn validate(&self) -> Result<()> {
        let r = &self.rewards;
        if self.winners.is_empty() || self.losers.is_empty() {
            return Err(Error::contract(format!(
                "tuple {}: empty winner or loser set",
                self.input_id
            )));
        }
        if !(r.winner > r.anchor && r.anchor > r.loser) {
            return Err(Error::contract(format!(
                "tuple {}: rewards {} > {} > {} violated",
                self.input_id, r.winner, r.anchor, r.loser
            )));
        }
        let lens = self
            .winners
            .iter()
            .chain(&self.losers)
            .chain([&self.anchor]);
        for s in lens {
            if s.tokens.is_empty() || s.tokens.len() != s.logp.len() {
                return Err(Error::contract(format!(
                    "tuple {}: malformed sequence",
                    self.input_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectStats {
    pub inputs: usize,
    pub stored: usize,
    pub skipped: usize,
}

/// Append-only store of validated preference tuples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    tuples: Vec<PreferenceTuple>,
    pub stats: CollectStats,
}

impl ReplayBuffer {
    pub fn push(&mut self, t: PreferenceTuple) -> Result<()> {
        t.validate()?;
        self.tuples.push(t);
        Ok(())
    }

    pub fn tuples(&self) -> &[PreferenceTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        for t in &self.tuples {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = ReplayBuffer::default();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: PreferenceTuple = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
            buf.push(t)?;
        }
        buf.stats.stored = buf.len();
        Ok(buf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub k: usize,
    pub tau: f64,
    pub temperature: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            k: 32,
            tau: 0.2,
            temperature: 1.0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::contract(format!(
                "collect: K must be >= 2, got {}",
                self.k
            )));
        }
        if !(self.tau >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::contract("collect: tau and temperature must be >= 0"));
        }
        Ok(())
    }
}

/// Everything scored for one input; the tuple is present only when both sets are nonempty.
#[derive(Debug, Clone)]
pub struct InputOutcome {
    pub text: Vec<usize>,
    pub rollouts: Vec<Rollout>,
    pub anchor: Rollout,
    pub tuple: Option<PreferenceTuple>,
}

/// Runs the self-reward loop for one input.
pub fn collect_one(
    utt: &Utterance,
    policy: &ToyModel,
    anchor: &AnchorPolicy,
    critic: &dyn Critic,
    cfg: &CollectConfig,
    seed: u64,
    checkpoint_id: &str,
) -> Result<InputOutcome> {
    let text = policy.text_response(utt)?;
    let rubrics = critic.make_rubrics(utt, &text);
    let rng = StreamRng::new(seed, "rollout").fork(utt.id);
    let mode = DecodeMode::Sample {
        temperature: cfg.temperature,
    };
    let mut rollouts = decode_many(policy, utt, &text, mode, cfg.k, &rng)?;
    for r in &mut rollouts {
        r.score = Some(score_rollout(critic, r, &rubrics, cfg.tau)?);
    }
    let mut a = anchor.generate(utt, &text)?;
    let a_score = score_rollout(critic, &a, &rubrics, cfg.tau)?;
    a.score = Some(a_score);

    let rewards: Vec<f64> = rollouts
        .iter()
        .map(|r| r.score.map_or(0.0, |s| s.reward))
        .collect();
    let tuple = partition(&rewards, a_score.reward).map(|(w, l)| PreferenceTuple {
        input_id: utt.id,
        text: text.clone(),
        winners: w.iter().map(|&i| StoredSeq::from(&rollouts[i])).collect(),
        losers: l.iter().map(|&i| StoredSeq::from(&rollouts[i])).collect(),
        anchor: StoredSeq::from(&a),
        rewards: TupleRewards {
            winner: rewards[w[0]],
            loser: rewards[l[0]],
            anchor: a_score.reward,
            rollouts: rewards.clone(),
        },
        seed,
        checkpoint_id: checkpoint_id.to_string(),
    });
    Ok(InputOutcome {
        text,
        rollouts,
        anchor: a,
        tuple,
    })
}

/// Collects a replay buffer over `inputs`, in parallel across inputs and
/// merged in input order.
pub fn collect(
    inputs: &[Utterance],
    policy: &ToyModel,
    anchor: &AnchorPolicy,
    critic: &dyn Critic,
    cfg: &CollectConfig,
    seed: u64,
    checkpoint_id: &str,
) -> Result<ReplayBuffer> {
    crate::calls::hit(crate::calls::COLLECT);
    cfg.validate()?;
    let outcomes: Vec<Result<Option<PreferenceTuple>>> = inputs
        .par_iter()
        .map(|u| Ok(collect_one(u, policy, anchor, critic, cfg, seed, checkpoint_id)?.tuple))
        .collect();
    let mut buf = ReplayBuffer::default();
    for o in outcomes {
        buf.stats.inputs += 1;
        match o? {
            Some(t) => {
                buf.push(t)?;
                buf.stats.stored += 1;
            }
            None => buf.stats.skipped += 1,
        }
    }
    Ok(buf)
}
