use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::reward::{score_rollout, wer, Critic};
use crate::rng::StreamRng;
use crate::toy::decode::{decode_many, decode_speech, DecodeMode, Rollout};
use crate::toy::probe::{probe_styles, Representation};
use crate::toy::task::decode_style;
use crate::toy::{GroundingMode, Stage, ToyModel, Utterance};
use crate::vib::encode_posterior;

/// One evaluated (seed, stage, strategy, grounding) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub stage: Stage,
    pub strategy: FusionStrategy,
    pub grounding: GroundingMode,
    pub config_hash: String,
    pub checkpoint_id: String,
    /// Content token error rate of greedy decodes.
    pub ter: f64,
    /// Fraction of greedily decoded tokens carrying the input's style.
    pub style_agreement: f64,
    pub acc_e: Option<f64>,
    pub acc_h: Option<f64>,
    pub acc_z: Option<f64>,
    /// Mean `||μ_i − μ_{i−1}||²` over intent means.
    pub smooth_z: Option<f64>,
    /// Mean squared step of layer-normalized hidden states.
    pub smooth_h: f64,
    /// Mean `||μ_i − α μ_{i−1}||²` over intent means.
    pub ou_residual: Option<f64>,
    /// Mean rubric reward of the greedy decodes.
    pub mean_reward: f64,
    /// Mean rubric reward of rollouts sampled at the collection temperature.
    pub sampled_reward: f64,
    /// Moving average (window 100) of the training objective, every 100 steps.
    pub loss_trace: Vec<f64>,
}

/// Decodes persisted for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRollouts {
    pub input_id: u64,
    pub text: Vec<usize>,
    pub greedy: Vec<usize>,
    pub sampled: Vec<Vec<usize>>,
}

/// Identifies the row being evaluated.
#[derive(Debug, Clone)]
pub struct RowContext {
    pub seed: u64,
    pub stage: Stage,
    pub checkpoint_id: String,
    pub loss_trace: Vec<f64>,
}

pub fn summarize_trace(moving_average: &[f64]) -> Vec<f64> {
    moving_average
        .iter()
        .enumerate()
        .filter(|(i, _)| (i + 1) % 100 == 0 || i + 1 == moving_average.len())
        .map(|(_, v)| *v)
        .collect()
}

struct Live {
    edits: f64,
    tokens: f64,
    agree: f64,
    reward: f64,
    sampled_reward: f64,
    record: EvalRollouts,
}

fn layer_norm(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    v.iter().map(|x| (x - m) / s).collect()
}

fn sq_dist(a: &[f64], b: &[f64], alpha: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - alpha * y).powi(2)).sum()
}

/// Mean squared step distances `(h, z, z against α·prev)` over consecutive positions.
pub fn smoothness(model: &ToyModel, data: &[Utterance], alpha: f64) -> Result<(f64, Option<f64>, Option<f64>)> {
    let (mut sh, mut sz, mut so, mut n) = (0.0, 0.0, 0.0, 0usize);
    for u in data {
        let h = model.hidden_states(u)?;
        let hn: Vec<Vec<f64>> = h.iter().map(|r| layer_norm(r)).collect();
        let mu = if model.strategy.needs_intent() {
            Some(encode_posterior(&model.params, &h)?.mu)
        } else {
            None
        };
        for i in 1..h.len() {
            sh += sq_dist(&hn[i], &hn[i - 1], 1.0);
            if let Some(mu) = &mu {
                sz += sq_dist(&mu[i], &mu[i - 1], 1.0);
                so += sq_dist(&mu[i], &mu[i - 1], alpha);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let z = model.strategy.needs_intent();
    Ok((sh / n, z.then_some(sz / n), z.then_some(so / n)))
}

fn style_hits(tokens: &[usize], style: usize, n_styles: usize) -> usize {
    decode_style(tokens, n_styles)
        .iter()
        .filter(|&&s| s == style)
        .count()
}

/// Greedy and sampled decodes over `heldout`, scored live.
fn decode_all(
    model: &ToyModel,
    heldout: &[Utterance],
    critic: &dyn Critic,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<Live>> {
    let s = model.task.n_styles;
    let root = StreamRng::new(seed, "eval");
    heldout
        .par_iter()
        .map(|u| {
            let text = model.text_response(u)?;
            let g = decode_speech(model, u, &text, DecodeMode::Greedy, &root)?;
            let mode = DecodeMode::Sample {
                temperature: cfg.collect.temperature,
            };
            let sampled: Vec<Rollout> =
                decode_many(model, u, &text, mode, cfg.eval.reward_rollouts, &root.fork(u.id))?;
            let rubrics = critic.make_rubrics(u, &text);
            let reward = score_rollout(critic, &g, &rubrics, cfg.collect.tau)?.reward;
            let mut sampled_reward = 0.0;
            for r in &sampled {
                sampled_reward += score_rollout(critic, r, &rubrics, cfg.collect.tau)?.reward;
            }
            Ok(Live {
                edits: (wer(&g.content, &u.content)? * u.len() as f64).round(),
                tokens: u.len() as f64,
                agree: style_hits(&g.tokens, u.style, s) as f64,
                reward,
                sampled_reward,
                record: EvalRollouts {
                    input_id: u.id,
                    text,
                    greedy: g.tokens,
                    sampled: sampled.into_iter().map(|r| r.tokens).collect(),
                },
            })
        })
        .collect()
}

/// Computes a metrics row; probes and smoothness are skipped when disabled in `cfg`.
pub fn evaluate(
    model: &ToyModel,
    heldout: &[Utterance],
    critic: &dyn Critic,
    cfg: &ExperimentConfig,
    ctx: RowContext,
) -> Result<(MetricsRow, Vec<EvalRollouts>)> {
    crate::calls::hit(crate::calls::EVAL);
    if heldout.is_empty() {
        return Err(Error::contract("evaluate: empty held-out set"));
    }
    let live = decode_all(model, heldout, critic, cfg, ctx.seed)?;
    let tokens: f64 = live.iter().map(|l| l.tokens).sum();
    let n_samples = (heldout.len() * cfg.eval.reward_rollouts) as f64;
    let probe = |rep: Representation| -> Result<Option<f64>> {
        if !cfg.eval.probes || (rep == Representation::Z && !model.strategy.needs_intent()) {
            return Ok(None);
        }
        probe_styles(model, rep, heldout, &cfg.eval.probe).map(Some)
    };
    let (smooth_h, smooth_z, ou_residual) = smoothness(model, heldout, cfg.prior.alpha)?;
    let row = MetricsRow {
        seed: ctx.seed,
        stage: ctx.stage,
        strategy: model.strategy,
        grounding: model.grounding,
        config_hash: cfg.hash(),
        checkpoint_id: ctx.checkpoint_id,
        ter: live.iter().map(|l| l.edits).sum::<f64>() / tokens,
        style_agreement: live.iter().map(|l| l.agree).sum::<f64>() / tokens,
        acc_e: probe(Representation::E)?,
        acc_h: probe(Representation::H)?,
        acc_z: probe(Representation::Z)?,
        smooth_z,
        smooth_h,
        ou_residual,
        mean_reward: live.iter().map(|l| l.reward).sum::<f64>() / heldout.len() as f64,
        sampled_reward: live.iter().map(|l| l.sampled_reward).sum::<f64>() / n_samples,
        loss_trace: ctx.loss_trace,
    };
    Ok((row, live.into_iter().map(|l| l.record).collect()))
}

/// Decode-derived metrics recomputed from stored token lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replayed {
    pub ter: f64,
    pub style_agreement: f64,
    pub mean_reward: f64,
    pub sampled_reward: f64,
}

pub fn replay_metrics(
    records: &[EvalRollouts],
    heldout: &[Utterance],
    critic: &dyn Critic,
    n_styles: usize,
    tau: f64,
) -> Result<Replayed> {
    if records.len() != heldout.len() {
        return Err(Error::contract(format!(
            "replay: {} records for {} inputs",
            records.len(),
            heldout.len()
        )));
    }
    let (mut edits, mut tokens, mut agree) = (0.0, 0.0, 0.0);
    let (mut reward, mut sampled, mut n) = (0.0, 0.0, 0.0);
    for (rec, u) in records.iter().zip(heldout) {
        if rec.input_id != u.id {
            return Err(Error::contract(format!(
                "replay: record {} does not match input {}",
                rec.input_id, u.id
            )));
        }
        let g = Rollout::from_tokens(rec.greedy.clone(), vec![0.0; rec.greedy.len()], n_styles)?;
        edits += (wer(&g.content, &u.content)? * u.len() as f64).round();
        tokens += u.len() as f64;
        agree += style_hits(&rec.greedy, u.style, n_styles) as f64;
        let rubrics = critic.make_rubrics(u, &rec.text);
        reward += score_rollout(critic, &g, &rubrics, tau)?.reward;
        for t in &rec.sampled {
            let r = Rollout::from_tokens(t.clone(), vec![0.0; t.len()], n_styles)?;
            sampled += score_rollout(critic, &r, &rubrics, tau)?.reward;
            n += 1.0;
        }
    }
    Ok(Replayed {
        ter: edits / tokens,
        style_agreement: agree / tokens,
        mean_reward: reward / heldout.len() as f64,
        sampled_reward: sampled / n,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
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

#[derive(Serialize)]
struct CsvRow<'a> {
    seed: u64,
    stage: Stage,
    strategy: FusionStrategy,
    grounding: GroundingMode,
    config_hash: &'a str,
    checkpoint_id: &'a str,
    ter: f64,
    style_agreement: f64,
    acc_e: Option<f64>,
    acc_h: Option<f64>,
    acc_z: Option<f64>,
    smooth_z: Option<f64>,
    smooth_h: f64,
    ou_residual: Option<f64>,
    mean_reward: f64,
    sampled_reward: f64,
    final_loss: Option<f64>,
}

/// Flat CSV mirror of the report; the loss trace is reduced to its last value.
pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(CsvRow {
            seed: r.seed,
            stage: r.stage,
            strategy: r.strategy,
            grounding: r.grounding,
            config_hash: &r.config_hash,
            checkpoint_id: &r.checkpoint_id,
            ter: r.ter,
            style_agreement: r.style_agreement,
            acc_e: r.acc_e,
            acc_h: r.acc_h,
            acc_z: r.acc_z,
            smooth_z: r.smooth_z,
            smooth_h: r.smooth_h,
            ou_residual: r.ou_residual,
            mean_reward: r.mean_reward,
            sampled_reward: r.sampled_reward,
            final_loss: r.loss_trace.last().copied(),
        })
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::OracleCritic;
    use crate::toy::{generate_corpus, ModelConfig, TaskConfig};

    fn setup() -> (TaskConfig, OracleCritic, Vec<Utterance>) {
        let task = TaskConfig::default();
        let corpus = generate_corpus(&task, 300, 1).unwrap();
        let critic = OracleCritic::fit(&task, &corpus).unwrap();
        (task, critic, corpus)
    }

    fn copy_records(data: &[Utterance]) -> Vec<EvalRollouts> {
        data.iter()
            .map(|u| EvalRollouts {
                input_id: u.id,
                text: u.content.clone(),
                greedy: u.target_speech.clone(),
                sampled: vec![u.target_speech.clone(); 2],
            })
            .collect()
    }

    #[test]
    fn copying_targets_is_perfect() {
        let (task, critic, data) = setup();
        let r = replay_metrics(&copy_records(&data), &data, &critic, task.n_styles, 0.2).unwrap();
        assert_eq!(r.ter, 0.0);
        assert_eq!(r.style_agreement, 1.0);
        assert_eq!(r.mean_reward, r.sampled_reward);
    }

    #[test]
    fn shuffled_style_channel_is_chance() {
        let (task, critic, data) = setup();
        let s = task.n_styles;
        let mut r = StreamRng::new(3, "shuffle");
        let mut recs = copy_records(&data);
        for rec in &mut recs {
            for y in &mut rec.greedy {
                *y = (*y / s) * s + r.below(s);
            }
        }
        let r = replay_metrics(&recs, &data, &critic, s, 0.2).unwrap();
        assert_eq!(r.ter, 0.0);
        // about 1800 tokens: 3 sd of a 0.25 rate is about 0.031.
        assert!((r.style_agreement - 0.25).abs() < 0.035, "{}", r.style_agreement);
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let (task, critic, data) = setup();
        let m = ToyModel::new(
            task,
            ModelConfig::default(),
            FusionStrategy::VibAdaln,
            GroundingMode::Acoustic,
            &StreamRng::new(0, "init"),
        )
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.eval.probes = false;
        cfg.eval.reward_rollouts = 2;
        let ctx = RowContext {
            seed: 0,
            stage: Stage::Stage1,
            checkpoint_id: "x".into(),
            loss_trace: vec![],
        };
        let (row, _) = evaluate(&m, &data, &critic, &cfg, ctx).unwrap();
        assert!((row.style_agreement - 0.25).abs() < 0.06, "{}", row.style_agreement);
        assert!(row.ter > 0.5);
        assert_eq!(row.acc_z, None);
    }

    #[test]
    fn trace_summary_takes_every_hundredth() {
        let ma: Vec<f64> = (0..250).map(|i| i as f64).collect();
        assert_eq!(summarize_trace(&ma), vec![99.0, 199.0, 249.0]);
        assert!(summarize_trace(&[]).is_empty());
    }
}
