//! Utility-anchored preference optimization over replay-buffer tuples.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{DenseArray, Graph, NodeId};
use crate::reward::{PreferenceTuple, ReplayBuffer};
use crate::rng::StreamRng;
use crate::toy::decode::rescore;
use crate::toy::model::{SeqInput, ToyModel, TrainMask};
use crate::toy::task::Utterance;
use crate::toy::train::{OptimizerConfig, Sgd, Stage};
use crate::vib::SampleMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UapoConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Treat the anchor utility as a constant.
    pub detach_anchor: bool,
}

impl Default for UapoConfig {
    fn default() -> Self {
        UapoConfig {
            lambda: 1.0,
            batch_size: 8,
            steps: 500,
            lr: 1e-4,
            detach_anchor: false,
        }
    }
}

impl UapoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!(
                "uapo: lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::contract("uapo: batch_size and lr must be positive"));
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            ..Default::default()
        }
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `L_w = −Σ_w [u_w − log(e^{u⊥} + Σ_{w'} e^{u_{w'}})]`.
pub fn loss_win(winners: &[f64], anchor: f64) -> Result<f64> {
    if winners.is_empty() {
        return Err(Error::contract("loss_win: need at least one winner"));
    }
    let mut all = vec![anchor];
    all.extend_from_slice(winners);
    let lse = log_sum_exp(&all);
    Ok(winners.iter().map(|u| lse - u).sum())
}

/// `L_l = −[u⊥ − log(e^{u⊥} + Σ_l e^{u_l})]`.
pub fn loss_lose(losers: &[f64], anchor: f64) -> Result<f64> {
    if losers.is_empty() {
        return Err(Error::contract("loss_lose: need at least one loser"));
    }
    let mut all = vec![anchor];
    all.extend_from_slice(losers);
    Ok(log_sum_exp(&all) - anchor)
}

/// In-graph `L_w` from a `[1, 1 + W]` row `[u⊥, u_w...]`.
pub fn loss_win_graph(g: &mut Graph, row: NodeId) -> Result<NodeId> {
    let n = g.value(row).cols();
    if n < 2 {
        return Err(Error::contract("loss_win: need at least one winner"));
    }
    let lsm = g.log_softmax(row)?;
    let mut mask = vec![1.0; n];
    mask[0] = 0.0;
    let mask = g.constant(DenseArray::matrix(n, 1, mask)?);
    let s = g.matmul(lsm, mask)?;
    let s = g.sum(s)?;
    g.neg(s)
}

/// In-graph `L_l` from a `[1, 1 + L]` row `[u⊥, u_l...]`.
pub fn loss_lose_graph(g: &mut Graph, row: NodeId) -> Result<NodeId> {
    let n = g.value(row).cols();
    if n < 2 {
        return Err(Error::contract("loss_lose: need at least one loser"));
    }
    let lsm = g.log_softmax(row)?;
    let first = g.pick(lsm, &[0])?;
    let s = g.sum(first)?;
    g.neg(s)
}

/// `(λ/|y|) Σ_i log π(y_i | x, y_<i)`, re-scored under the current policy.
pub fn policy_utility(
    model: &ToyModel,
    utt: &Utterance,
    text: &[usize],
    y: &[usize],
    lambda: f64,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::contract("policy_utility: empty sequence"));
    }
    let lp = rescore(model, utt, text, y)?;
    Ok(lambda / y.len() as f64 * lp.iter().sum::<f64>())
}

/// Utilities of `seqs` as a `[1, n]` row node.
pub fn utilities_graph(
    g: &mut Graph,
    model: &ToyModel,
    utt: &Utterance,
    text: &[usize],
    seqs: &[&[usize]],
    lambda: f64,
    mask: TrainMask,
) -> Result<NodeId> {
    if seqs.iter().any(|s| s.is_empty()) {
        return Err(Error::contract("policy_utility: empty sequence"));
    }
    let inputs: Vec<SeqInput> = seqs
        .iter()
        .map(|s| SeqInput {
            utt,
            text,
            speech: s,
        })
        .collect();
    let mut unused = StreamRng::new(0, "unused");
    let feats = model.features(g, &inputs, SampleMode::InferMean, &mut unused, mask)?;
    let lp = model.speech_token_log_probs(g, &feats, &inputs, mask)?;
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut seg = DenseArray::zeros(&[total, seqs.len()]);
    let mut row = 0;
    for (j, s) in seqs.iter().enumerate() {
        for _ in 0..s.len() {
            seg.data_mut()[row * seqs.len() + j] = lambda / s.len() as f64;
            row += 1;
        }
    }
    let seg = g.constant(seg);
    g.matmul(lp, seg)
}

/// Per-tuple utilities and losses, as graph nodes.
pub struct TupleLoss {
    pub l_w: NodeId,
    pub l_l: NodeId,
    pub winner_u: Vec<f64>,
    pub loser_u: Vec<f64>,
    pub anchor_u: f64,
}

pub fn tuple_loss_graph(
    g: &mut Graph,
    model: &ToyModel,
    utt: &Utterance,
    t: &PreferenceTuple,
    cfg: &UapoConfig,
    mask: TrainMask,
) -> Result<TupleLoss> {
    t.validate()?;
    if t.input_id != utt.id {
        return Err(Error::contract(format!(
            "tuple {} paired with utterance {}",
            t.input_id, utt.id
        )));
    }
    let mut seqs: Vec<&[usize]> = vec![&t.anchor.tokens];
    seqs.extend(t.winners.iter().map(|s| s.tokens.as_slice()));
    seqs.extend(t.losers.iter().map(|s| s.tokens.as_slice()));
    let u = utilities_graph(g, model, utt, &t.text, &seqs, cfg.lambda, mask)?;
    let vals = g.value(u).data().to_vec();
    let nw = t.winners.len();

    // Split the row into [anchor | winners] and [anchor | losers].
    let select = |g: &mut Graph, cols: &[usize], detach_first: bool| -> Result<NodeId> {
        let mut m = DenseArray::zeros(&[seqs.len(), cols.len()]);
        for (j, &c) in cols.iter().enumerate() {
            m.data_mut()[c * cols.len() + j] = 1.0;
        }
        let m = g.constant(m);
        let picked = g.matmul(u, m)?;
        if !detach_first {
            return Ok(picked);
        }
        // picked ⊙ [0, 1, …] + stop_gradient(picked) ⊙ [1, 0, …]
        let frozen = g.stop_gradient(picked)?;
        let mut first = vec![0.0; cols.len()];
        first[0] = 1.0;
        let rest: Vec<f64> = first.iter().map(|v| 1.0 - v).collect();
        let first = g.constant(DenseArray::vector(first));
        let rest = g.constant(DenseArray::vector(rest));
        let a = g.mul(picked, rest)?;
        let b = g.mul(frozen, first)?;
        g.add(a, b)
    };
    let win_cols: Vec<usize> = (0..=nw).collect();
    let lose_cols: Vec<usize> = std::iter::once(0).chain(nw + 1..seqs.len()).collect();
    let w_row = select(g, &win_cols, cfg.detach_anchor)?;
    let l_row = select(g, &lose_cols, cfg.detach_anchor)?;
    Ok(TupleLoss {
        l_w: loss_win_graph(g, w_row)?,
        l_l: loss_lose_graph(g, l_row)?,
        winner_u: vals[1..=nw].to_vec(),
        loser_u: vals[nw + 1..].to_vec(),
        anchor_u: vals[0],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UapoRecord {
    pub step: usize,
    #[serde(rename = "L_w")]
    pub l_w: f64,
    #[serde(rename = "L_l")]
    pub l_l: f64,
    #[serde(rename = "L_UAPO")]
    pub l_uapo: f64,
    pub mean_winner_u: f64,
    pub mean_loser_u: f64,
    pub anchor_u: f64,
}

/// Batch objective `mean(L_w + L_l)` and its trace values.
pub fn batch_loss_graph(
    g: &mut Graph,
    model: &ToyModel,
    batch: &[(&Utterance, &PreferenceTuple)],
    cfg: &UapoConfig,
    mask: TrainMask,
) -> Result<(NodeId, UapoRecord)> {
    if batch.is_empty() {
        return Err(Error::contract("uapo: empty batch"));
    }
    let mut total: Option<NodeId> = None;
    let (mut lw, mut ll, mut wu, mut lu, mut au) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (utt, t) in batch {
        let tl = tuple_loss_graph(g, model, utt, t, cfg, mask)?;
        lw += g.scalar(tl.l_w);
        ll += g.scalar(tl.l_l);
        wu += tl.winner_u.iter().sum::<f64>() / tl.winner_u.len() as f64;
        lu += tl.loser_u.iter().sum::<f64>() / tl.loser_u.len() as f64;
        au += tl.anchor_u;
        let s = g.add(tl.l_w, tl.l_l)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let n = batch.len() as f64;
    let loss = g.scale(total.expect("nonempty batch"), 1.0 / n)?;
    Ok((
        loss,
        UapoRecord {
            step: 0,
            l_w: lw / n,
            l_l: ll / n,
            l_uapo: (lw + ll) / n,
            mean_winner_u: wu / n,
            mean_loser_u: lu / n,
            anchor_u: au / n,
        },
    ))
}

/// One gradient step on a batch; returns the pre-update trace values.
pub fn uapo_step(
    model: &mut ToyModel,
    batch: &[(&Utterance, &PreferenceTuple)],
    cfg: &UapoConfig,
    sgd: &mut Sgd,
) -> Result<UapoRecord> {
    crate::calls::hit(crate::calls::UAPO);
    let mut g = Graph::new();
    let mask = |n: &str| sgd.is_trainable(n);
    let (loss, rec) = batch_loss_graph(&mut g, model, batch, cfg, &mask)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric {
            node: loss.index(),
            op: "uapo",
            detail: format!("loss {v}"),
        });
    }
    let grads = g.backward(loss)?;
    sgd.step(&mut model.params, &grads)?;
    Ok(rec)
}

pub fn policy_optimizer(model: &ToyModel, cfg: &UapoConfig) -> Sgd {
    Sgd::for_stage(&cfg.optimizer(), model, Stage::Stage3)
}

/// Runs `cfg.steps` minibatch updates over the buffer.
pub fn uapo_train(
    model: &mut ToyModel,
    buffer: &ReplayBuffer,
    inputs: &[Utterance],
    cfg: &UapoConfig,
    rng: &StreamRng,
) -> Result<Vec<UapoRecord>> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(Error::Training {
            stage: "uapo".into(),
            detail: "replay buffer is empty".into(),
        });
    }
    let by_id: BTreeMap<u64, &Utterance> = inputs.iter().map(|u| (u.id, u)).collect();
    let pairs: Vec<(&Utterance, &PreferenceTuple)> = buffer
        .tuples()
        .iter()
        .map(|t| {
            by_id.get(&t.input_id).map(|u| (*u, t)).ok_or_else(|| {
                Error::contract(format!("no input utterance for tuple {}", t.input_id))
            })
        })
        .collect::<Result<_>>()?;
    let mut sgd = policy_optimizer(model, cfg);
    let mut r = rng.substream("uapo-batch");
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size.min(pairs.len()))
            .map(|_| pairs[r.below(pairs.len())])
            .collect();
        let mut rec = uapo_step(model, &batch, cfg, &mut sgd).map_err(|e| e.in_stage("uapo"))?;
        rec.step = step;
        trace.push(rec);
    }
    Ok(trace)
}

/// Mean re-scored winner utility minus mean loser utility over the buffer.
pub fn utility_margin(
    model: &ToyModel,
    buffer: &ReplayBuffer,
    inputs: &[Utterance],
    lambda: f64,
) -> Result<f64> {
    let by_id: BTreeMap<u64, &Utterance> = inputs.iter().map(|u| (u.id, u)).collect();
    let mut total = 0.0;
    for t in buffer.tuples() {
        let u = by_id.get(&t.input_id).ok_or_else(|| {
            Error::contract(format!("no input utterance for tuple {}", t.input_id))
        })?;
        let mean = |seqs: &[crate::reward::StoredSeq]| -> Result<f64> {
            let mut s = 0.0;
            for q in seqs {
                s += policy_utility(model, u, &t.text, &q.tokens, lambda)?;
            }
            Ok(s / seqs.len() as f64)
        };
        total += mean(&t.winners)? - mean(&t.losers)?;
    }
    Ok(total / buffer.len().max(1) as f64)
}

pub fn write_trace(path: &Path, trace: &[UapoRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in trace {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
