//! Stage 1 / Stage 2 trainers and the momentum SGD optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::{param_group, ParamGroup, SeqInput, ToyModel};
use super::task::Utterance;
use crate::error::{Error, Result};
use crate::grad::{DenseArray, Gradients, Graph, ParamSet};
use crate::rng::StreamRng;
use crate::vib::{beta_schedule, OuPriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }

    /// Groups updated in this stage.
    pub fn trainable(self) -> &'static [ParamGroup] {
        const BASE: [ParamGroup; 4] = [
            ParamGroup::SpeechHead,
            ParamGroup::GenEncoder,
            ParamGroup::Fusion,
            ParamGroup::IntentEncoder,
        ];
        const JOINT: [ParamGroup; 5] = [
            ParamGroup::SpeechHead,
            ParamGroup::GenEncoder,
            ParamGroup::Fusion,
            ParamGroup::IntentEncoder,
            ParamGroup::BackboneLast,
        ];
        match self {
            Stage::Stage1 | Stage::Stage3 => &BASE,
            Stage::Stage2 => &JOINT,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "stage3" => Ok(Stage::Stage3),
            _ => Err(Error::contract(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Step size of the last backbone layer relative to `lr`.
    pub backbone_lr_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            clip_norm: 5.0,
            backbone_lr_ratio: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "optimizer: lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "optimizer: momentum {} outside [0,1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("optimizer: batch_size must be positive"));
        }
        if !(self.clip_norm >= 0.0) || !(self.backbone_lr_ratio > 0.0) {
            return Err(Error::contract(
                "optimizer: clip_norm must be >= 0 and backbone_lr_ratio > 0",
            ));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and a per-parameter step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub clip_norm: f64,
    pub lr: BTreeMap<String, f64>,
    pub velocity: BTreeMap<String, DenseArray>,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig, lr: BTreeMap<String, f64>) -> Self {
        Sgd {
            momentum: cfg.momentum,
            clip_norm: cfg.clip_norm,
            lr,
            velocity: BTreeMap::new(),
        }
    }

    /// Optimizer over the trainable groups of `stage`.
    pub fn for_stage(cfg: &OptimizerConfig, model: &ToyModel, stage: Stage) -> Self {
        let lr = model
            .names_in(stage.trainable())
            .into_iter()
            .map(|n| {
                let r = if param_group(&n) == ParamGroup::BackboneLast {
                    cfg.lr * cfg.backbone_lr_ratio
                } else {
                    cfg.lr
                };
                (n, r)
            })
            .collect();
        Sgd::new(cfg, lr)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.lr.contains_key(name)
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<f64> {
        let norm = self
            .lr
            .keys()
            .filter_map(|n| grads.get(n))
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric {
                node: 0,
                op: "sgd",
                detail: format!("gradient norm {norm}"),
            });
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        for (name, &lr) in &self.lr {
            let Some(g) = grads.get(name) else { continue };
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("optimizer: unknown parameter {name}")))?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *pi -= lr * *vi;
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub beta: f64,
    /// Objective value (batch mean).
    pub loss: f64,
    pub recon: f64,
    pub vib: f64,
    pub text: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub stage: Option<Stage>,
    pub records: Vec<StepRecord>,
}

impl TrainTrace {
    /// Trailing moving average of the objective.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            acc += r.loss;
            if i >= w {
                acc -= self.records[i - w].loss;
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// Number of consecutive steps above 10× the initial loss that counts as divergence.
pub const DIVERGENCE_PATIENCE: usize = 200;

/// Runs `steps` minibatch updates of `stage` on `data`.
pub fn train_stage(
    model: &mut ToyModel,
    data: &[Utterance],
    stage: Stage,
    steps: usize,
    opt: &OptimizerConfig,
    prior: &OuPriorConfig,
    rng: &StreamRng,
) -> Result<TrainTrace> {
    if stage == Stage::Stage3 {
        return Err(Error::contract(
            "train_stage: stage3 is trained by the preference optimizer",
        ));
    }
    crate::calls::hit(match stage {
        Stage::Stage1 => crate::calls::STAGE1,
        _ => crate::calls::STAGE2,
    });
    opt.validate()?;
    prior.validate()?;
    if data.is_empty() || steps == 0 {
        return Err(Error::contract(
            "train_stage: need data and at least one step",
        ));
    }
    let mut sgd = Sgd::for_stage(opt, model, stage);
    let mut trace = TrainTrace {
        stage: Some(stage),
        records: Vec::with_capacity(steps),
    };
    let with_text = stage == Stage::Stage2;
    let mut batch_rng = rng.substream("batch");
    let mut initial = None;
    let mut over = 0usize;
    for step in 0..steps {
        let beta = beta_schedule(step, steps, prior)?;
        let idx: Vec<usize> = (0..opt.batch_size)
            .map(|_| batch_rng.below(data.len()))
            .collect();
        let seqs: Vec<SeqInput> = idx.iter().map(|&i| SeqInput::teacher(&data[i])).collect();
        let mut g = Graph::new();
        let mut eps = rng.substream("eps").fork(step as u64);
        let mask = |n: &str| sgd.is_trainable(n);
        let (loss, parts) = model
            .batch_loss(&mut g, &seqs, beta, with_text, prior, &mut eps, &mask)
            .map_err(|e| e.in_stage(stage.as_str()))?;
        let value = g.scalar(loss);
        let grads = g.backward(loss)?;
        sgd.step(&mut model.params, &grads)?;

        let b = seqs.len() as f64;
        trace.records.push(StepRecord {
            step,
            beta,
            loss: value,
            recon: parts.recon / b,
            vib: parts.vib / b,
            text: parts.text / b,
        });
        let init = *initial.get_or_insert(value);
        over = if value > 10.0 * init { over + 1 } else { 0 };
        if over >= DIVERGENCE_PATIENCE {
            return Err(Error::Training {
                stage: stage.as_str().into(),
                detail: format!(
                    "loss {value:.4} above 10x initial {init:.4} for {over} steps (step {step})"
                ),
            });
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionStrategy;
    use crate::toy::model::{GroundingMode, ModelConfig};
    use crate::toy::task::{generate_corpus, TaskConfig};

    fn fresh(strategy: FusionStrategy) -> ToyModel {
        ToyModel::new(
            TaskConfig::default(),
            ModelConfig::default(),
            strategy,
            GroundingMode::Acoustic,
            &StreamRng::new(0, "model"),
        )
        .unwrap()
    }

    #[test]
    fn stage1_freezes_backbone_and_text_head() {
        let data = generate_corpus(&TaskConfig::default(), 64, 0).unwrap();
        let mut m = fresh(FusionStrategy::VibAdaln);
        let before: Vec<u64> = [
            ParamGroup::Frozen,
            ParamGroup::BackboneLast,
            ParamGroup::TextHead,
        ]
        .iter()
        .map(|g| m.group_hash(*g))
        .collect();
        let head = m.group_hash(ParamGroup::SpeechHead);
        let prior = OuPriorConfig::default();
        train_stage(
            &mut m,
            &data,
            Stage::Stage1,
            30,
            &OptimizerConfig::default(),
            &prior,
            &StreamRng::new(1, "t"),
        )
        .unwrap();
        let after: Vec<u64> = [
            ParamGroup::Frozen,
            ParamGroup::BackboneLast,
            ParamGroup::TextHead,
        ]
        .iter()
        .map(|g| m.group_hash(*g))
        .collect();
        assert_eq!(before, after);
        assert_ne!(head, m.group_hash(ParamGroup::SpeechHead));
    }

    #[test]
    fn stage2_moves_only_the_last_backbone_layer() {
        let data = generate_corpus(&TaskConfig::default(), 64, 0).unwrap();
        let mut m = fresh(FusionStrategy::VibAdaln);
        let frozen = m.group_hash(ParamGroup::Frozen);
        let text = m.group_hash(ParamGroup::TextHead);
        let last = m.group_hash(ParamGroup::BackboneLast);
        let prior = OuPriorConfig::default();
        train_stage(
            &mut m,
            &data,
            Stage::Stage2,
            30,
            &OptimizerConfig::default(),
            &prior,
            &StreamRng::new(1, "t"),
        )
        .unwrap();
        assert_eq!(frozen, m.group_hash(ParamGroup::Frozen));
        assert_eq!(text, m.group_hash(ParamGroup::TextHead));
        assert_ne!(last, m.group_hash(ParamGroup::BackboneLast));
    }

    #[test]
    fn backbone_step_size_is_a_tenth() {
        let m = fresh(FusionStrategy::VibAdaln);
        let cfg = OptimizerConfig::default();
        let sgd = Sgd::for_stage(&cfg, &m, Stage::Stage2);
        assert!((sgd.lr["head.w_out"] / sgd.lr["backbone.last.w"] - 10.0).abs() < 1e-12);
        assert!(!Sgd::for_stage(&cfg, &m, Stage::Stage1).is_trainable("backbone.last.w"));
        assert!(!sgd.is_trainable("text.w"));
    }

    #[test]
    fn vib_unweighted_during_warmup() {
        let data = generate_corpus(&TaskConfig::default(), 32, 0).unwrap();
        let mut m = fresh(FusionStrategy::VibAdaln);
        let prior = OuPriorConfig::default();
        let trace = train_stage(
            &mut m,
            &data,
            Stage::Stage1,
            50,
            &OptimizerConfig::default(),
            &prior,
            &StreamRng::new(2, "t"),
        )
        .unwrap();
        for r in &trace.records[..5] {
            assert_eq!(r.beta, 0.0);
            assert_eq!(r.loss, r.recon);
            assert!(r.vib > 0.0);
        }
        assert!(trace.records[5].beta > 0.0 || trace.records[6].beta > 0.0);
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = generate_corpus(&TaskConfig::default(), 32, 0).unwrap();
        let prior = OuPriorConfig::default();
        let run = || {
            let mut m = fresh(FusionStrategy::VanillaAdaln);
            train_stage(
                &mut m,
                &data,
                Stage::Stage1,
                20,
                &OptimizerConfig::default(),
                &prior,
                &StreamRng::new(3, "t"),
            )
            .unwrap();
            m.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_a_training_fault() {
        let data = generate_corpus(&TaskConfig::default(), 32, 0).unwrap();
        let mut m = fresh(FusionStrategy::ContentOnly);
        let opt = OptimizerConfig {
            lr: 1e3,
            clip_norm: 0.0,
            ..Default::default()
        };
        let err = train_stage(
            &mut m,
            &data,
            Stage::Stage1,
            400,
            &opt,
            &OuPriorConfig::default(),
            &StreamRng::new(0, "t"),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Training { .. } | Error::Numeric { .. }),
            "{err}"
        );
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut params = ParamSet::new();
        params.insert("w".into(), DenseArray::vector(vec![1.0]));
        let cfg = OptimizerConfig {
            lr: 0.1,
            momentum: 0.5,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut sgd = Sgd::new(&cfg, [("w".to_string(), 0.1)].into());
        let mut grads = Gradients::new();
        grads.insert("w".into(), DenseArray::vector(vec![2.0]));
        sgd.step(&mut params, &grads).unwrap();
        assert!((params["w"].data()[0] - 0.8).abs() < 1e-15);
        sgd.step(&mut params, &grads).unwrap();
        // v = 0.5·2 + 2 = 3
        assert!((params["w"].data()[0] - 0.5).abs() < 1e-15);
    }
}
