use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::grad::ParamSet;
use crate::rng::{RngState, StreamRng};
use crate::toy::{GroundingMode, ModelConfig, Stage, TaskConfig, ToyModel};
use crate::vib::OuPriorConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A model snapshot plus everything needed to continue the pipeline from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub checkpoint_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub task: TaskConfig,
    pub model_config: ModelConfig,
    pub prior: OuPriorConfig,
    pub strategy: FusionStrategy,
    pub grounding: GroundingMode,
    pub backbone_seed: u64,
    pub params: ParamSet,
    /// Stream that the next pipeline stage draws from.
    pub rng: RngState,
    /// Summary of the objective trace of the stage that produced this checkpoint.
    #[serde(default)]
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        model: &ToyModel,
        stage: Stage,
        seed: u64,
        config_hash: &str,
        prior: &OuPriorConfig,
        next: &StreamRng,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage,
            checkpoint_id: checkpoint_id(model, stage, seed, config_hash),
            seed,
            config_hash: config_hash.to_string(),
            task: model.task.clone(),
            model_config: model.arch.clone(),
            prior: *prior,
            strategy: model.strategy,
            grounding: model.grounding,
            backbone_seed: model.backbone_seed,
            params: model.params.clone(),
            rng: next.state(),
            loss_trace: Vec::new(),
        }
    }

    /// Rebuilds the model, checking parameter names and shapes against a fresh one.
    pub fn model(&self) -> Result<ToyModel> {
        let fresh = ToyModel::new(
            self.task.clone(),
            self.model_config.clone(),
            self.strategy,
            self.grounding,
            &StreamRng::new(0, "shape-check"),
        )?;
        let names = |p: &ParamSet| p.keys().cloned().collect::<Vec<_>>();
        if names(&fresh.params) != names(&self.params) {
            return Err(Error::Format(format!(
                "checkpoint {}: parameter names {:?} do not match the model {:?}",
                self.checkpoint_id,
                names(&self.params),
                names(&fresh.params)
            )));
        }
        for (n, v) in &self.params {
            if fresh.params[n].shape() != v.shape() {
                return Err(Error::Format(format!(
                    "checkpoint {}: {n} has shape {:?}, expected {:?}",
                    self.checkpoint_id,
                    v.shape(),
                    fresh.params[n].shape()
                )));
            }
        }
        Ok(ToyModel {
            backbone_seed: self.backbone_seed,
            params: self.params.clone(),
            ..fresh
        })
    }

    pub fn next_rng(&self) -> StreamRng {
        StreamRng::restore(&self.rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match v.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "{}: unsupported checkpoint version {v}",
                    path.display()
                )))
            }
            None => {
                return Err(Error::Format(format!(
                    "{}: checkpoint has no version field",
                    path.display()
                )))
            }
        }
        serde_json::from_value(v).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Content hash of a model at a stage, as short hex.
pub fn checkpoint_id(model: &ToyModel, stage: Stage, seed: u64, config_hash: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(stage.as_str().as_bytes());
    for (n, v) in &model.params {
        h.update(n.as_bytes());
        for x in v.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    format!("{}-{}", stage, hex::encode(&h.finalize()[..6]))
}
