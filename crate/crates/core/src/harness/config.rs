use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::reward::CollectConfig;
use crate::toy::probe::ProbeConfig;
use crate::toy::{GroundingMode, ModelConfig, OptimizerConfig, TaskConfig};
use crate::uapo::UapoConfig;
use crate::vib::OuPriorConfig;

/// Step count and optimizer of one supervised stage. `steps` is required
/// whenever the table is written out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl StageSchedule {
    fn with_steps(steps: usize) -> Self {
        StageSchedule {
            steps,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sampled rollouts per held-out input for the mean rubric reward.
    pub reward_rollouts: usize,
    /// Run the linear probes.
    pub probes: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            reward_rollouts: 8,
            probes: true,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub strategy: FusionStrategy,
    pub grounding: GroundingMode,
    pub corpus_size: usize,
    /// Seed of the fixed 80/20 train/held-out split.
    pub split_seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub prior: OuPriorConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    /// Stage 1 schedule of the content-only anchor policy.
    pub anchor: StageSchedule,
    /// Self-reward collection: K, τ and the rollout temperature.
    pub collect: CollectConfig,
    pub uapo: UapoConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            strategy: FusionStrategy::VibAdaln,
            grounding: GroundingMode::Acoustic,
            corpus_size: 4000,
            split_seed: 0,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            prior: OuPriorConfig::default(),
            stage1: StageSchedule::with_steps(2000),
            stage2: StageSchedule::with_steps(1000),
            anchor: StageSchedule::with_steps(2000),
            collect: CollectConfig::default(),
            uapo: UapoConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::contract("config: seeds must be nonempty"));
        }
        if self.corpus_size < 10 {
            return Err(Error::contract(format!(
                "config: corpus_size must be >= 10, got {}",
                self.corpus_size
            )));
        }
        self.task.validate()?;
        self.prior.validate()?;
        for (name, s) in [
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("anchor", &self.anchor),
        ] {
            if s.steps == 0 {
                return Err(Error::contract(format!("config: {name}.steps must be > 0")));
            }
            s.optimizer.validate()?;
        }
        self.collect.validate()?;
        self.uapo.validate()?;
        if self.eval.reward_rollouts == 0 {
            return Err(Error::contract("config: eval.reward_rollouts must be > 0"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 prefix of the canonical serialization, excluding the
    /// seeds and output directory so that cells of one experiment share it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out_dir = PathBuf::new();
        let text = c.to_toml().expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed-{seed}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.seeds = vec![3, 1, 4];
        c.prior.alpha = 0.1 + 0.2;
        c.collect.tau = 1.0 / 3.0;
        c.strategy = FusionStrategy::Additive;
        c.grounding = GroundingMode::Semantic;
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("seeds = [0]\nbogus = 1\n").unwrap_err();
        assert_eq!(err.kind(), "format");
        let err = ExperimentConfig::from_toml("[stage1]\nsteps = 5\nlr = 0.1\n").unwrap_err();
        assert_eq!(err.kind(), "format");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_toml("seeds = [7]\n[stage1]\nsteps = 5\n").unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.stage1.steps, 5);
        assert_eq!(c.stage2, ExperimentConfig::default().stage2);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("seeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("strategy = \"fancy\"\n").is_err());
        assert!(ExperimentConfig::from_toml("[prior]\nalpha = 1.5\n").is_err());
        assert!(ExperimentConfig::from_toml("[stage2.optimizer]\nlr = 0.1\n").is_err());
    }

    #[test]
    fn hash_ignores_seeds_and_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![9];
        b.out_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.collect.k = 16;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
