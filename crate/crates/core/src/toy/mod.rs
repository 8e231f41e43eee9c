//! Synthetic task, toy model, trainers and decoding.

pub mod decode;
pub mod model;
pub mod probe;
pub mod task;
pub mod train;

pub use decode::{decode_speech, DecodeMode, Rollout};
pub use model::{GroundingMode, ModelConfig, ParamGroup, SeqInput, ToyModel};
pub use task::{generate_corpus, read_corpus, write_corpus, Dataset, TaskConfig, Utterance};
pub use train::{train_stage, OptimizerConfig, Stage, TrainTrace};
