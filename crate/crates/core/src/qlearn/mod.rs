//! Recurrent Q-learning at desk scale: toy memory tasks, the Q pipeline,
//! tape and segment updates, training runs and gradient sensitivity.

pub mod env;
pub mod pipeline;
pub mod sensitivity;
pub mod train;
pub mod update;

pub use env::{TaskKind, ToyEnv, ToyEnvSpec};
pub use pipeline::{q_forward, q_tape, Actor, PipelineSpec, QForward};
pub use sensitivity::{final_q, sensitivity_profile, SensitivityProfile};
pub use train::{train, train_seed, Batching, EpochRecord, RunResult, TaskName, TrainConfig};
pub use update::{Adam, NextStateMode, QLearnOptions, QLearner, QLoss};
