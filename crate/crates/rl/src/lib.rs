//! Reinforcement-learning environment and training loop around the safety shield.
// `!(x > 0.0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod buffer;
pub mod env;
pub mod her;
pub mod human_motion;
pub mod policy;
pub mod scenario;
pub mod train;

pub use buffer::{ReplayBuffer, Transition};
pub use env::{compute_reward, DoneReason, Env, EnvError, Observation, StepResult};
pub use her::her_augment;
pub use policy::{Policy, RandomPolicy, ScriptedMode, ScriptedPolicy};
pub use scenario::{HumanBehavior, Scenario};
pub use train::{EpochMetrics, TrainConfig, Trainer};
