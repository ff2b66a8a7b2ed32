//! Policy providers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Transition;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy returned an invalid action: {0}")]
    InvalidAction(String),
    #[error("policy provider failed: {0}")]
    Provider(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub values: BTreeMap<String, f64>,
}

/// `act` maps a flat `s || g` observation to an action in `[-1, 1]^N`.
pub trait Policy {
    fn name(&self) -> &str;
    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>, PolicyError>;
    fn update(&mut self, batch: &[Transition]) -> Result<UpdateDiagnostics, PolicyError>;
    fn reset_notice(&mut self, _seed: u64) -> Result<(), PolicyError> {
        Ok(())
    }
    /// Provider state for run checkpoints.
    fn checkpoint(&mut self) -> Result<serde_json::Value, PolicyError> {
        Ok(serde_json::Value::Null)
    }
    fn restore(&mut self, _state: &serde_json::Value) -> Result<(), PolicyError> {
        Ok(())
    }
}

/// Rejects actions of the wrong length or outside `[-1, 1]`.
pub fn validate_action(action: &[f64], dof: usize) -> Result<(), PolicyError> {
    if action.len() != dof {
        return Err(PolicyError::InvalidAction(format!(
            "expected {dof} components, got {}",
            action.len()
        )));
    }
    if let Some(a) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(PolicyError::InvalidAction(format!(
            "component {a} outside [-1, 1]"
        )));
    }
    Ok(())
}

fn noop_update(batch: &[Transition]) -> UpdateDiagnostics {
    let mut values = BTreeMap::new();
    values.insert("batch_size".to_string(), batch.len() as f64);
    UpdateDiagnostics { values }
}

/// Uniform over `[-1, 1]^N`.
pub struct RandomPolicy {
    dof: usize,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(dof: usize, seed: u64) -> Self {
        Self {
            dof,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, _obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        Ok((0..self.dof)
            .map(|_| self.rng.gen_range(-1.0..=1.0))
            .collect())
    }

    fn update(&mut self, batch: &[Transition]) -> Result<UpdateDiagnostics, PolicyError> {
        Ok(noop_update(batch))
    }

    fn checkpoint(&mut self) -> Result<serde_json::Value, PolicyError> {
        serde_json::to_value(&self.rng).map_err(|e| PolicyError::Provider(e.to_string()))
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), PolicyError> {
        self.rng = serde_json::from_value(state.clone())
            .map_err(|e| PolicyError::Provider(e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedMode {
    /// Straight to the episode goal.
    GoalSeeking,
    /// Swings the arm toward the human's head, trying to provoke contact.
    HumanSeeking,
}

pub struct ScriptedPolicy {
    dof: usize,
    delta_q_max: f64,
    mode: ScriptedMode,
    /// Joint targets for joints after the first while reaching for the human.
    reach_pose: Vec<f64>,
}

impl ScriptedPolicy {
    pub fn new(dof: usize, delta_q_max: f64, mode: ScriptedMode) -> Self {
        let reach_pose = if dof == 6 {
            vec![1.1, 0.7, 0.0, 0.6, 0.0]
        } else {
            vec![0.5; dof.saturating_sub(1)]
        };
        Self {
            dof,
            delta_q_max,
            mode,
            reach_pose,
        }
    }

    fn toward(&self, q: &[f64], target: &[f64]) -> Vec<f64> {
        q.iter()
            .zip(target)
            .map(|(q, t)| ((t - q) / self.delta_q_max).clamp(-1.0, 1.0))
            .collect()
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        match self.mode {
            ScriptedMode::GoalSeeking => "scripted_goal",
            ScriptedMode::HumanSeeking => "scripted_human",
        }
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let n = self.dof;
        if obs.len() != 3 * n + 12 {
            return Err(PolicyError::Provider(format!(
                "observation has length {}",
                obs.len()
            )));
        }
        let q = &obs[..n];
        let target: Vec<f64> = match self.mode {
            ScriptedMode::GoalSeeking => obs[2 * n..3 * n].to_vec(),
            ScriptedMode::HumanSeeking => {
                let ee = &obs[3 * n..3 * n + 3];
                let head = &obs[3 * n + 9..3 * n + 12];
                let (x, y) = (ee[0] + head[0], ee[1] + head[1]);
                let mut t = vec![y.atan2(x)];
                t.extend_from_slice(&self.reach_pose);
                t
            }
        };
        Ok(self.toward(q, &target))
    }

    fn update(&mut self, batch: &[Transition]) -> Result<UpdateDiagnostics, PolicyError> {
        Ok(noop_update(batch))
    }
}
