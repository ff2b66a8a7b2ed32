//! Training loop, evaluation and per-epoch metrics.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, ReplayBuffer, Transition};
use crate::env::{DoneReason, Env, EnvError};
use crate::her::her_augment;
use crate::policy::{validate_action, Policy, PolicyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k_her: usize,
    pub start_steps: usize,
    pub update_after: usize,
    pub update_every: usize,
    pub n_epochs: usize,
    pub episodes_per_epoch: usize,
    pub max_episode_steps: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Passed through to the policy provider.
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k_her: 4,
            start_steps: 5000,
            update_after: 1000,
            update_every: 200,
            n_epochs: 200,
            episodes_per_epoch: 30,
            max_episode_steps: 100,
            batch_size: 128,
            buffer_capacity: 1_000_000,
            gamma: 0.99,
            alpha: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let counts = [
            self.k_her,
            self.start_steps,
            self.update_after,
            self.update_every,
            self.n_epochs,
            self.episodes_per_epoch,
            self.max_episode_steps,
            self.batch_size,
            self.buffer_capacity,
        ];
        if counts.contains(&0)
            || !(self.gamma > 0.0 && self.gamma < 1.0)
            || !(self.alpha > 0.0)
        {
            return Err(TrainError::Config(
                "all counts must be positive, gamma in (0, 1), alpha > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub episode: usize,
    pub seed: u64,
    pub steps: usize,
    pub reason: DoneReason,
    pub episode_return: f64,
    pub ticks: usize,
    pub unsafe_contacts: usize,
    pub safe_contacts: usize,
    pub audit_violations: usize,
    pub failsafe_ticks: usize,
    #[serde(skip)]
    pub tick_micros: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub success_rate: f64,
    pub unsafe_collision_rate: f64,
    pub safe_collision_rate: f64,
    pub timeout_rate: f64,
    pub mean_episode_steps: f64,
    pub tick_mean_us: f64,
    pub tick_median_us: f64,
    pub tick_p99_us: f64,
}

/// Nearest-rank percentile of unsorted samples; NaN when empty.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

impl EpochMetrics {
    pub fn from_records(epoch: usize, records: &[EpisodeRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let rate = |r: DoneReason| records.iter().filter(|e| e.reason == r).count() as f64 / n;
        let ticks: Vec<f64> = records
            .iter()
            .flat_map(|r| r.tick_micros.iter().copied())
            .collect();
        let mean = if ticks.is_empty() {
            f64::NAN
        } else {
            ticks.iter().sum::<f64>() / ticks.len() as f64
        };
        Self {
            epoch,
            success_rate: rate(DoneReason::GoalReached),
            unsafe_collision_rate: rate(DoneReason::UnsafeCollision),
            safe_collision_rate: rate(DoneReason::SafeCollision),
            timeout_rate: rate(DoneReason::Timeout),
            mean_episode_steps: records.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            tick_mean_us: mean,
            tick_median_us: percentile(&ticks, 50.0),
            tick_p99_us: percentile(&ticks, 99.0),
        }
    }
}

/// Receives results as they are produced.
pub trait MetricsSink {
    fn episode(&mut self, _record: &EpisodeRecord) {}
    fn epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl MetricsSink for () {}

/// Collects everything in memory.
#[derive(Default)]
pub struct MemorySink {
    pub episodes: Vec<EpisodeRecord>,
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsSink for MemorySink {
    fn episode(&mut self, record: &EpisodeRecord) {
        self.episodes.push(record.clone());
    }
    fn epoch(&mut self, metrics: &EpochMetrics) {
        self.epochs.push(metrics.clone());
    }
}

/// Seed of episode number `index` within a run.
pub fn episode_seed(run_seed: u64, index: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(run_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

/// Runs one episode, asking `act` for every action.
pub fn run_episode(
    env: &mut Env,
    seed: u64,
    max_steps: usize,
    mut act: impl FnMut(&[f64]) -> Result<Vec<f64>, TrainError>,
) -> Result<(EpisodeRecord, Vec<Transition>), TrainError> {
    let dof = env.dof();
    let mut obs = env.reset(seed)?.to_vec();
    let mut transitions = Vec::new();
    let mut reason = DoneReason::Timeout;
    for _ in 0..max_steps {
        let action = act(&obs)?;
        validate_action(&action, dof)?;
        let res = env.step(&action)?;
        let next_obs = res.observation.to_vec();
        transitions.push(Transition {
            obs: std::mem::replace(&mut obs, next_obs.clone()),
            action,
            reward: res.reward,
            next_obs,
            done: res.done,
        });
        if res.done {
            reason = res.reason;
            break;
        }
    }
    let stats = env.stats();
    let record = EpisodeRecord {
        epoch: 0,
        episode: 0,
        seed,
        steps: transitions.len(),
        reason,
        episode_return: transitions.iter().map(|t| t.reward).sum(),
        ticks: stats.ticks,
        unsafe_contacts: stats.unsafe_contacts,
        safe_contacts: stats.safe_contacts,
        audit_violations: stats.audit_violations,
        failsafe_ticks: stats.failsafe_ticks,
        tick_micros: env.tick_times().to_vec(),
    };
    Ok((record, transitions))
}

/// Runs `epochs` x `episodes` policy-driven episodes without learning.
pub fn evaluate(
    env: &mut Env,
    policy: &mut dyn Policy,
    run_seed: u64,
    epochs: usize,
    episodes: usize,
    max_steps: usize,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<EpochMetrics>, TrainError> {
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut records = Vec::with_capacity(episodes);
        for l in 0..episodes {
            let seed = episode_seed(run_seed, (epoch * episodes + l) as u64);
            policy.reset_notice(seed)?;
            let (mut rec, _) = run_episode(env, seed, max_steps, |o| Ok(policy.act(o)?))?;
            rec.epoch = epoch;
            rec.episode = l;
            sink.episode(&rec);
            records.push(rec);
        }
        let m = EpochMetrics::from_records(epoch, &records);
        sink.epoch(&m);
        out.push(m);
    }
    Ok(out)
}

/// One gated batch of update calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateFlush {
    pub t_total: usize,
    pub t_last_update: usize,
    pub calls: usize,
}

/// Everything needed to continue a run at the next epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub run_seed: u64,
    pub next_epoch: usize,
    pub t_total: usize,
    pub t_last_update: usize,
    pub update_calls: usize,
    pub flushes: Vec<UpdateFlush>,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<EpochMetrics>,
    pub policy_state: serde_json::Value,
}

pub struct Trainer {
    pub state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, run_seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        Ok(Self {
            state: TrainState {
                config,
                run_seed,
                next_epoch: 0,
                t_total: 0,
                t_last_update: 0,
                update_calls: 0,
                flushes: Vec::new(),
                buffer,
                rng: ChaCha8Rng::seed_from_u64(run_seed),
                metrics: Vec::new(),
                policy_state: serde_json::Value::Null,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let text = serde_json::to_string(&self.state)
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let tmp = path.as_ref().with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let state: TrainState =
            serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        Ok(Self { state })
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_epoch >= self.state.config.n_epochs
    }

    /// Runs epochs until done or `max_epochs` more have completed, saving a
    /// checkpoint after each epoch when `checkpoint` is given.
    pub fn run(
        &mut self,
        env: &mut Env,
        policy: &mut dyn Policy,
        sink: &mut dyn MetricsSink,
        checkpoint: Option<&Path>,
        max_epochs: Option<usize>,
    ) -> Result<(), TrainError> {
        if !self.state.policy_state.is_null() {
            policy.restore(&self.state.policy_state)?;
        }
        let dof = env.dof();
        let goal_tol = env.scenario().goal_tolerance;
        let mut done_epochs = 0;
        while !self.is_finished() && max_epochs.is_none_or(|m| done_epochs < m) {
            let epoch = self.state.next_epoch;
            let cfg = self.state.config.clone();
            let mut records = Vec::with_capacity(cfg.episodes_per_epoch);
            for l in 0..cfg.episodes_per_epoch {
                let seed = episode_seed(
                    self.state.run_seed,
                    (epoch * cfg.episodes_per_epoch + l) as u64,
                );
                policy.reset_notice(seed)?;
                let st = &mut self.state;
                let (mut rec, local) = run_episode(env, seed, cfg.max_episode_steps, |obs| {
                    let a = if st.t_total >= cfg.start_steps {
                        policy.act(obs)?
                    } else {
                        (0..dof).map(|_| st.rng.gen_range(-1.0..=1.0)).collect()
                    };
                    st.t_total += 1;
                    Ok(a)
                })?;
                rec.epoch = epoch;
                rec.episode = l;

                for t in her_augment(&local, cfg.k_her, dof, &mut st.rng, |a, g| {
                    crate::env::compute_reward(a, g, goal_tol)
                }) {
                    st.buffer.store(t);
                }

                if st.t_total >= cfg.update_after
                    && st.t_total - st.t_last_update >= cfg.update_every
                {
                    let calls = st.t_total - st.t_last_update;
                    for _ in 0..calls {
                        let batch = st.buffer.sample_batch(cfg.batch_size, &mut st.rng)?;
                        policy.update(&batch)?;
                    }
                    st.update_calls += calls;
                    st.flushes.push(UpdateFlush {
                        t_total: st.t_total,
                        t_last_update: st.t_last_update,
                        calls,
                    });
                    st.t_last_update = st.t_total;
                }
                sink.episode(&rec);
                records.push(rec);
            }
            let m = EpochMetrics::from_records(epoch, &records);
            sink.epoch(&m);
            self.state.metrics.push(m);
            self.state.next_epoch += 1;
            self.state.policy_state = policy.checkpoint()?;
            if let Some(p) = checkpoint {
                self.save(p)?;
            }
            done_epochs += 1;
        }
        Ok(())
    }
}
