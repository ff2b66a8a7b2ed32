//! The RL environment: kinematic world, shield, episode logic and rewards.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safearm_core::geometry::{capsule_distance, capsules_intersect, Capsule, Vec3};
use safearm_core::human::{HumanMeasurement, HumanModel, ReachParams};
use safearm_core::robot::{KinematicChain, Pose, RobotConfigError};
use safearm_core::shield::{
    Branch, MotionController, Shield, ShieldConfig, ShieldError, Unshielded,
};
use safearm_core::trajectory::JointState;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::human_motion::{HumanSim, MotionClip, MotionError};
use crate::scenario::{GoalSpec, HumanBehavior, Scenario, ScenarioError, StaticScene};

/// Keypoints reported relative to the end effector, in observation order.
pub const OBSERVED_KEYPOINTS: [&str; 3] = ["left_wrist", "right_wrist", "head"];

/// Stand-in position for observed keypoints when no human is in the cell.
pub const ABSENT_HUMAN: Vec3 = Vec3::new(0.0, 0.0, 10.0);

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Robot(#[from] RobotConfigError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error("human model: {0}")]
    Human(String),
    #[error(transparent)]
    Shield(#[from] ShieldError),
    #[error("no collision-free episode goal after {0} draws")]
    GoalSamplingExhausted(usize),
    #[error("no collision-free intermediate goal after {0} resampled actions")]
    ResampleBudgetExhausted(usize),
    #[error("step called on a finished episode")]
    EpisodeAlreadyDone,
    #[error("step called before reset")]
    NotReset,
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    GoalReached,
    UnsafeCollision,
    SafeCollision,
    Timeout,
    Running,
}

impl DoneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DoneReason::GoalReached => "goal_reached",
            DoneReason::UnsafeCollision => "unsafe_collision",
            DoneReason::SafeCollision => "safe_collision",
            DoneReason::Timeout => "timeout",
            DoneReason::Running => "running",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub goal: Vec<f64>,
    pub end_effector: [f64; 3],
    /// Left wrist, right wrist and head minus the end effector.
    pub human_relative: [[f64; 3]; 3],
}

impl Observation {
    pub fn len_for(dof: usize) -> usize {
        3 * dof + 12
    }

    /// `q, qd, goal, end effector, relative keypoints`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::len_for(self.q.len()));
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.qd);
        v.extend_from_slice(&self.goal);
        v.extend_from_slice(&self.end_effector);
        for r in &self.human_relative {
            v.extend_from_slice(r);
        }
        v
    }
}

/// Joint positions stored in a flat observation.
pub fn achieved(obs: &[f64], dof: usize) -> &[f64] {
    &obs[..dof]
}

/// Goal slice of a flat observation.
pub fn goal_of(obs: &[f64], dof: usize) -> &[f64] {
    &obs[2 * dof..3 * dof]
}

/// Copy of `obs` with its goal replaced.
pub fn with_goal(obs: &[f64], dof: usize, goal: &[f64]) -> Vec<f64> {
    let mut v = obs.to_vec();
    v[2 * dof..3 * dof].copy_from_slice(goal);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub reason: DoneReason,
    /// Ticks simulated in this step.
    pub ticks: usize,
}

/// 0 iff every joint is strictly within `eps` of the goal, else -1.
pub fn compute_reward(achieved: &[f64], goal: &[f64], eps: f64) -> f64 {
    assert_eq!(achieved.len(), goal.len(), "reward needs equal lengths");
    if achieved.iter().zip(goal).all(|(a, g)| (a - g).abs() < eps) {
        0.0
    } else {
        -1.0
    }
}

/// Per-tick record of the contact audit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TickAudit {
    pub time: f64,
    pub contact: bool,
    pub moving: bool,
    pub min_distance: f64,
    pub compute_micros: f64,
}

/// Called with the audit of every simulated tick.
pub type TickObserver = Box<dyn FnMut(&TickAudit) + Send>;

/// Running totals over an episode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub ticks: usize,
    pub unsafe_contacts: usize,
    pub safe_contacts: usize,
    /// Ticks where the robot moved while the clearance to the human was not positive.
    pub audit_violations: usize,
    pub intended_ticks: usize,
    pub failsafe_ticks: usize,
    pub hold_ticks: usize,
}

pub struct Env {
    scenario: Scenario,
    chain: Arc<KinematicChain>,
    human_model: Option<Arc<HumanModel>>,
    shield_config: ShieldConfig,
    shield_enabled: bool,
    controller: Option<Box<dyn MotionController>>,
    human: HumanSim,
    observed: [Option<usize>; 3],
    rng: ChaCha8Rng,
    time: f64,
    steps: usize,
    goal: Vec<f64>,
    done: bool,
    stats: EpisodeStats,
    tick_times: Vec<f64>,
    meas: HumanMeasurement,
    truth: HumanMeasurement,
    poses: Vec<Pose>,
    links: Vec<Capsule>,
    bodies: Vec<Capsule>,
    on_tick: Option<TickObserver>,
}

impl Env {
    pub fn from_scenario(scenario: Scenario) -> Result<Self, EnvError> {
        Self::with_behavior(scenario.behavior(), scenario)
    }

    /// Loads the scenario's robot and human but replaces the human behavior.
    pub fn with_behavior(behavior: HumanBehavior, scenario: Scenario) -> Result<Self, EnvError> {
        scenario.validate()?;
        let chain = Arc::new(KinematicChain::load(&scenario.robot)?);
        if scenario.start.len() != chain.dof() {
            return Err(EnvError::DimensionMismatch {
                expected: chain.dof(),
                got: scenario.start.len(),
            });
        }
        if !chain.within_limits(&scenario.start) {
            return Err(EnvError::Invalid("start outside joint limits".into()));
        }
        let shield_config = ShieldConfig::default();
        let v_max = shield_config.traj_limits.v_max;
        if scenario.delta_q_max < v_max * scenario.rl_step {
            log::warn!(
                "delta_q_max {} is below v_max * rl_step = {}; the robot will stop after each action",
                scenario.delta_q_max,
                v_max * scenario.rl_step
            );
        }
        let human_model = match (&scenario.human_model, behavior) {
            (_, HumanBehavior::None) => None,
            (Some(p), _) => Some(Arc::new(
                HumanModel::load(p).map_err(|e| EnvError::Human(e.to_string()))?,
            )),
            (None, _) => Some(Arc::new(HumanModel::default_ten_body())),
        };
        let mut names = human_model
            .as_ref()
            .map(|m| m.keypoints())
            .unwrap_or_default();
        if human_model.is_some() {
            for k in OBSERVED_KEYPOINTS {
                if !names.iter().any(|n| n == k) {
                    names.push(k.to_string());
                }
            }
        }
        let clip = match (behavior, &scenario.human_motion) {
            (HumanBehavior::Playback, Some(p)) => {
                Some(Arc::new(MotionClip::load(p, shield_config.reach.v_max)?))
            }
            (HumanBehavior::Playback, None) => {
                return Err(EnvError::Invalid("playback needs a motion file".into()))
            }
            _ => None,
        };
        let human = HumanSim::new(behavior, clip, names, shield_config.reach.v_max)?;
        let observed = OBSERVED_KEYPOINTS.map(|k| human.names().iter().position(|n| n == k));
        let shield_enabled = scenario.shield;
        let q0 = scenario.start.clone();
        Ok(Self {
            goal: q0.clone(),
            scenario,
            chain,
            human_model,
            shield_config,
            shield_enabled,
            controller: None,
            human,
            observed,
            rng: ChaCha8Rng::seed_from_u64(0),
            time: 0.0,
            steps: 0,
            done: true,
            stats: EpisodeStats::default(),
            tick_times: Vec::new(),
            meas: HumanMeasurement::absent(0.0),
            truth: HumanMeasurement::absent(0.0),
            poses: Vec::new(),
            links: Vec::new(),
            bodies: Vec::new(),
            on_tick: None,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, EnvError> {
        Self::from_scenario(Scenario::load(path)?)
    }

    pub fn set_shield_enabled(&mut self, on: bool) {
        self.shield_enabled = on;
    }

    pub fn shield_enabled(&self) -> bool {
        self.shield_enabled
    }

    /// Called after every simulated tick with the audit record.
    pub fn set_tick_observer(&mut self, f: Option<TickObserver>) {
        self.on_tick = f;
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn chain(&self) -> &Arc<KinematicChain> {
        &self.chain
    }

    pub fn dof(&self) -> usize {
        self.chain.dof()
    }

    pub fn observation_len(&self) -> usize {
        Observation::len_for(self.dof())
    }

    pub fn episode_goal(&self) -> &[f64] {
        &self.goal
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    /// Shield computation time of every tick since the last reset (µs).
    pub fn tick_times(&self) -> &[f64] {
        &self.tick_times
    }

    pub fn human(&self) -> &HumanSim {
        &self.human
    }

    pub fn joint_state(&self) -> JointState {
        match &self.controller {
            Some(c) => c.joint_state().clone(),
            None => JointState::at_rest(self.scenario.start.clone()),
        }
    }

    pub fn compute_reward(&self, achieved: &[f64], goal: &[f64]) -> f64 {
        compute_reward(achieved, goal, self.scenario.goal_tolerance)
    }

    /// True iff any link capsule at `q` touches the table or the floor.
    pub fn static_collision(&self, q: &[f64]) -> bool {
        static_collision(&self.chain, &self.scenario.scene, q)
    }

    pub fn reset(&mut self, seed: u64) -> Result<Observation, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.time = 0.0;
        self.steps = 0;
        self.done = false;
        self.stats = EpisodeStats::default();
        self.tick_times.clear();
        let q0 = self.scenario.start.clone();
        self.controller = Some(if self.shield_enabled {
            let model = self
                .human_model
                .clone()
                .unwrap_or_else(|| Arc::new(HumanModel::default_ten_body()));
            Box::new(Shield::new(
                self.shield_config,
                Arc::clone(&self.chain),
                model,
                q0.clone(),
            ))
        } else {
            Box::new(Unshielded::new(
                self.shield_config,
                Arc::clone(&self.chain),
                q0.clone(),
            ))
        });
        let ee = self.chain.end_effector_position(&q0);
        let s = &self.scenario;
        self.human.reset(
            &mut self.rng,
            s.human_offset_x,
            s.human_offset_y,
            s.human_time_offset,
            s.human_clip_start,
            ee,
        );
        self.goal = self.sample_goal()?;
        Ok(self.observe())
    }

    fn sample_goal(&mut self) -> Result<Vec<f64>, EnvError> {
        let budget = self.scenario.sampling_budget;
        for _ in 0..budget {
            let g: Vec<f64> = match &self.scenario.goal {
                GoalSpec::Uniform => self
                    .chain
                    .joints
                    .iter()
                    .map(|j| self.rng.gen_range(j.min..=j.max))
                    .collect(),
                GoalSpec::FixedWithJitter { value, jitter } => {
                    let mut g: Vec<f64> = value
                        .iter()
                        .map(|v| {
                            if *jitter > 0.0 {
                                v + self.rng.gen_range(-jitter..=*jitter)
                            } else {
                                *v
                            }
                        })
                        .collect();
                    self.chain.clamp_to_limits(&mut g);
                    g
                }
            };
            if !self.static_collision(&g) {
                return Ok(g);
            }
        }
        Err(EnvError::GoalSamplingExhausted(budget))
    }

    /// `q + a * delta_q_max` clamped to the joint limits. A goal that hits the
    /// static scene is replaced by one from a uniformly resampled action.
    pub fn action_to_goal(&mut self, q: &[f64], action: &[f64]) -> Result<Vec<f64>, EnvError> {
        let dq = self.scenario.delta_q_max;
        let to_goal = |a: &[f64]| {
            let mut g: Vec<f64> = q.iter().zip(a).map(|(q, a)| q + a * dq).collect();
            self.chain.clamp_to_limits(&mut g);
            g
        };
        let g = to_goal(action);
        if !self.static_collision(&g) {
            return Ok(g);
        }
        let budget = self.scenario.sampling_budget;
        for _ in 0..budget {
            let a: Vec<f64> = (0..q.len())
                .map(|_| self.rng.gen_range(-1.0..=1.0))
                .collect();
            let g = to_goal(&a);
            if !self.static_collision(&g) {
                return Ok(g);
            }
        }
        Err(EnvError::ResampleBudgetExhausted(budget))
    }

    pub fn observe(&self) -> Observation {
        let state = self.joint_state();
        let ee = self.chain.end_effector_position(&state.q);
        let human_relative = self.observed.map(|idx| {
            let p = match idx {
                Some(i) if self.human.is_present() => self.human.positions()[i],
                _ => ABSENT_HUMAN,
            };
            (p - ee).to_array()
        });
        Observation {
            q: state.q,
            qd: state.qd,
            goal: self.goal.clone(),
            end_effector: ee.to_array(),
            human_relative,
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.controller.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.done {
            return Err(EnvError::EpisodeAlreadyDone);
        }
        let n = self.dof();
        if action.len() != n {
            return Err(EnvError::DimensionMismatch {
                expected: n,
                got: action.len(),
            });
        }
        let clamped: Vec<f64> = action
            .iter()
            .map(|&a| {
                if !(-1.0..=1.0).contains(&a) {
                    log::warn!("action component {a} outside [-1, 1], clamping");
                }
                if a.is_nan() {
                    0.0
                } else {
                    a.clamp(-1.0, 1.0)
                }
            })
            .collect();
        let q = self.joint_state().q;
        let target = self.action_to_goal(&q, &clamped)?;
        self.controller
            .as_mut()
            .expect("checked")
            .set_intermediate_goal(&target)?;

        let dt = self.shield_config.dt;
        let ticks_per_step = safearm_core::trajectory::ticks_for(self.scenario.rl_step, dt).max(1);
        let mut reason = DoneReason::Running;
        let mut ticks = 0;
        for _ in 0..ticks_per_step {
            let audit = self.tick()?;
            ticks += 1;
            if audit.contact {
                reason = if audit.moving {
                    DoneReason::UnsafeCollision
                } else {
                    DoneReason::SafeCollision
                };
                break;
            }
            let state = self.controller.as_ref().expect("checked").joint_state();
            if state
                .q
                .iter()
                .zip(&target)
                .all(|(a, b)| (a - b).abs() < self.scenario.inner_tolerance)
            {
                break;
            }
        }
        self.steps += 1;
        let observation = self.observe();
        let reward = self.compute_reward(&observation.q, &self.goal);
        if reason == DoneReason::Running {
            if reward == 0.0 {
                reason = DoneReason::GoalReached;
            } else if self.steps >= self.scenario.max_episode_steps {
                reason = DoneReason::Timeout;
            }
        }
        // Collisions are never rewarded, even at the goal.
        let reward = if reason == DoneReason::GoalReached {
            0.0
        } else {
            -1.0
        };
        self.done = reason != DoneReason::Running;
        Ok(StepResult {
            observation,
            reward,
            done: self.done,
            reason,
            ticks,
        })
    }

    /// One shield tick followed by the contact audit at the new time.
    fn tick(&mut self) -> Result<TickAudit, EnvError> {
        let t = self.time;
        let controller = self.controller.as_mut().expect("reset before tick");
        self.human
            .write_measurement(t, self.scenario.measurement_error, &mut self.meas);
        let cmd = controller.tick(t, &self.meas)?;
        let compute_micros = controller
            .last_diagnostics()
            .map_or(0.0, |d| d.compute_micros);
        self.tick_times.push(compute_micros);
        match cmd.branch {
            Branch::Intended => self.stats.intended_ticks += 1,
            Branch::Failsafe => self.stats.failsafe_ticks += 1,
            Branch::Hold => self.stats.hold_ticks += 1,
        }
        self.time = t + self.shield_config.dt;
        let ee = self.chain.end_effector_position(&cmd.desired.q);
        self.human.advance(self.time, ee);

        let moving = cmd.desired.qd.iter().any(|&v| v != 0.0);
        let (contact, min_distance) = self.contact(&cmd.desired.q);
        self.stats.ticks += 1;
        if contact {
            if moving {
                self.stats.unsafe_contacts += 1;
            } else {
                self.stats.safe_contacts += 1;
            }
        }
        if moving && min_distance <= 0.0 {
            self.stats.audit_violations += 1;
        }
        let audit = TickAudit {
            time: self.time,
            contact,
            moving,
            min_distance,
            compute_micros,
        };
        if let Some(f) = self.on_tick.as_mut() {
            f(&audit);
        }
        Ok(audit)
    }

    /// Contact flag and clearance between the links at `q` and the human now.
    fn contact(&mut self, q: &[f64]) -> (bool, f64) {
        let Some(model) = &self.human_model else {
            return (false, f64::INFINITY);
        };
        if !self.human.is_present() {
            return (false, f64::INFINITY);
        }
        self.chain
            .link_capsules_into(q, &mut self.poses, &mut self.links);
        self.human
            .write_measurement(self.time, 0.0, &mut self.truth);
        model
            .capsules_into(&self.truth.keypoints, 0.0, &mut self.bodies)
            .expect("keypoints checked at construction");
        let mut contact = false;
        let mut min = f64::INFINITY;
        for r in &self.links {
            for h in &self.bodies {
                contact |= capsules_intersect(r, h);
                min = min.min(capsule_distance(r, h));
            }
        }
        (contact, min)
    }

    /// Parameters of the human reach model used by the shield.
    pub fn reach_params(&self) -> ReachParams {
        self.shield_config.reach
    }

    pub fn shield_config(&self) -> &ShieldConfig {
        &self.shield_config
    }
}

pub fn static_collision(chain: &KinematicChain, scene: &StaticScene, q: &[f64]) -> bool {
    chain.link_capsules(q).iter().any(|c| scene.collides(c))
}
