//! The safety shield.
//!
//! Every tick the shield tries to extend the motion by one step of the intended
//! trajectory, followed by a failsafe stop from the end of that step. The step is
//! executed only if the swept robot occupancy of step plus stop is disjoint from
//! the human reachable occupancy over the same window. Otherwise the robot keeps
//! following the last failsafe that passed this check. Since that failsafe was
//! verified up to standstill, the robot is stopped before any human contact is
//! possible, and the argument chains from tick to tick starting from rest.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{capsule_distance, capsules_intersect, Capsule};
use crate::human::{
    reachable_occupancy_into, HumanError, HumanMeasurement, HumanModel, ReachParams,
};
use crate::robot::{swept_occupancy_into, KinematicChain, OccupancySet, Pose, SweepScratch};
use crate::trajectory::{
    plan_failsafe, plan_intended, JointState, LimitSet, PathState, Trajectory, TrajectoryError,
};

#[derive(Debug, Error, PartialEq)]
pub enum ShieldError {
    #[error("tick time {now} does not advance past {previous}")]
    ClockSkew { previous: f64, now: f64 },
    #[error("goal for joint {joint} ({value}) is outside the joint limits")]
    OutOfJointLimits { joint: usize, value: f64 },
    #[error("goal has {got} joints, robot has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Human(#[from] HumanError),
    #[error(transparent)]
    Planning(#[from] TrajectoryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShieldConfig {
    /// Tick period (s).
    pub dt: f64,
    pub traj_limits: LimitSet,
    pub fs_limits: LimitSet,
    /// Interval length for swept link enclosures (s).
    pub substep: f64,
    pub reach: ReachParams,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        Self {
            dt: 0.004,
            traj_limits: LimitSet::intended_default(),
            fs_limits: LimitSet::failsafe_default(),
            substep: 0.004,
            reach: ReachParams::default(),
        }
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0 && self.substep > 0.0) {
            return Err("dt and substep must be positive".into());
        }
        if !self.traj_limits.is_valid() || !self.fs_limits.is_valid() {
            return Err("limits must be positive".into());
        }
        if !(self.reach.v_max > 0.0) {
            return Err("human speed bound must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FollowIntended,
    FollowFailsafe,
    Stopped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Intended,
    Failsafe,
    Hold,
}

/// Desired state at the next tick.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionCommand {
    pub desired: JointState,
    pub branch: Branch,
}

/// Per-tick record for the metrics pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickDiagnostics {
    pub time: f64,
    pub mode: Mode,
    /// `None` when there was nothing to verify.
    pub verified: Option<bool>,
    /// Clearance between the current link capsules and the measured human bodies.
    pub min_distance: f64,
    pub robot_capsules: usize,
    pub compute_micros: f64,
}

/// Common surface of the shielded and unshielded controllers.
pub trait MotionController: Send {
    fn set_intermediate_goal(&mut self, goal: &[f64]) -> Result<(), ShieldError>;
    fn tick(&mut self, t: f64, meas: &HumanMeasurement) -> Result<MotionCommand, ShieldError>;
    fn joint_state(&self) -> &JointState;
    fn mode(&self) -> Mode;
    fn last_diagnostics(&self) -> Option<&TickDiagnostics>;
}

/// True iff no robot capsule touches any human capsule.
pub fn verify(robot_occ: &OccupancySet, human_occ: &OccupancySet) -> bool {
    robot_occ
        .capsules
        .iter()
        .all(|r| human_occ.capsules.iter().all(|h| !capsules_intersect(r, h)))
}

fn validate_goal(chain: &KinematicChain, goal: &[f64]) -> Result<(), ShieldError> {
    if goal.len() != chain.dof() {
        return Err(ShieldError::DimensionMismatch {
            expected: chain.dof(),
            got: goal.len(),
        });
    }
    for (i, (j, &g)) in chain.joints.iter().zip(goal).enumerate() {
        if !g.is_finite() || g < j.min || g > j.max {
            return Err(ShieldError::OutOfJointLimits { joint: i, value: g });
        }
    }
    Ok(())
}

#[derive(Default)]
struct Scratch {
    sweep: SweepScratch,
    step_occ: OccupancySet,
    stop_occ: OccupancySet,
    robot_occ: OccupancySet,
    human_occ: OccupancySet,
    poses: Vec<Pose>,
    links: Vec<Capsule>,
    bodies: Vec<Capsule>,
}

/// Shield state machine for one robot. Starts stopped.
pub struct Shield {
    config: ShieldConfig,
    chain: Arc<KinematicChain>,
    human: Arc<HumanModel>,
    state: JointState,
    mode: Mode,
    intended: Option<Arc<Trajectory>>,
    failsafe: Trajectory,
    pending_goal: Option<Vec<f64>>,
    active_goal: Option<Vec<f64>>,
    last_tick: Option<f64>,
    diagnostics: Option<TickDiagnostics>,
    scratch: Scratch,
}

impl Shield {
    pub fn new(
        config: ShieldConfig,
        chain: Arc<KinematicChain>,
        human: Arc<HumanModel>,
        q0: Vec<f64>,
    ) -> Self {
        assert_eq!(
            q0.len(),
            chain.dof(),
            "start configuration has the wrong length"
        );
        let failsafe = Trajectory::hold(q0.clone(), config.fs_limits);
        Self {
            config,
            chain,
            human,
            state: JointState::at_rest(q0),
            mode: Mode::Stopped,
            intended: None,
            failsafe,
            pending_goal: None,
            active_goal: None,
            last_tick: None,
            diagnostics: None,
            scratch: Scratch::default(),
        }
    }

    pub fn config(&self) -> &ShieldConfig {
        &self.config
    }

    pub fn pending_goal(&self) -> Option<&[f64]> {
        self.pending_goal.as_deref()
    }

    /// Goal of the trajectory currently being followed or re-attempted.
    pub fn active_goal(&self) -> Option<&[f64]> {
        self.active_goal.as_deref()
    }

    pub fn intended(&self) -> Option<&Arc<Trajectory>> {
        self.intended.as_ref()
    }

    /// Last failsafe trajectory that passed verification.
    pub fn failsafe(&self) -> &Trajectory {
        &self.failsafe
    }

    /// Builds the candidate intended trajectory for the tick at `t`, if any.
    fn candidate(&self, t: f64) -> Result<Option<Arc<Trajectory>>, ShieldError> {
        let goal = match (&self.pending_goal, self.mode, &self.intended) {
            (Some(g), _, _) => g,
            (None, Mode::FollowIntended, Some(traj)) => return Ok(Some(Arc::clone(traj))),
            (None, _, _) => match &self.active_goal {
                Some(g) => g,
                None => return Ok(None),
            },
        };
        match plan_intended(&self.state, goal, &self.config.traj_limits) {
            Ok(traj) => Ok(Some(Arc::new(traj.with_start_time(t)))),
            // not plannable from a hard-braking state yet; retry next tick
            Err(TrajectoryError::InfeasibleStart { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn min_distance(&mut self, meas: &HumanMeasurement) -> Result<f64, ShieldError> {
        if meas.is_empty() {
            return Ok(f64::INFINITY);
        }
        let s = &mut self.scratch;
        self.chain
            .link_capsules_into(&self.state.q, &mut s.poses, &mut s.links);
        self.human
            .capsules_into(&meas.keypoints, 0.0, &mut s.bodies)?;
        Ok(s.links
            .iter()
            .flat_map(|r| s.bodies.iter().map(move |h| capsule_distance(r, h)))
            .fold(f64::INFINITY, f64::min))
    }
}

impl MotionController for Shield {
    /// Takes effect at the next tick.
    fn set_intermediate_goal(&mut self, goal: &[f64]) -> Result<(), ShieldError> {
        validate_goal(&self.chain, goal)?;
        self.pending_goal = Some(goal.to_vec());
        Ok(())
    }

    fn tick(&mut self, t: f64, meas: &HumanMeasurement) -> Result<MotionCommand, ShieldError> {
        if let Some(prev) = self.last_tick {
            if !(t > prev) {
                return Err(ShieldError::ClockSkew {
                    previous: prev,
                    now: t,
                });
            }
        }
        let started = Instant::now();
        let t_next = t + self.config.dt;
        let min_distance = self.min_distance(meas)?;

        let mut verified = None;
        let mut accepted = None;
        if let Some(cand) = self.candidate(t)? {
            let at = PathState::on_schedule(&cand, t_next);
            let fs = plan_failsafe(&cand, at, &self.config.fs_limits).with_start_time(t_next);
            let t_stop = fs.end_time();
            let sc = &mut self.scratch;
            let substep = self.config.substep;
            swept_occupancy_into(
                &self.chain,
                &cand,
                t,
                t_next,
                substep,
                &mut sc.sweep,
                &mut sc.step_occ,
            );
            swept_occupancy_into(
                &self.chain,
                &fs,
                t_next,
                t_stop,
                substep,
                &mut sc.sweep,
                &mut sc.stop_occ,
            );
            sc.robot_occ.capsules.clear();
            sc.robot_occ
                .capsules
                .extend_from_slice(&sc.step_occ.capsules);
            sc.robot_occ
                .capsules
                .extend_from_slice(&sc.stop_occ.capsules);
            sc.robot_occ.t_begin = t;
            sc.robot_occ.t_end = t_stop;
            let staleness = (t - meas.timestamp).max(0.0);
            reachable_occupancy_into(
                &self.human,
                meas,
                t_stop - t + staleness,
                &self.config.reach,
                &mut sc.human_occ,
            )?;
            let ok = verify(&sc.robot_occ, &sc.human_occ);
            verified = Some(ok);
            if ok {
                accepted = Some((cand, fs));
            }
        }

        let command = match accepted {
            Some((cand, fs)) => {
                debug_assert_eq!(fs.start_time(), t_next);
                let desired = cand.sample(t_next);
                if self.pending_goal.is_some() {
                    self.active_goal = self.pending_goal.take();
                }
                self.intended = Some(cand);
                self.failsafe = fs;
                self.mode = Mode::FollowIntended;
                MotionCommand {
                    desired,
                    branch: Branch::Intended,
                }
            }
            None => {
                // The stored failsafe was verified through standstill; keep following it.
                let desired = self.failsafe.sample(t_next);
                let moving = !self.state.is_at_rest() || !desired.is_at_rest();
                self.intended = None;
                self.mode = if t_next >= self.failsafe.end_time() {
                    Mode::Stopped
                } else {
                    Mode::FollowFailsafe
                };
                let branch = if moving {
                    Branch::Failsafe
                } else {
                    Branch::Hold
                };
                MotionCommand { desired, branch }
            }
        };
        debug_assert!(self.mode != Mode::Stopped || command.desired.is_at_rest());

        self.state = command.desired.clone();
        self.last_tick = Some(t);
        self.diagnostics = Some(TickDiagnostics {
            time: t,
            mode: self.mode,
            verified,
            min_distance,
            robot_capsules: self.scratch.robot_occ.len(),
            compute_micros: started.elapsed().as_secs_f64() * 1e6,
        });
        Ok(command)
    }

    fn joint_state(&self) -> &JointState {
        &self.state
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn last_diagnostics(&self) -> Option<&TickDiagnostics> {
        self.diagnostics.as_ref()
    }
}

/// Executes intended trajectories without any verification (baseline).
pub struct Unshielded {
    config: ShieldConfig,
    chain: Arc<KinematicChain>,
    state: JointState,
    intended: Option<Trajectory>,
    pending_goal: Option<Vec<f64>>,
    last_tick: Option<f64>,
    diagnostics: Option<TickDiagnostics>,
}

impl Unshielded {
    pub fn new(config: ShieldConfig, chain: Arc<KinematicChain>, q0: Vec<f64>) -> Self {
        Self {
            config,
            chain,
            state: JointState::at_rest(q0),
            intended: None,
            pending_goal: None,
            last_tick: None,
            diagnostics: None,
        }
    }
}

impl MotionController for Unshielded {
    fn set_intermediate_goal(&mut self, goal: &[f64]) -> Result<(), ShieldError> {
        validate_goal(&self.chain, goal)?;
        self.pending_goal = Some(goal.to_vec());
        Ok(())
    }

    fn tick(&mut self, t: f64, _meas: &HumanMeasurement) -> Result<MotionCommand, ShieldError> {
        if let Some(prev) = self.last_tick {
            if !(t > prev) {
                return Err(ShieldError::ClockSkew {
                    previous: prev,
                    now: t,
                });
            }
        }
        let started = Instant::now();
        if let Some(goal) = self.pending_goal.take() {
            self.intended = Some(
                plan_intended(&self.state, &goal, &self.config.traj_limits)?.with_start_time(t),
            );
        }
        let t_next = t + self.config.dt;
        let (desired, branch) = match &self.intended {
            Some(traj) => (traj.sample(t_next), Branch::Intended),
            None => (self.state.clone(), Branch::Hold),
        };
        self.state = desired.clone();
        self.last_tick = Some(t);
        self.diagnostics = Some(TickDiagnostics {
            time: t,
            mode: self.mode(),
            verified: None,
            min_distance: f64::NAN,
            robot_capsules: 0,
            compute_micros: started.elapsed().as_secs_f64() * 1e6,
        });
        Ok(MotionCommand { desired, branch })
    }

    fn joint_state(&self) -> &JointState {
        &self.state
    }

    fn mode(&self) -> Mode {
        if self.state.is_at_rest() {
            Mode::Stopped
        } else {
            Mode::FollowIntended
        }
    }

    fn last_diagnostics(&self) -> Option<&TickDiagnostics> {
        self.diagnostics.as_ref()
    }
}
