//! Jerk-limited joint trajectories.
//!
//! Intended trajectories are time-synchronized seven-segment S-curves from an
//! arbitrary `(q, qd, qdd)` to rest at a goal. Each joint profile is a list of
//! constant-jerk segments evaluated as exact cubics.
//!
//! Failsafe trajectories never leave the geometric path of the trajectory they
//! brake: they re-time it with a monotone path clock `tau(t)` whose rate is
//! brought to zero by a jerk-limited deceleration. With the rate expressed in
//! "equivalent joint velocity" units (`rate * v_max`), a reference cruising at
//! `v_max` stops in `v_max / a + a / j` under failsafe limits `(a, j)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking a start state against the limits.
pub const LIMIT_TOLERANCE: f64 = 1e-9;

const BISECTION_STEPS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("start state of joint {joint} violates the limits (qd = {qd}, qdd = {qdd})")]
    InfeasibleStart { joint: usize, qd: f64, qdd: f64 },
    #[error("dimension mismatch: start has {start} joints, goal has {goal}")]
    DimensionMismatch { start: usize, goal: usize },
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSet {
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
}

impl LimitSet {
    pub const fn new(v_max: f64, a_max: f64, j_max: f64) -> Self {
        Self {
            v_max,
            a_max,
            j_max,
        }
    }

    /// Gentle limits for intended motion.
    pub const fn intended_default() -> Self {
        Self::new(2.0, 2.0, 15.0)
    }

    /// Braking limits. Velocity is never increased while braking, so `v_max`
    /// only matters for bookkeeping.
    pub const fn failsafe_default() -> Self {
        Self::new(2.0, 10.0, 400.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.v_max, self.a_max, self.j_max]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl JointState {
    pub fn new(q: Vec<f64>, qd: Vec<f64>, qdd: Vec<f64>) -> Self {
        debug_assert!(q.len() == qd.len() && q.len() == qdd.len());
        Self { q, qd, qdd }
    }

    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        Self::new(q, vec![0.0; n], vec![0.0; n])
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_at_rest(&self) -> bool {
        self.qd.iter().chain(&self.qdd).all(|x| *x == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qd)
            .chain(&self.qdd)
            .all(|x| x.is_finite())
    }

    pub fn max_speed(&self) -> f64 {
        self.qd.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One constant-jerk piece with its initial conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JerkSegment {
    /// Offset of the segment start from the profile start.
    pub offset: f64,
    pub duration: f64,
    pub jerk: f64,
    pub p: f64,
    pub v: f64,
    pub a: f64,
}

impl JerkSegment {
    #[inline]
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (j, a, v, p) = (self.jerk, self.a, self.v, self.p);
        (
            p + t * (v + t * (a / 2.0 + t * j / 6.0)),
            v + t * (a + t * j / 2.0),
            a + t * j,
        )
    }
}

/// Piecewise-constant-jerk motion of a single scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    segments: Vec<JerkSegment>,
    duration: f64,
    terminal: (f64, f64, f64),
}

impl Profile {
    /// Integrates `(jerk, duration)` pieces from `(p, v, a)`. The terminal state
    /// is pinned to `(end_position, 0, 0)`; the pieces must bring `v` and `a` to zero.
    fn integrate(p: f64, v: f64, a: f64, pieces: &[(f64, f64)], end_position: Option<f64>) -> Self {
        let mut segments = Vec::with_capacity(pieces.len());
        let (mut p, mut v, mut a) = (p, v, a);
        let mut offset = 0.0;
        for &(jerk, duration) in pieces {
            if duration <= 0.0 {
                continue;
            }
            let seg = JerkSegment {
                offset,
                duration,
                jerk,
                p,
                v,
                a,
            };
            (p, v, a) = seg.eval(duration);
            segments.push(seg);
            offset += duration;
        }
        Self {
            segments,
            duration: offset,
            terminal: (end_position.unwrap_or(p), 0.0, 0.0),
        }
    }

    pub fn segments(&self) -> &[JerkSegment] {
        &self.segments
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    /// `(position, velocity, acceleration)` at local time `t`, clamped to the profile.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        if t >= self.duration {
            return self.terminal;
        }
        let t = t.max(0.0);
        let seg = self
            .segments
            .iter()
            .rev()
            .find(|s| s.offset <= t)
            .unwrap_or(&self.segments[0]);
        seg.eval(t - seg.offset)
    }

    /// Jerk active at local time `t` (zero outside the profile).
    pub fn jerk_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.duration {
            return 0.0;
        }
        self.segments
            .iter()
            .rev()
            .find(|s| s.offset <= t)
            .map_or(0.0, |s| s.jerk)
    }
}

/// Pieces taking `(v0, a0)` to `(v1, 0)` with `|a| <= a_max`, `|j| = j_max`.
///
/// Acceleration ramps towards a peak, optionally holds at `a_max`, then ramps back
/// to zero. The direction is decided against the velocity reached by zeroing the
/// acceleration immediately.
fn velocity_change(v0: f64, a0: f64, v1: f64, a_max: f64, j_max: f64) -> [(f64, f64); 3] {
    let v_free = v0 + a0 * a0.abs() / (2.0 * j_max);
    if v1 == v_free {
        return [
            (-a0.signum() * j_max, a0.abs() / j_max),
            (0.0, 0.0),
            (0.0, 0.0),
        ];
    }
    let dir = if v1 > v_free { 1.0 } else { -1.0 };
    let a0 = a0 * dir;
    let dv = (v1 - v0) * dir;
    let mut peak = ((2.0 * j_max * dv + a0 * a0) / 2.0).max(0.0).sqrt();
    let mut hold = 0.0;
    if peak > a_max {
        peak = a_max;
        hold = ((dv - (2.0 * peak * peak - a0 * a0) / (2.0 * j_max)) / peak).max(0.0);
    }
    [
        (dir * j_max, ((peak - a0) / j_max).max(0.0)),
        (0.0, hold),
        (-dir * j_max, peak / j_max),
    ]
}

/// Displacement and elapsed time of `pieces` starting from `(v, a)`.
fn pieces_motion(mut v: f64, mut a: f64, pieces: &[(f64, f64)]) -> (f64, f64) {
    let mut dp = 0.0;
    let mut dt = 0.0;
    for &(j, t) in pieces {
        if t <= 0.0 {
            continue;
        }
        dp += t * (v + t * (a / 2.0 + t * j / 6.0));
        v += t * (a + t * j / 2.0);
        a += t * j;
        dt += t;
    }
    (dp, dt)
}

/// Single-joint plan of the form: change velocity to `cruise`, hold it for
/// `cruise_time`, brake to rest.
#[derive(Clone, Copy, Debug)]
struct JointPlan {
    accel: [(f64, f64); 3],
    cruise: f64,
    cruise_time: f64,
    decel: [(f64, f64); 3],
    dwell: f64,
}

impl JointPlan {
    fn pieces(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(8);
        out.extend_from_slice(&self.accel);
        out.push((0.0, self.cruise_time));
        out.extend_from_slice(&self.decel);
        out.push((0.0, self.dwell));
        out
    }
}

/// Per-joint boundary problem: `(p, v, a)` to rest at `goal`.
#[derive(Clone, Copy, Debug)]
struct JointProblem {
    p: f64,
    v: f64,
    a: f64,
    goal: f64,
    limits: LimitSet,
}

impl JointProblem {
    fn is_null(&self) -> bool {
        self.v == 0.0 && self.a == 0.0 && self.p == self.goal
    }

    /// Position reached and time taken when cruising at `cruise` for zero time.
    fn ramp(&self, cruise: f64) -> ([(f64, f64); 3], [(f64, f64); 3], f64, f64) {
        let LimitSet { a_max, j_max, .. } = self.limits;
        let accel = velocity_change(self.v, self.a, cruise, a_max, j_max);
        let decel = velocity_change(cruise, 0.0, 0.0, a_max, j_max);
        let (d1, t1) = pieces_motion(self.v, self.a, &accel);
        let (d2, t2) = pieces_motion(cruise, 0.0, &decel);
        (accel, decel, self.p + d1 + d2, t1 + t2)
    }

    fn plan_with_cruise(&self, cruise: f64) -> (JointPlan, f64) {
        let (accel, decel, reach, ramp_time) = self.ramp(cruise);
        let cruise_time = if cruise == 0.0 {
            0.0
        } else {
            ((self.goal - reach) / cruise).max(0.0)
        };
        let plan = JointPlan {
            accel,
            cruise,
            cruise_time,
            decel,
            dwell: 0.0,
        };
        (plan, ramp_time + cruise_time)
    }

    fn reach(&self, cruise: f64) -> f64 {
        self.ramp(cruise).2
    }

    /// Fastest plan within the profile family.
    fn fastest(&self) -> (JointPlan, f64) {
        let v_max = self.limits.v_max;
        if self.goal >= self.reach(v_max) {
            return self.plan_with_cruise(v_max);
        }
        if self.goal <= self.reach(-v_max) {
            return self.plan_with_cruise(-v_max);
        }
        // reach() is increasing in the cruise velocity; find the peak that lands on goal.
        let (mut lo, mut hi) = (-v_max, v_max);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if self.reach(mid) < self.goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (plan, t) = self.plan_with_cruise(0.5 * (lo + hi));
        (
            JointPlan {
                cruise_time: 0.0,
                ..plan
            },
            t - plan.cruise_time,
        )
    }

    /// Plan lasting exactly `total`, obtained by lowering the cruise velocity.
    /// Falls back to resting at the goal once the fastest plan has finished.
    fn stretched(&self, fastest: JointPlan, fastest_time: f64, total: f64) -> JointPlan {
        let with_dwell = JointPlan {
            dwell: (total - fastest_time).max(0.0),
            ..fastest
        };
        let stop_point = self.reach(0.0);
        let dir = (self.goal - stop_point).signum();
        if self.goal == stop_point || fastest.cruise * dir <= 0.0 {
            return with_dwell;
        }
        let duration = |speed: f64| self.plan_with_cruise(dir * speed).1;
        let (mut lo, mut hi) = (0.0, fastest.cruise.abs());
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if duration(mid) > total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (plan, t) = self.plan_with_cruise(dir * hi);
        if !(t <= total) || hi == 0.0 {
            return with_dwell;
        }
        // Absorb the residual time into the cruise so every joint ends together.
        let ramp_time = t - plan.cruise_time;
        JointPlan {
            cruise_time: (total - ramp_time).max(0.0),
            ..plan
        }
    }
}

/// Position along a trajectory's own clock plus the clock rate.
///
/// `tau` is measured in reference-trajectory seconds from its start; `rate` is
/// `d tau / dt` (1 when following the reference on schedule). The normalized path
/// parameter `s = tau / duration` is available through [`PathState::s`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathState {
    pub tau: f64,
    pub rate: f64,
    pub rate_dot: f64,
}

impl PathState {
    /// Following `traj` on schedule at absolute time `t`.
    pub fn on_schedule(traj: &Trajectory, t: f64) -> Self {
        let tau = (t - traj.start_time).clamp(0.0, traj.duration);
        let rate = if tau < traj.duration { 1.0 } else { 0.0 };
        Self {
            tau,
            rate,
            rate_dot: 0.0,
        }
    }

    pub fn at_rest(tau: f64) -> Self {
        Self {
            tau,
            rate: 0.0,
            rate_dot: 0.0,
        }
    }

    /// Builds a path state from normalized `(s, sd, sdd)` over `traj`.
    pub fn from_normalized(traj: &Trajectory, s: f64, sd: f64, sdd: f64) -> Self {
        let d = traj.duration;
        Self {
            tau: s.clamp(0.0, 1.0) * d,
            rate: sd.max(0.0) * d,
            rate_dot: sdd * d,
        }
    }

    pub fn s(&self, traj: &Trajectory) -> f64 {
        if traj.duration > 0.0 {
            (self.tau / traj.duration).clamp(0.0, 1.0)
        } else {
            1.0
        }
    }

    pub fn sd(&self, traj: &Trajectory) -> f64 {
        if traj.duration > 0.0 {
            self.rate / traj.duration
        } else {
            0.0
        }
    }

    pub fn sdd(&self, traj: &Trajectory) -> f64 {
        if traj.duration > 0.0 {
            self.rate_dot / traj.duration
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Motion {
    /// One constant-jerk profile per joint.
    Profiles(Vec<Profile>),
    /// `reference` re-timed by `tau(t) = tau0 + clock.position / v_ref`.
    PathScaled {
        reference: Arc<Trajectory>,
        tau0: f64,
        clock: Profile,
    },
}

/// Time-parameterized joint motion that ends at rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    start_time: f64,
    duration: f64,
    goal: Vec<f64>,
    limits: LimitSet,
    motion: Motion,
}

impl Trajectory {
    /// Robot standing still at `q` from `start_time` on.
    pub fn hold(q: Vec<f64>, limits: LimitSet) -> Self {
        let profiles = q
            .iter()
            .map(|&p| Profile::integrate(p, 0.0, 0.0, &[], Some(p)))
            .collect();
        Self {
            start_time: 0.0,
            duration: 0.0,
            goal: q,
            limits,
            motion: Motion::Profiles(profiles),
        }
    }

    pub fn with_start_time(mut self, start_time: f64) -> Self {
        self.start_time = start_time;
        self
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration
    }

    pub fn goal(&self) -> &[f64] {
        &self.goal
    }

    pub fn limits(&self) -> &LimitSet {
        &self.limits
    }

    pub fn dof(&self) -> usize {
        self.goal.len()
    }

    /// Per-joint profiles, or `None` for a re-timed (failsafe) trajectory.
    pub fn profiles(&self) -> Option<&[Profile]> {
        match &self.motion {
            Motion::Profiles(p) => Some(p),
            Motion::PathScaled { .. } => None,
        }
    }

    /// The braked reference and the path clock, for a failsafe trajectory.
    pub fn path_clock(&self) -> Option<(&Arc<Trajectory>, f64, &Profile)> {
        match &self.motion {
            Motion::Profiles(_) => None,
            Motion::PathScaled {
                reference,
                tau0,
                clock,
            } => Some((reference, *tau0, clock)),
        }
    }

    /// Reference time reached at absolute time `t` (failsafe trajectories only;
    /// otherwise the clock runs on schedule).
    pub fn path_time(&self, t: f64) -> f64 {
        let local = (t - self.start_time).max(0.0);
        match &self.motion {
            Motion::Profiles(_) => local.min(self.duration),
            Motion::PathScaled {
                reference,
                tau0,
                clock,
            } => {
                let v_ref = reference.limits.v_max;
                (tau0 + clock.eval(local).0 / v_ref).min(reference.duration)
            }
        }
    }

    /// Exact state at absolute time `t`, clamped to `[start_time, end_time]`.
    pub fn sample(&self, t: f64) -> JointState {
        let mut out = JointState::at_rest(vec![0.0; self.dof()]);
        self.sample_into(t, &mut out);
        out
    }

    /// Allocation-free [`Trajectory::sample`].
    pub fn sample_into(&self, t: f64, out: &mut JointState) {
        // `t - start_time` can round below `duration` at `t == end_time()`
        let local = if t >= self.end_time() {
            self.duration
        } else {
            (t - self.start_time).max(0.0)
        };
        self.sample_local_into(local, out);
    }

    /// Sample at `local` seconds after the start.
    fn sample_local_into(&self, local: f64, out: &mut JointState) {
        if local >= self.duration {
            out.q.copy_from_slice(&self.goal);
            out.qd.iter_mut().for_each(|x| *x = 0.0);
            out.qdd.iter_mut().for_each(|x| *x = 0.0);
            return;
        }
        match &self.motion {
            Motion::Profiles(profiles) => {
                for (i, prof) in profiles.iter().enumerate() {
                    let (p, v, a) = prof.eval(local);
                    out.q[i] = p;
                    out.qd[i] = v;
                    out.qdd[i] = a;
                }
            }
            Motion::PathScaled {
                reference,
                tau0,
                clock,
            } => {
                let v_ref = reference.limits.v_max;
                let (pos, vel, acc) = clock.eval(local);
                let tau = tau0 + pos / v_ref;
                let (rate, rate_dot) = (vel / v_ref, acc / v_ref);
                reference.sample_local_into(tau, out);
                if tau >= reference.duration {
                    return;
                }
                for i in 0..out.q.len() {
                    let (d1, d2) = (out.qd[i], out.qdd[i]);
                    out.qd[i] = d1 * rate;
                    out.qdd[i] = d2 * rate * rate + d1 * rate_dot;
                }
            }
        }
    }

    /// Path state at absolute time `t`.
    pub fn path_state_at(&self, t: f64) -> PathState {
        let local = (t - self.start_time).max(0.0);
        match &self.motion {
            Motion::Profiles(_) => PathState::on_schedule(self, t),
            Motion::PathScaled {
                reference,
                tau0,
                clock,
            } => {
                let v_ref = reference.limits.v_max;
                let (pos, vel, acc) = clock.eval(local);
                PathState {
                    tau: tau0 + pos / v_ref,
                    rate: vel / v_ref,
                    rate_dot: acc / v_ref,
                }
            }
        }
    }
}

fn check_start(start: &JointState, limits: &LimitSet) -> Result<(), TrajectoryError> {
    if !start.is_finite() {
        return Err(TrajectoryError::NonFinite);
    }
    let tol = LIMIT_TOLERANCE;
    for (i, (&v, &a)) in start.qd.iter().zip(&start.qdd).enumerate() {
        // Under the jerk bound the velocity keeps moving by a|a|/2j after any
        // attempt to zero the acceleration, so that must stay in range too.
        let v_free = v + a * a.abs() / (2.0 * limits.j_max);
        if v.abs() > limits.v_max + tol
            || a.abs() > limits.a_max + tol
            || v_free.abs() > limits.v_max + tol
        {
            return Err(TrajectoryError::InfeasibleStart {
                joint: i,
                qd: v,
                qdd: a,
            });
        }
    }
    Ok(())
}

/// Time-synchronized trajectory from `start` to rest at `goal`.
///
/// Every joint gets the duration of the slowest joint's fastest profile; faster
/// joints lower their cruise velocity to match, or rest at the goal when that is
/// not possible.
pub fn plan_intended(
    start: &JointState,
    goal: &[f64],
    limits: &LimitSet,
) -> Result<Trajectory, TrajectoryError> {
    if start.dof() != goal.len() {
        return Err(TrajectoryError::DimensionMismatch {
            start: start.dof(),
            goal: goal.len(),
        });
    }
    if goal.iter().any(|g| !g.is_finite()) {
        return Err(TrajectoryError::NonFinite);
    }
    check_start(start, limits)?;

    let problems: Vec<JointProblem> = (0..goal.len())
        .map(|i| JointProblem {
            p: start.q[i],
            v: start.qd[i],
            a: start.qdd[i],
            goal: goal[i],
            limits: *limits,
        })
        .collect();
    let fastest: Vec<Option<(JointPlan, f64)>> = problems
        .iter()
        .map(|p| (!p.is_null()).then(|| p.fastest()))
        .collect();
    let total = fastest
        .iter()
        .flatten()
        .fold(0.0_f64, |m, (_, t)| m.max(*t));

    let profiles: Vec<Profile> = problems
        .iter()
        .zip(&fastest)
        .map(|(prob, plan)| {
            let pieces = match plan {
                None => vec![(0.0, total)],
                Some((plan, t)) if *t >= total => plan.pieces(),
                Some((plan, t)) => prob.stretched(*plan, *t, total).pieces(),
            };
            Profile::integrate(prob.p, prob.v, prob.a, &pieces, Some(prob.goal))
        })
        .collect();
    let duration = profiles.iter().fold(0.0_f64, |m, p| m.max(p.duration()));
    Ok(Trajectory {
        start_time: 0.0,
        duration,
        goal: goal.to_vec(),
        limits: *limits,
        motion: Motion::Profiles(profiles),
    })
}

/// Path-consistent stop of `intended` from path state `at`.
///
/// The clock rate, scaled to equivalent joint velocity by the reference's
/// `v_max`, is braked to zero under `fs_limits`. The result starts at the
/// scheduled time of `at.tau`; callers braking off-schedule re-base it with
/// [`Trajectory::with_start_time`].
pub fn plan_failsafe(
    intended: &Arc<Trajectory>,
    at: PathState,
    fs_limits: &LimitSet,
) -> Trajectory {
    let v_ref = intended.limits.v_max;
    let tau0 = at.tau.clamp(0.0, intended.duration);
    let (speed, accel) = if tau0 >= intended.duration {
        (0.0, 0.0)
    } else {
        (at.rate.max(0.0) * v_ref, at.rate_dot * v_ref)
    };
    let pieces = if speed == 0.0 && accel == 0.0 {
        Vec::new()
    } else {
        velocity_change(speed, accel, 0.0, fs_limits.a_max, fs_limits.j_max).to_vec()
    };
    let clock = Profile::integrate(0.0, speed, accel, &pieces, None);
    let tau_end = (tau0 + clock.terminal.0 / v_ref).min(intended.duration);
    Trajectory {
        start_time: intended.start_time + tau0,
        duration: clock.duration(),
        goal: {
            let mut end = JointState::at_rest(vec![0.0; intended.dof()]);
            intended.sample_local_into(tau_end, &mut end);
            end.q
        },
        limits: *fs_limits,
        motion: Motion::PathScaled {
            reference: Arc::clone(intended),
            tau0,
            clock,
        },
    }
}

/// Number of `dt` ticks needed to stop from `at` along `traj`.
pub fn stopping_horizon(
    traj: &Arc<Trajectory>,
    at: PathState,
    fs_limits: &LimitSet,
    dt: f64,
) -> usize {
    let stop = plan_failsafe(traj, at, fs_limits).duration();
    ticks_for(stop, dt)
}

/// `ceil(duration / dt)`, robust to representation error in the quotient.
pub fn ticks_for(duration: f64, dt: f64) -> usize {
    if duration <= 0.0 {
        return 0;
    }
    let ratio = duration / dt;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        ratio.ceil() as usize
    }
}
