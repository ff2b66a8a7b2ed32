//! Serial-chain kinematics and link occupancy.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{enclosing_capsule, Capsule, Segment, Vec3};
use crate::trajectory::{JointState, Trajectory};

#[derive(Debug, Error)]
pub enum RobotConfigError {
    #[error("reading robot config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing robot config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid robot config: {0}")]
    Invalid(String),
}

/// Row-major 3x3 rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3(pub [[f64; 3]; 3]);

impl Rot3 {
    pub const IDENTITY: Rot3 = Rot3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Fixed-axis roll, pitch, yaw: `Rz(yaw) * Ry(pitch) * Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Rot3([
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ])
    }

    /// Rodrigues rotation about a unit `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let Vec3 { x, y, z } = axis;
        Rot3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    #[inline]
    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul(&self, o: &Rot3) -> Rot3 {
        let (a, b) = (&self.0, &o.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Rot3(out)
    }
}

/// Rigid transform `x -> rot * x + trans`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rot: Rot3,
    pub trans: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rot: Rot3::IDENTITY,
        trans: Vec3::ZERO,
    };

    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Pose {
            rot: Rot3::from_rpy(rpy[0], rpy[1], rpy[2]),
            trans: Vec3::from_array(xyz),
        }
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rot.apply(p) + self.trans
    }

    pub fn compose(&self, o: &Pose) -> Pose {
        Pose {
            rot: self.rot.mul(&o.rot),
            trans: self.apply(o.trans),
        }
    }

    pub fn transform_capsule(&self, c: &Capsule) -> Capsule {
        Capsule::new(
            Segment::new(self.apply(c.seg.p1), self.apply(c.seg.p2)),
            c.radius,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OriginSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitSpec {
    pub min: f64,
    pub max: f64,
    /// Joint speed bound used for swept-volume padding (rad/s).
    #[serde(default = "default_velocity_limit")]
    pub velocity: f64,
}

fn default_velocity_limit() -> f64 {
    2.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: [f64; 3],
    pub origin: OriginSpec,
    pub limit: LimitSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CapsuleSpec {
    pub p1: [f64; 3],
    pub p2: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinkSpec {
    pub capsule: CapsuleSpec,
}

/// On-disk robot description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobotConfig {
    #[serde(default)]
    pub name: String,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
    pub mount: OriginSpec,
    /// Tool point in the last link frame.
    #[serde(default)]
    pub end_effector: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Joint {
    pub origin: Pose,
    pub axis: Vec3,
    pub min: f64,
    pub max: f64,
    pub max_velocity: f64,
}

/// Revolute serial chain. Link `i` is rigidly attached to the frame after joint `i`.
#[derive(Clone, Debug)]
pub struct KinematicChain {
    pub name: String,
    pub mount: Pose,
    pub joints: Vec<Joint>,
    pub link_capsules: Vec<Capsule>,
    pub end_effector: Vec3,
    link_speed_bounds: Vec<f64>,
}

impl KinematicChain {
    pub fn from_config(cfg: &RobotConfig) -> Result<Self, RobotConfigError> {
        let invalid = |m: String| Err(RobotConfigError::Invalid(m));
        if cfg.joints.is_empty() {
            return invalid("a chain needs at least one joint".into());
        }
        if cfg.links.len() != cfg.joints.len() {
            return invalid(format!(
                "{} joints but {} links",
                cfg.joints.len(),
                cfg.links.len()
            ));
        }
        let mut joints = Vec::with_capacity(cfg.joints.len());
        for (i, j) in cfg.joints.iter().enumerate() {
            let axis = Vec3::from_array(j.axis);
            let norm = axis.norm();
            if !norm.is_finite() || norm == 0.0 {
                return invalid(format!("joint {i}: zero or non-finite axis"));
            }
            if !(j.limit.min < j.limit.max) {
                return invalid(format!("joint {i}: limit min must be below max"));
            }
            if !(j.limit.velocity > 0.0) {
                return invalid(format!("joint {i}: velocity limit must be positive"));
            }
            joints.push(Joint {
                origin: Pose::from_xyz_rpy(j.origin.xyz, j.origin.rpy),
                axis: axis / norm,
                min: j.limit.min,
                max: j.limit.max,
                max_velocity: j.limit.velocity,
            });
        }
        let mut link_capsules = Vec::with_capacity(cfg.links.len());
        for (i, l) in cfg.links.iter().enumerate() {
            if !(l.capsule.radius >= 0.0) {
                return invalid(format!("link {i}: negative radius"));
            }
            link_capsules.push(Capsule::from_points(
                Vec3::from_array(l.capsule.p1),
                Vec3::from_array(l.capsule.p2),
                l.capsule.radius,
            ));
        }
        Ok(Self::new(
            cfg.name.clone(),
            Pose::from_xyz_rpy(cfg.mount.xyz, cfg.mount.rpy),
            joints,
            link_capsules,
            Vec3::from_array(cfg.end_effector),
        ))
    }

    pub fn new(
        name: String,
        mount: Pose,
        joints: Vec<Joint>,
        link_capsules: Vec<Capsule>,
        end_effector: Vec3,
    ) -> Self {
        let link_speed_bounds = speed_bounds(&joints, &link_capsules);
        Self {
            name,
            mount,
            joints,
            link_capsules,
            end_effector,
            link_speed_bounds,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RobotConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, RobotConfigError> {
        let cfg: RobotConfig = toml::from_str(text)?;
        Self::from_config(&cfg)
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.min).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.max).collect()
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && self
                .joints
                .iter()
                .zip(q)
                .all(|(j, &x)| x >= j.min && x <= j.max)
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (x, j) in q.iter_mut().zip(&self.joints) {
            *x = x.clamp(j.min, j.max);
        }
    }

    /// Upper bound on the speed of any point of each link (m/s), given joint
    /// speeds within `max_velocity`.
    pub fn link_speed_bounds(&self) -> &[f64] {
        &self.link_speed_bounds
    }

    /// World pose of every link frame.
    pub fn link_poses(&self, q: &[f64]) -> Vec<Pose> {
        let mut out = Vec::with_capacity(self.dof());
        self.link_poses_into(q, &mut out);
        out
    }

    pub fn link_poses_into(&self, q: &[f64], out: &mut Vec<Pose>) {
        out.clear();
        let mut pose = self.mount;
        for (j, &angle) in self.joints.iter().zip(q) {
            pose = pose.compose(&j.origin).compose(&Pose {
                rot: Rot3::from_axis_angle(j.axis, angle),
                trans: Vec3::ZERO,
            });
            out.push(pose);
        }
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> ForwardKinematics {
        let link_poses = self.link_poses(q);
        let end_effector = link_poses
            .last()
            .map_or(self.mount.trans, |p| p.apply(self.end_effector));
        ForwardKinematics {
            link_poses,
            end_effector,
        }
    }

    pub fn end_effector_position(&self, q: &[f64]) -> Vec3 {
        self.forward_kinematics(q).end_effector
    }

    /// Link capsules in the world frame.
    pub fn link_capsules(&self, q: &[f64]) -> Vec<Capsule> {
        let mut out = Vec::with_capacity(self.dof());
        let mut poses = Vec::with_capacity(self.dof());
        self.link_capsules_into(q, &mut poses, &mut out);
        out
    }

    pub fn link_capsules_into(&self, q: &[f64], poses: &mut Vec<Pose>, out: &mut Vec<Capsule>) {
        self.link_poses_into(q, poses);
        out.clear();
        out.extend(
            poses
                .iter()
                .zip(&self.link_capsules)
                .map(|(p, c)| p.transform_capsule(c)),
        );
    }

    /// Padding added to each interval enclosure of link `link` for a sub-step of
    /// length `substep`.
    pub fn link_padding(&self, link: usize, substep: f64) -> f64 {
        self.link_speed_bounds[link] * substep / 4.0 + 1e-6
    }
}

/// For each link, `sum over ancestor joints of max_velocity * reach`, where the
/// reach bounds the distance from that joint's origin to any point of the link
/// capsule by chaining the origin offsets.
fn speed_bounds(joints: &[Joint], capsules: &[Capsule]) -> Vec<f64> {
    (0..joints.len())
        .map(|link| {
            let c = &capsules[link];
            let local = c.seg.p1.norm().max(c.seg.p2.norm()) + c.radius;
            (0..=link)
                .map(|j| {
                    let chain: f64 = joints[j + 1..=link]
                        .iter()
                        .map(|jt| jt.origin.trans.norm())
                        .sum();
                    joints[j].max_velocity * (chain + local)
                })
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ForwardKinematics {
    pub link_poses: Vec<Pose>,
    pub end_effector: Vec3,
}

/// Capsules covering every link over a time interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OccupancySet {
    pub capsules: Vec<Capsule>,
    pub t_begin: f64,
    pub t_end: f64,
}

impl OccupancySet {
    pub fn new(capsules: Vec<Capsule>, t_begin: f64, t_end: f64) -> Self {
        Self {
            capsules,
            t_begin,
            t_end,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.capsules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.capsules.len()
    }

    pub fn extend(&mut self, other: OccupancySet) {
        self.t_begin = self.t_begin.min(other.t_begin);
        self.t_end = self.t_end.max(other.t_end);
        self.capsules.extend(other.capsules);
    }

    /// True if `c` lies inside a single member capsule.
    pub fn covers_capsule(&self, c: &Capsule, tol: f64) -> bool {
        self.capsules.iter().any(|m| m.contains_capsule(c, tol))
    }
}

/// Reusable buffers for [`swept_occupancy_into`].
#[derive(Default)]
pub struct SweepScratch {
    state: Option<JointState>,
    poses: Vec<Pose>,
    prev: Vec<Capsule>,
    next: Vec<Capsule>,
    per_link: Vec<Vec<Capsule>>,
}

/// Over-approximation of everything the links occupy while following `traj`
/// over `[t0, t1]`.
///
/// The window is cut into `substep`-long intervals; each link contributes the
/// enclosure of its capsules at the interval ends, grown by
/// [`KinematicChain::link_padding`]. Output is ordered by (link, interval).
pub fn swept_occupancy(
    chain: &KinematicChain,
    traj: &Trajectory,
    t0: f64,
    t1: f64,
    substep: f64,
) -> OccupancySet {
    let mut out = OccupancySet::default();
    swept_occupancy_into(
        chain,
        traj,
        t0,
        t1,
        substep,
        &mut SweepScratch::default(),
        &mut out,
    );
    out
}

pub fn swept_occupancy_into(
    chain: &KinematicChain,
    traj: &Trajectory,
    t0: f64,
    t1: f64,
    substep: f64,
    scratch: &mut SweepScratch,
    out: &mut OccupancySet,
) {
    assert!(substep > 0.0, "substep must be positive");
    let t1 = t1.max(t0);
    let n_links = chain.dof();
    let intervals = crate::trajectory::ticks_for(t1 - t0, substep).max(1);

    let state = scratch
        .state
        .get_or_insert_with(|| JointState::at_rest(vec![0.0; n_links]));
    if state.dof() != traj.dof() {
        *state = JointState::at_rest(vec![0.0; traj.dof()]);
    }
    scratch.per_link.resize_with(n_links, Vec::new);
    scratch.per_link.iter_mut().for_each(Vec::clear);

    traj.sample_into(t0, state);
    chain.link_capsules_into(&state.q, &mut scratch.poses, &mut scratch.prev);
    for k in 0..intervals {
        let tb = if k + 1 == intervals {
            t1
        } else {
            t0 + (k + 1) as f64 * substep
        };
        traj.sample_into(tb, state);
        chain.link_capsules_into(&state.q, &mut scratch.poses, &mut scratch.next);
        let h = tb - (t0 + k as f64 * substep);
        for link in 0..n_links {
            let enc = enclosing_capsule(&scratch.prev[link], &scratch.next[link]);
            scratch.per_link[link].push(enc.inflated(chain.link_padding(link, h.max(0.0))));
        }
        std::mem::swap(&mut scratch.prev, &mut scratch.next);
    }

    out.capsules.clear();
    out.t_begin = t0;
    out.t_end = t1;
    for caps in &scratch.per_link {
        out.capsules.extend_from_slice(caps);
    }
}
