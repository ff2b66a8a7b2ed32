//! Scenario files and the static scene.

use std::path::{Path, PathBuf};

use safearm_core::geometry::{Capsule, Segment, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalSpec {
    /// Uniform over the joint limits.
    Uniform,
    /// `value` plus a uniform per-joint perturbation in `[-jitter, jitter]`.
    FixedWithJitter { value: Vec<f64>, jitter: f64 },
}

/// What the human does during an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanBehavior {
    None,
    /// Replay of the scenario motion file.
    Playback,
    /// Rigid body running straight at the end effector.
    Sprint,
    /// Rigid body wandering around the table with random velocity changes.
    RandomWalk,
    /// Body parked at the table edge, right wrist chasing the end effector.
    Lunge,
}

/// Table box and floor. The robot must keep `clearance` from the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticScene {
    pub table_min: [f64; 3],
    pub table_max: [f64; 3],
    pub clearance: f64,
    pub floor_z: f64,
}

impl Default for StaticScene {
    fn default() -> Self {
        Self {
            table_min: [-0.6, -0.8, -0.75],
            table_max: [0.9, 0.8, 0.0],
            clearance: 0.02,
            floor_z: -0.75,
        }
    }
}

impl StaticScene {
    /// True iff the capsule touches the inflated table or reaches the floor.
    pub fn collides(&self, c: &Capsule) -> bool {
        if c.seg.p1.z.min(c.seg.p2.z) - c.radius <= self.floor_z {
            return true;
        }
        segment_box_distance(&c.seg, self.table_min, self.table_max) <= c.radius + self.clearance
    }
}

fn point_box_distance(p: Vec3, lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let d = |v: f64, l: f64, h: f64| (l - v).max(0.0).max(v - h);
    Vec3::new(
        d(p.x, lo[0], hi[0]),
        d(p.y, lo[1], hi[1]),
        d(p.z, lo[2], hi[2]),
    )
    .norm()
}

/// Distance from a segment to a box. The point-box distance is convex along the
/// segment, so a golden-section search converges to the minimum.
pub fn segment_box_distance(s: &Segment, lo: [f64; 3], hi: [f64; 3]) -> f64 {
    let f = |t: f64| point_box_distance(s.at(t), lo, hi);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..90 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    f(0.0).min(f(1.0)).min(fc).min(fd)
}

fn default_t_max() -> usize {
    100
}
fn default_rl_step() -> f64 {
    0.2
}
fn default_goal_tolerance() -> f64 {
    0.05
}
fn default_inner_tolerance() -> f64 {
    0.01
}
fn default_delta_q_max() -> f64 {
    0.4
}
fn default_true() -> bool {
    true
}
fn default_budget() -> usize {
    1000
}
fn default_error_bound() -> f64 {
    safearm_core::human::DEFAULT_MEASUREMENT_ERROR
}

/// Paths are resolved relative to the scenario file on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub robot: PathBuf,
    #[serde(default)]
    pub human_model: Option<PathBuf>,
    #[serde(default)]
    pub human_motion: Option<PathBuf>,
    /// Defaults to `playback` when a motion file is given, else `none`.
    #[serde(default)]
    pub human_behavior: Option<HumanBehavior>,
    pub start: Vec<f64>,
    pub goal: GoalSpec,
    #[serde(default)]
    pub human_offset_x: [f64; 2],
    #[serde(default)]
    pub human_offset_y: [f64; 2],
    #[serde(default)]
    pub human_time_offset: [f64; 2],
    /// Clip time shown at episode start, before the random delay is applied (s).
    #[serde(default)]
    pub human_clip_start: f64,
    #[serde(default = "default_t_max")]
    pub max_episode_steps: usize,
    /// RL step length (s).
    #[serde(default = "default_rl_step")]
    pub rl_step: f64,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default = "default_inner_tolerance")]
    pub inner_tolerance: f64,
    #[serde(default = "default_delta_q_max")]
    pub delta_q_max: f64,
    #[serde(default = "default_true")]
    pub shield: bool,
    #[serde(default = "default_error_bound")]
    pub measurement_error: f64,
    #[serde(default = "default_budget")]
    pub sampling_budget: usize,
    #[serde(default)]
    pub scene: StaticScene,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s: Scenario = toml::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        s.robot = base.join(&s.robot);
        s.human_model = s.human_model.map(|p| base.join(p));
        s.human_motion = s.human_motion.map(|p| base.join(p));
        s.validate()?;
        Ok(s)
    }

    pub fn behavior(&self) -> HumanBehavior {
        self.human_behavior
            .unwrap_or(if self.human_motion.is_some() {
                HumanBehavior::Playback
            } else {
                HumanBehavior::None
            })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.to_string()));
        for r in [
            self.human_offset_x,
            self.human_offset_y,
            self.human_time_offset,
        ] {
            if !(r[0] <= r[1]) {
                return bad("ranges must be ordered");
            }
        }
        if self.max_episode_steps < 1 {
            return bad("max_episode_steps must be at least 1");
        }
        if !(self.rl_step > 0.0
            && self.goal_tolerance > 0.0
            && self.inner_tolerance > 0.0
            && self.delta_q_max > 0.0)
        {
            return bad("step length, tolerances and delta_q_max must be positive");
        }
        if !(self.measurement_error >= 0.0) {
            return bad("measurement_error must be non-negative");
        }
        if self.sampling_budget == 0 {
            return bad("sampling_budget must be positive");
        }
        if let GoalSpec::FixedWithJitter { value, jitter } = &self.goal {
            if value.len() != self.start.len() || !(*jitter >= 0.0) {
                return bad("fixed goal must match the start length and have non-negative jitter");
            }
        }
        if self.behavior() == HumanBehavior::Playback && self.human_motion.is_none() {
            return bad("playback needs a human_motion file");
        }
        Ok(())
    }

    /// Path of the bundled scenario `name` (e.g. `human_evasion`).
    pub fn bundled(name: &str) -> PathBuf {
        assets_dir().join("scenarios").join(format!("{name}.toml"))
    }
}

/// Directory holding the bundled robots, human models, motions and scenarios.
pub fn assets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}
