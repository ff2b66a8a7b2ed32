//! Human motion: file playback and synthetic adversaries.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safearm_core::geometry::Vec3;
use safearm_core::human::HumanMeasurement;
use thiserror::Error;

use crate::scenario::HumanBehavior;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("reading motion file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing motion file: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed motion file: {0}")]
    Format(String),
    #[error("keypoint `{keypoint}` moves at {speed:.3} m/s near t = {time} s, above the {limit} m/s bound")]
    SpeedBound {
        keypoint: String,
        time: f64,
        speed: f64,
        limit: f64,
    },
    #[error("keypoint `{0}` is needed but not provided")]
    MissingKeypoint(String),
}

/// Sampled keypoint trajectories, linearly interpolated between samples.
#[derive(Clone, Debug)]
pub struct MotionClip {
    names: Vec<String>,
    times: Vec<f64>,
    /// `frames[k][j]` is keypoint `j` at `times[k]`.
    frames: Vec<Vec<Vec3>>,
}

impl MotionClip {
    pub fn load(path: impl AsRef<Path>, v_max: f64) -> Result<Self, MotionError> {
        Self::from_reader(std::fs::File::open(path)?, v_max)
    }

    /// Reads `time,<kp>_x,<kp>_y,<kp>_z,...` and rejects clips whose
    /// finite-difference keypoint speed exceeds `v_max`.
    pub fn from_reader(reader: impl Read, v_max: f64) -> Result<Self, MotionError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.first() != Some(&"time") || !(cols.len() - 1).is_multiple_of(3) || cols.len() < 4 {
            return Err(MotionError::Format(
                "header must be `time` followed by x,y,z column triples".into(),
            ));
        }
        let mut names = Vec::new();
        for triple in cols[1..].chunks(3) {
            let name = triple[0]
                .strip_suffix("_x")
                .filter(|n| triple[1] == format!("{n}_y") && triple[2] == format!("{n}_z"))
                .ok_or_else(|| MotionError::Format(format!("bad column triple {triple:?}")))?;
            names.push(name.to_string());
        }
        let mut times = Vec::new();
        let mut frames = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| MotionError::Format(format!("line {}: {e}", times.len() + 2)))?;
            if vals.len() != cols.len() || vals.iter().any(|v| !v.is_finite()) {
                return Err(MotionError::Format(format!(
                    "line {}: wrong width or non-finite value",
                    times.len() + 2
                )));
            }
            if let Some(&last) = times.last() {
                if !(vals[0] > last) {
                    return Err(MotionError::Format(
                        "time must be strictly increasing".into(),
                    ));
                }
            }
            times.push(vals[0]);
            frames.push(
                vals[1..]
                    .chunks(3)
                    .map(|c| Vec3::new(c[0], c[1], c[2]))
                    .collect(),
            );
        }
        if times.is_empty() {
            return Err(MotionError::Format("no samples".into()));
        }
        let clip = Self {
            names,
            times,
            frames,
        };
        clip.check_speed(v_max)?;
        Ok(clip)
    }

    fn check_speed(&self, v_max: f64) -> Result<(), MotionError> {
        for k in 1..self.times.len() {
            let dt = self.times[k] - self.times[k - 1];
            for (j, name) in self.names.iter().enumerate() {
                let speed = self.frames[k][j].distance(self.frames[k - 1][j]) / dt;
                if speed > v_max {
                    return Err(MotionError::SpeedBound {
                        keypoint: name.clone(),
                        time: self.times[k],
                        speed,
                        limit: v_max,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn duration(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Keypoint `j` at time `t`, held constant outside the sampled range.
    pub fn sample(&self, j: usize, t: f64) -> Vec3 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.frames[0][j];
        }
        if t >= self.times[n - 1] {
            return self.frames[n - 1][j];
        }
        let k = self.times.partition_point(|&x| x <= t);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        self.frames[k - 1][j].lerp(self.frames[k][j], (t - t0) / (t1 - t0))
    }
}

const PELVIS_Z: f64 = 0.2;

/// Upright posture with both arms raised forward (-x), relative to the pelvis.
fn template(name: &str) -> Option<Vec3> {
    let v = |x, y, z| Some(Vec3::new(x, y, z));
    match name {
        "pelvis" => v(0.0, 0.0, 0.0),
        "neck" => v(0.0, 0.0, 0.5),
        "head" => v(0.0, 0.0, 0.7),
        "left_shoulder" => v(0.0, 0.2, 0.45),
        "right_shoulder" => v(0.0, -0.2, 0.45),
        "left_elbow" => v(-0.28, 0.2, 0.4),
        "right_elbow" => v(-0.28, -0.2, 0.4),
        "left_wrist" => v(-0.52, 0.18, 0.35),
        "right_wrist" => v(-0.52, -0.18, 0.35),
        "left_hip" => v(0.0, 0.1, -0.05),
        "right_hip" => v(0.0, -0.1, -0.05),
        "left_knee" => v(0.0, 0.1, -0.47),
        "right_knee" => v(0.0, -0.1, -0.47),
        "left_ankle" => v(0.0, 0.1, -0.89),
        "right_ankle" => v(0.0, -0.1, -0.89),
        _ => None,
    }
}

const LUNGE_REACH: f64 = 0.75;

/// Per-episode human state. Every keypoint moves at most `v_max`.
#[derive(Clone, Debug)]
pub struct HumanSim {
    behavior: HumanBehavior,
    clip: Option<Arc<MotionClip>>,
    names: Vec<String>,
    /// Clip column or template offset per keypoint.
    columns: Vec<usize>,
    offsets: Vec<Vec3>,
    v_max: f64,
    positions: Vec<Vec3>,
    shift: Vec3,
    delay: f64,
    clip_start: f64,
    anchor: Vec3,
    velocity: Vec3,
    speed: f64,
    next_turn: f64,
    last_t: f64,
    rng: Option<ChaCha8Rng>,
}

impl HumanSim {
    /// `names` are the keypoints the consumer needs (human model plus observation).
    pub fn new(
        behavior: HumanBehavior,
        clip: Option<Arc<MotionClip>>,
        names: Vec<String>,
        v_max: f64,
    ) -> Result<Self, MotionError> {
        let mut columns = Vec::new();
        let mut offsets = Vec::new();
        match behavior {
            HumanBehavior::None => {}
            HumanBehavior::Playback => {
                let c = clip
                    .as_ref()
                    .ok_or_else(|| MotionError::Format("playback without a clip".into()))?;
                for n in &names {
                    columns.push(
                        c.index_of(n)
                            .ok_or_else(|| MotionError::MissingKeypoint(n.clone()))?,
                    );
                }
            }
            _ => {
                for n in &names {
                    offsets
                        .push(template(n).ok_or_else(|| MotionError::MissingKeypoint(n.clone()))?);
                }
            }
        }
        let positions = vec![Vec3::ZERO; names.len()];
        Ok(Self {
            behavior,
            clip,
            names,
            columns,
            offsets,
            v_max,
            positions,
            shift: Vec3::ZERO,
            delay: 0.0,
            clip_start: 0.0,
            anchor: Vec3::ZERO,
            velocity: Vec3::ZERO,
            speed: 0.0,
            next_turn: 0.0,
            last_t: 0.0,
            rng: None,
        })
    }

    pub fn behavior(&self) -> HumanBehavior {
        self.behavior
    }

    pub fn is_present(&self) -> bool {
        self.behavior != HumanBehavior::None
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn position(&self, name: &str) -> Option<Vec3> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.positions[i])
    }

    /// Draws the episode randomization and places the human at time 0.
    /// The clip is shown from `clip_start`, held for the drawn delay.
    pub fn reset(
        &mut self,
        rng: &mut ChaCha8Rng,
        offset_x: [f64; 2],
        offset_y: [f64; 2],
        delay: [f64; 2],
        clip_start: f64,
        ee: Vec3,
    ) {
        let draw = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
            if r[0] < r[1] {
                rng.gen_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        self.shift = Vec3::new(draw(rng, offset_x), draw(rng, offset_y), 0.0);
        self.delay = draw(rng, delay);
        self.clip_start = clip_start;
        self.last_t = 0.0;
        self.velocity = Vec3::ZERO;
        self.next_turn = 0.0;
        match self.behavior {
            HumanBehavior::Sprint | HumanBehavior::RandomWalk => {
                let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let dist = rng.gen_range(1.6..3.0);
                self.anchor =
                    Vec3::new(dist * angle.cos(), dist * angle.sin(), PELVIS_Z) + self.shift;
                self.speed = rng.gen_range(0.5..=1.0) * self.v_max;
            }
            HumanBehavior::Lunge => {
                self.anchor = Vec3::new(1.15, 0.0, PELVIS_Z) + self.shift;
                self.speed = self.v_max;
            }
            _ => {}
        }
        if matches!(
            self.behavior,
            HumanBehavior::Sprint | HumanBehavior::RandomWalk | HumanBehavior::Lunge
        ) {
            self.rng = Some(rand::SeedableRng::seed_from_u64(rng.gen()));
            for (p, o) in self.positions.iter_mut().zip(&self.offsets) {
                *p = self.anchor + *o;
            }
        }
        self.advance(0.0, ee);
    }

    /// Moves the human to time `t`; `ee` is the current end-effector position
    /// that the adversaries chase.
    pub fn advance(&mut self, t: f64, ee: Vec3) {
        let h = (t - self.last_t).max(0.0);
        self.last_t = t;
        match self.behavior {
            HumanBehavior::None => {}
            HumanBehavior::Playback => {
                let clip = self.clip.as_ref().expect("checked in new");
                for (p, &c) in self.positions.iter_mut().zip(&self.columns) {
                    *p = clip.sample(c, (t - self.delay).max(0.0) + self.clip_start) + self.shift;
                }
            }
            HumanBehavior::Sprint => {
                let to = Vec3::new(ee.x - self.anchor.x, ee.y - self.anchor.y, 0.0);
                let step = to.norm().min(self.speed * h);
                if step > 0.0 {
                    self.translate(to.normalized() * step);
                }
            }
            HumanBehavior::RandomWalk => {
                if t >= self.next_turn {
                    self.turn(ee);
                    self.next_turn = t + 0.25;
                }
                let mut d = self.velocity * h;
                let next = self.anchor + d;
                if next.x.hypot(next.y) > 3.0 {
                    // bounce back toward the table
                    self.velocity = -self.velocity;
                    d = -d;
                }
                self.translate(d);
            }
            HumanBehavior::Lunge => self.lunge(ee, h),
        }
    }

    fn translate(&mut self, d: Vec3) {
        self.anchor += d;
        for p in &mut self.positions {
            *p += d;
        }
    }

    fn turn(&mut self, ee: Vec3) {
        let rng = self.rng.as_mut().expect("seeded in reset");
        let speed = rng.gen_range(0.0..=self.v_max);
        let dir = if rng.gen_bool(0.5) {
            let target = Vec3::new(
                ee.x + rng.gen_range(-0.6..0.6),
                ee.y + rng.gen_range(-0.6..0.6),
                self.anchor.z,
            );
            target - self.anchor
        } else {
            let a: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Vec3::new(a.cos(), a.sin(), 0.0)
        };
        let dir = Vec3::new(dir.x, dir.y, 0.0);
        self.velocity = if dir.norm() > 0.0 {
            dir.normalized() * speed
        } else {
            Vec3::ZERO
        };
    }

    fn lunge(&mut self, ee: Vec3, h: f64) {
        let (Some(w), Some(e), Some(s)) = (
            self.index("right_wrist"),
            self.index("right_elbow"),
            self.index("right_shoulder"),
        ) else {
            return;
        };
        let shoulder = self.positions[s];
        let wrist = self.positions[w];
        let to = ee - wrist;
        let step = to.norm().min(self.speed * h);
        let mut next = if step > 0.0 {
            wrist + to.normalized() * step
        } else {
            wrist
        };
        // Projection onto the reach ball is 1-Lipschitz, so the speed bound survives.
        let rel = next - shoulder;
        if rel.norm() > LUNGE_REACH {
            next = shoulder + rel.normalized() * LUNGE_REACH;
        }
        self.positions[w] = next;
        self.positions[e] = shoulder.lerp(next, 0.5);
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Writes the current keypoints into `meas`; an absent human leaves it empty.
    pub fn write_measurement(&self, t: f64, error_bound: f64, meas: &mut HumanMeasurement) {
        meas.timestamp = t;
        meas.error_bound = error_bound;
        if !self.is_present() {
            meas.keypoints.clear();
            return;
        }
        for (n, p) in self.names.iter().zip(&self.positions) {
            match meas.keypoints.get_mut(n) {
                Some(slot) => *slot = *p,
                None => {
                    meas.keypoints.insert(n.clone(), *p);
                }
            }
        }
    }

    pub fn keypoint_map(&self) -> BTreeMap<String, Vec3> {
        self.names
            .iter()
            .cloned()
            .zip(self.positions.iter().copied())
            .collect()
    }
}
