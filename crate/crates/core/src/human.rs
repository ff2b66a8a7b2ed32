//! Human body model and reachable occupancy.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Capsule, Vec3};
use crate::robot::OccupancySet;

/// Speed bound for any human keypoint (m/s).
pub const ISO_HUMAN_SPEED: f64 = 2.0;

/// Default measurement error bound (m).
pub const DEFAULT_MEASUREMENT_ERROR: f64 = 0.005;

#[derive(Debug, Error, PartialEq)]
pub enum HumanError {
    #[error("keypoint `{0}` missing from the measurement")]
    MissingKeypoint(String),
    #[error("invalid human model: {0}")]
    InvalidModel(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub name: String,
    pub kp1: String,
    pub kp2: String,
    pub radius: f64,
}

/// Bodies are capsules between two keypoints; equal keypoints make a sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanModel {
    pub bodies: Vec<BodySpec>,
}

impl HumanModel {
    pub fn new(bodies: Vec<BodySpec>) -> Result<Self, HumanError> {
        if bodies.is_empty() {
            return Err(HumanError::InvalidModel("no bodies".into()));
        }
        for b in &bodies {
            if !(b.radius > 0.0 && b.radius.is_finite()) {
                return Err(HumanError::InvalidModel(format!(
                    "body `{}` needs a positive radius",
                    b.name
                )));
            }
        }
        Ok(Self { bodies })
    }

    pub fn from_toml(text: &str) -> Result<Self, HumanError> {
        let raw: HumanModel =
            toml::from_str(text).map_err(|e| HumanError::InvalidModel(e.to_string()))?;
        Self::new(raw.bodies)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HumanError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| HumanError::InvalidModel(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Head sphere, torso, upper/lower arms and upper/lower legs.
    pub fn default_ten_body() -> Self {
        let b = |name: &str, kp1: &str, kp2: &str, radius: f64| BodySpec {
            name: name.into(),
            kp1: kp1.into(),
            kp2: kp2.into(),
            radius,
        };
        Self::new(vec![
            b("head", "head", "head", 0.12),
            b("torso", "neck", "pelvis", 0.20),
            b("left_upper_arm", "left_shoulder", "left_elbow", 0.06),
            b("left_lower_arm", "left_elbow", "left_wrist", 0.05),
            b("right_upper_arm", "right_shoulder", "right_elbow", 0.06),
            b("right_lower_arm", "right_elbow", "right_wrist", 0.05),
            b("left_upper_leg", "left_hip", "left_knee", 0.09),
            b("left_lower_leg", "left_knee", "left_ankle", 0.07),
            b("right_upper_leg", "right_hip", "right_knee", 0.09),
            b("right_lower_leg", "right_knee", "right_ankle", 0.07),
        ])
        .expect("default model is valid")
    }

    /// Keypoint names referenced by the model, sorted and deduplicated.
    pub fn keypoints(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .bodies
            .iter()
            .flat_map(|b| [b.kp1.clone(), b.kp2.clone()])
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Body capsules at the measured keypoints, with `extra` added to every radius.
    pub fn capsules(
        &self,
        keypoints: &BTreeMap<String, Vec3>,
        extra: f64,
    ) -> Result<Vec<Capsule>, HumanError> {
        let mut out = Vec::with_capacity(self.bodies.len());
        self.capsules_into(keypoints, extra, &mut out)?;
        Ok(out)
    }

    pub fn capsules_into(
        &self,
        keypoints: &BTreeMap<String, Vec3>,
        extra: f64,
        out: &mut Vec<Capsule>,
    ) -> Result<(), HumanError> {
        out.clear();
        let get = |k: &String| {
            keypoints
                .get(k)
                .copied()
                .ok_or_else(|| HumanError::MissingKeypoint(k.clone()))
        };
        for b in &self.bodies {
            out.push(Capsule::from_points(
                get(&b.kp1)?,
                get(&b.kp2)?,
                b.radius + extra,
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanMeasurement {
    pub timestamp: f64,
    pub keypoints: BTreeMap<String, Vec3>,
    pub error_bound: f64,
}

impl HumanMeasurement {
    pub fn new(timestamp: f64, keypoints: BTreeMap<String, Vec3>, error_bound: f64) -> Self {
        Self {
            timestamp,
            keypoints,
            error_bound,
        }
    }

    /// No human in the cell.
    pub fn absent(timestamp: f64) -> Self {
        Self {
            timestamp,
            keypoints: BTreeMap::new(),
            error_bound: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachParams {
    pub v_max: f64,
}

impl Default for ReachParams {
    fn default() -> Self {
        Self {
            v_max: ISO_HUMAN_SPEED,
        }
    }
}

/// Everything the human can occupy within `horizon` seconds of the measurement:
/// each body capsule grown by the measurement error and the distance a keypoint
/// can travel at `v_max`.
///
/// An empty measurement means no human and yields an empty set.
pub fn reachable_occupancy(
    model: &HumanModel,
    meas: &HumanMeasurement,
    horizon: f64,
    params: &ReachParams,
) -> Result<OccupancySet, HumanError> {
    let mut out = OccupancySet::default();
    reachable_occupancy_into(model, meas, horizon, params, &mut out)?;
    Ok(out)
}

pub fn reachable_occupancy_into(
    model: &HumanModel,
    meas: &HumanMeasurement,
    horizon: f64,
    params: &ReachParams,
    out: &mut OccupancySet,
) -> Result<(), HumanError> {
    let horizon = horizon.max(0.0);
    out.t_begin = meas.timestamp;
    out.t_end = meas.timestamp + horizon;
    if meas.is_empty() {
        out.capsules.clear();
        return Ok(());
    }
    model.capsules_into(
        &meas.keypoints,
        meas.error_bound + params.v_max * horizon,
        &mut out.capsules,
    )
}
