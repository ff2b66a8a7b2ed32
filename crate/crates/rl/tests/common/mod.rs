#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use safearm_core::geometry::Vec3;
use safearm_rl::Scenario;

pub const KEYPOINTS: [&str; 15] = [
    "head",
    "neck",
    "pelvis",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// Upright person with the pelvis above `(x, y)`, arms hanging.
pub fn standing(x: f64, y: f64) -> Vec<Vec3> {
    let rel = [
        (0.0, 0.0, 0.85),
        (0.0, 0.0, 0.65),
        (0.0, 0.0, 0.15),
        (0.0, 0.2, 0.6),
        (0.0, -0.2, 0.6),
        (0.0, 0.25, 0.35),
        (0.0, -0.25, 0.35),
        (0.0, 0.25, 0.1),
        (0.0, -0.25, 0.1),
        (0.0, 0.1, 0.1),
        (0.0, -0.1, 0.1),
        (0.0, 0.1, -0.3),
        (0.0, -0.1, -0.3),
        (0.0, 0.1, -0.7),
        (0.0, -0.1, -0.7),
    ];
    rel.iter()
        .map(|&(dx, dy, z)| Vec3::new(x + dx, y + dy, z))
        .collect()
}

/// Writes a motion file with one frame per `(time, keypoints in KEYPOINTS order)`.
pub fn write_clip(path: &Path, frames: &[(f64, Vec<Vec3>)]) {
    let mut f = std::fs::File::create(path).unwrap();
    let mut header = vec!["time".to_string()];
    for k in KEYPOINTS {
        header.extend([format!("{k}_x"), format!("{k}_y"), format!("{k}_z")]);
    }
    writeln!(f, "{}", header.join(",")).unwrap();
    for (t, kps) in frames {
        let mut row = vec![format!("{t}")];
        for p in kps {
            row.extend([p.x, p.y, p.z].map(|v| format!("{v}")));
        }
        writeln!(f, "{}", row.join(",")).unwrap();
    }
}

/// Bundled scenario with the human randomization switched off.
pub fn bundled_fixed(name: &str) -> Scenario {
    let mut s = Scenario::load(Scenario::bundled(name)).unwrap();
    s.human_offset_x = [0.0, 0.0];
    s.human_offset_y = [0.0, 0.0];
    s.human_time_offset = [0.0, 0.0];
    s.human_clip_start = 0.0;
    s
}
