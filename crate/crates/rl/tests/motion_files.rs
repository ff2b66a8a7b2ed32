mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safearm_core::geometry::Vec3;
use safearm_rl::human_motion::{HumanSim, MotionClip, MotionError};
use safearm_rl::scenario::{assets_dir, HumanBehavior};
use safearm_rl::{Env, EnvError, Scenario};

fn parse(text: &str) -> Result<MotionClip, MotionError> {
    MotionClip::from_reader(text.as_bytes(), 2.0)
}

#[test]
fn bundled_clip_respects_the_speed_bound() {
    let clip = MotionClip::load(assets_dir().join("motions/walk_to_table.csv"), 2.0).unwrap();
    assert!(clip.duration() > 15.0);
    assert_eq!(clip.names().len(), 15);
    assert!(matches!(
        MotionClip::load(assets_dir().join("motions/walk_to_table.csv"), 0.5),
        Err(MotionError::SpeedBound { .. })
    ));
}

#[test]
fn fast_keypoints_are_rejected() {
    let err = parse("time,a_x,a_y,a_z\n0,0,0,0\n0.1,0.3,0,0\n").unwrap_err();
    match err {
        MotionError::SpeedBound {
            keypoint, speed, ..
        } => {
            assert_eq!(keypoint, "a");
            assert!((speed - 3.0).abs() < 1e-9);
        }
        e => panic!("unexpected {e}"),
    }
    assert!(parse("time,a_x,a_y,a_z\n0,0,0,0\n0.1,0.2,0,0\n").is_ok());
}

#[test]
fn malformed_files_are_rejected() {
    for text in [
        "",
        "t,a_x,a_y,a_z\n0,0,0,0\n",
        "time,a_x,a_y\n0,0,0\n",
        "time,a_x,b_y,a_z\n0,0,0,0\n",
        "time,a_x,a_y,a_z\n",
        "time,a_x,a_y,a_z\n0,0,0\n",
        "time,a_x,a_y,a_z\n0,0,0,nan\n",
        "time,a_x,a_y,a_z\n0,0,0,x\n",
        "time,a_x,a_y,a_z\n0,0,0,0\n0,0,0,0\n",
        "time,a_x,a_y,a_z\n1,0,0,0\n0.5,0,0,0\n",
    ] {
        assert!(parse(text).is_err(), "accepted {text:?}");
    }
}

#[test]
fn playback_interpolates_linearly_and_holds_the_ends() {
    let clip = parse("time,a_x,a_y,a_z\n0,0,0,0\n1,1,1,0\n2,1,1,1\n").unwrap();
    assert_eq!(clip.sample(0, -1.0), Vec3::ZERO);
    assert_eq!(clip.sample(0, 0.5), Vec3::new(0.5, 0.5, 0.0));
    assert_eq!(clip.sample(0, 1.25), Vec3::new(1.0, 1.0, 0.25));
    assert_eq!(clip.sample(0, 5.0), Vec3::new(1.0, 1.0, 1.0));
}

#[test]
fn scenario_clip_missing_a_body_keypoint_fails_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("partial.csv");
    std::fs::write(&clip, "time,head_x,head_y,head_z\n0,1,0,1\n").unwrap();
    let mut s = common::bundled_fixed("randomized_goal");
    s.human_motion = Some(clip);
    assert!(matches!(
        Env::from_scenario(s),
        Err(EnvError::Motion(MotionError::MissingKeypoint(_)))
    ));
}

#[test]
fn episode_randomization_shifts_the_playback() {
    let s = Scenario::load(Scenario::bundled("randomized_goal")).unwrap();
    let clip = std::sync::Arc::new(MotionClip::load(s.human_motion.as_ref().unwrap(), 2.0).unwrap());
    let names: Vec<String> = clip.names().to_vec();
    let mut sim = HumanSim::new(HumanBehavior::Playback, Some(clip.clone()), names, 2.0).unwrap();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sim.reset(&mut rng, [-0.2, 0.2], [-0.2, 0.2], [0.0, 1.0], 0.0, Vec3::ZERO);
        let start = sim.positions()[0];
        let base = clip.sample(0, 0.0);
        assert!((start.x - base.x).abs() <= 0.2 + 1e-12);
        assert!((start.y - base.y).abs() <= 0.2 + 1e-12);
        assert_eq!(start.z, base.z);
        let shift = start - base;
        // the clip is held for the drawn delay, then plays shifted
        sim.advance(3.0, Vec3::ZERO);
        let later = sim.positions()[0] - shift;
        let mut matched = false;
        for k in 0..=1000 {
            let delay = k as f64 / 1000.0;
            if later.distance(clip.sample(0, 3.0 - delay)) < 2.0 * 1e-3 + 1e-9 {
                matched = true;
                break;
            }
        }
        assert!(matched, "seed {seed}");
    }
}

#[test]
fn synthetic_adversaries_respect_the_speed_bound() {
    let names: Vec<String> = common::KEYPOINTS.iter().map(|s| s.to_string()).collect();
    for behavior in [
        HumanBehavior::Sprint,
        HumanBehavior::RandomWalk,
        HumanBehavior::Lunge,
    ] {
        let mut sim = HumanSim::new(behavior, None, names.clone(), 2.0).unwrap();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sim.reset(&mut rng, [-0.2, 0.2], [-0.2, 0.2], [0.0, 1.0], 0.0, Vec3::new(0.5, 0.0, 0.4));
            let mut prev = sim.positions().to_vec();
            for k in 1..2000 {
                let t = k as f64 * 0.004;
                // an end effector jumping around must not drag the human faster
                let ee = Vec3::new((t * 7.0).sin(), (t * 5.0).cos(), 0.3);
                sim.advance(t, ee);
                for (p, q) in sim.positions().iter().zip(&prev) {
                    assert!(p.distance(*q) <= 2.0 * 0.004 + 1e-12, "{behavior:?}");
                }
                prev = sim.positions().to_vec();
            }
        }
    }
}
