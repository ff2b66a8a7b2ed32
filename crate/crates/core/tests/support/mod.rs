//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safearm_core::geometry::{Capsule, Segment, Vec3};
use safearm_core::trajectory::{JointState, LimitSet, Trajectory};

/// A start state the planner must accept: inside the limits and able to zero
/// its acceleration without exceeding `v_max`.
pub fn random_feasible_start(rng: &mut ChaCha8Rng, n: usize, lim: &LimitSet) -> JointState {
    let mut q = Vec::new();
    let mut qd = Vec::new();
    let mut qdd = Vec::new();
    for _ in 0..n {
        q.push(rng.gen_range(-3.0..3.0));
        let a: f64 = if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(-lim.a_max..lim.a_max)
        };
        let drift = a * a.abs() / (2.0 * lim.j_max);
        let lo = (-lim.v_max).max(-lim.v_max - drift);
        let hi = lim.v_max.min(lim.v_max - drift);
        let v = if rng.gen_bool(0.3) {
            0.0
        } else {
            rng.gen_range(lo..hi)
        };
        qd.push(v);
        qdd.push(a);
    }
    JointState::new(q, qd, qdd)
}

/// Integrates the trajectory's jerk signal with a fixed step (split at jerk
/// switches) and returns the end state and the worst deviation from sampling.
pub fn integrate_jerk(traj: &Trajectory, joint: usize, step: f64) -> (f64, f64, f64, f64) {
    let prof = &traj.profiles().unwrap()[joint];
    let s0 = traj.sample(traj.start_time());
    let (mut p, mut v, mut a) = (s0.q[joint], s0.qd[joint], s0.qdd[joint]);
    let n = (traj.duration() / step).ceil() as usize;
    let mut knots: Vec<f64> = (0..=n)
        .map(|k| (k as f64 * step).min(traj.duration()))
        .collect();
    knots.extend(prof.segments().iter().map(|s| s.offset));
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut worst: f64 = 0.0;
    for w in knots.windows(2) {
        let (t0, h) = (w[0], w[1] - w[0]);
        let j = prof.jerk_at(t0 + 0.5 * h);
        p += h * (v + h * (a / 2.0 + h * j / 6.0));
        v += h * (a + h * j / 2.0);
        a += h * j;
        let s = traj.sample(traj.start_time() + w[1]);
        worst = worst.max((s.q[joint] - p).abs());
    }
    (p, v, a, worst)
}

pub fn check_limits(traj: &Trajectory, lim: &LimitSet) {
    let grid = 1e-4;
    let n = (traj.duration() / grid).ceil() as usize + 1;
    let mut prev: Option<JointState> = None;
    for k in 0..=n {
        let t = traj.start_time() + (k as f64 * grid).min(traj.duration());
        let s = traj.sample(t);
        for i in 0..s.dof() {
            assert!(s.qd[i].abs() <= lim.v_max + 1e-6, "qd {} at t={t}", s.qd[i]);
            assert!(
                s.qdd[i].abs() <= lim.a_max + 1e-6,
                "qdd {} at t={t}",
                s.qdd[i]
            );
            if let Some(p) = &prev {
                let fd_jerk = (s.qdd[i] - p.qdd[i]) / grid;
                // a jerk switch inside a grid cell averages two legal values
                assert!(fd_jerk.abs() <= lim.j_max + 1e-3, "jerk {fd_jerk} at t={t}");
            }
        }
        prev = Some(s);
    }
    for p in traj.profiles().unwrap() {
        for seg in p.segments() {
            assert!(seg.jerk.abs() <= lim.j_max + 1e-9);
            assert!(seg.v.abs() <= lim.v_max + 1e-9);
            assert!(seg.a.abs() <= lim.a_max + 1e-9);
        }
    }
}


/// Golden-section minimum of a convex function on `[0, 1]`.
pub fn golden_min(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..80 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let mut best = (0.5 * (a + b), f(0.5 * (a + b)));
    for t in [0.0, 1.0] {
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Segment distance by nested convex minimization (distance to a segment is
/// convex along the other segment).
pub fn segment_distance_oracle(a: &Segment, b: &Segment) -> f64 {
    let at = |s: &Segment, t: f64| s.p1 + (s.p2 - s.p1) * t;
    golden_min(|s| {
        let p = at(a, s);
        golden_min(|t| (p - at(b, t)).norm()).1
    })
    .1
}

/// Coarse upper bound on the segment distance from a sample grid.
pub fn segment_distance_grid(a: &Segment, b: &Segment, n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=n {
        let p = a.p1 + (a.p2 - a.p1) * (i as f64 / n as f64);
        for j in 0..=n {
            let q = b.p1 + (b.p2 - b.p1) * (j as f64 / n as f64);
            best = best.min((p - q).norm());
        }
    }
    best
}

pub fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

/// Mixes generic, degenerate (point) and parallel segments.
pub fn random_capsule(rng: &mut ChaCha8Rng) -> Capsule {
    let p1 = random_vec(rng, 1.0);
    let p2 = match rng.gen_range(0..5) {
        0 => p1,
        1 => p1 + Vec3::X * rng.gen_range(-1.0..1.0),
        _ => random_vec(rng, 1.0),
    };
    Capsule::from_points(p1, p2, rng.gen_range(0.0..0.5))
}

/// Uniform-ish point inside a capsule: a point on the axis plus a ball offset.
pub fn random_point_in(rng: &mut ChaCha8Rng, c: &Capsule) -> Vec3 {
    let base = c.seg.p1 + (c.seg.p2 - c.seg.p1) * rng.gen_range(0.0..=1.0);
    loop {
        let d = random_vec(rng, 1.0);
        if d.norm() <= 1.0 {
            return base + d * c.radius;
        }
    }
}

/// Point-in-capsule test from the definition, via the segment oracle.
pub fn inside(c: &Capsule, p: Vec3, tol: f64) -> bool {
    let s = &c.seg;
    golden_min(|t| (p - (s.p1 + (s.p2 - s.p1) * t)).norm()).1 <= c.radius + tol
}

/// Closed-form distance and intersection against the nested oracle on `n`
/// random pairs; also cross-checks a point cloud and the sample grid.
/// Returns the number of pairs inside the ambiguity band around touching.
pub fn check_capsule_pairs(n: usize, seed: u64) -> Result<usize, String> {
    use rand::SeedableRng;
    use safearm_core::geometry::{capsule_distance, capsules_intersect, segment_segment_distance};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut band = 0;
    for case in 0..n {
        let a = random_capsule(&mut rng);
        let b = random_capsule(&mut rng);
        let d = segment_segment_distance(&a.seg, &b.seg);
        let oracle = segment_distance_oracle(&a.seg, &b.seg);
        if (d - oracle).abs() > 1e-9 {
            return Err(format!("case {case}: closed form {d} vs oracle {oracle}"));
        }
        let grid = segment_distance_grid(&a.seg, &b.seg, 20);
        let lip = (a.seg.length() + b.seg.length()) / 20.0;
        if d > grid + 1e-12 || grid - d > lip + 1e-12 {
            return Err(format!("case {case}: grid bound {grid} vs {d}"));
        }
        if (capsule_distance(&a, &b) - (oracle - a.radius - b.radius)).abs() > 1e-9 {
            return Err(format!("case {case}: signed distance"));
        }
        let reach = a.radius + b.radius;
        if (oracle - reach).abs() <= 1e-9 {
            band += 1;
            continue;
        }
        let expected = oracle < reach;
        if capsules_intersect(&a, &b) != expected {
            return Err(format!("case {case}: intersect flag disagrees (oracle {oracle}, reach {reach})"));
        }
        if case % 5 == 0 {
            for _ in 0..20 {
                let p = random_point_in(&mut rng, &a);
                if inside(&b, p, -1e-9) && !expected {
                    return Err(format!("case {case}: shared point but reported disjoint"));
                }
            }
        }
    }
    Ok(band)
}

/// Enclosing capsule contains both inputs: exact endpoint test plus sampled
/// interior points checked with the oracle.
pub fn check_enclosures(n: usize, seed: u64) -> Result<(), String> {
    use rand::SeedableRng;
    use safearm_core::geometry::enclosing_capsule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n {
        let a = random_capsule(&mut rng);
        let b = random_capsule(&mut rng);
        let e = enclosing_capsule(&a, &b);
        for c in [&a, &b] {
            if !e.contains_capsule(c, 1e-9) {
                return Err(format!("case {case}: endpoint containment failed"));
            }
            for _ in 0..30 {
                let p = random_point_in(&mut rng, c);
                if !inside(&e, p, 1e-9) {
                    return Err(format!("case {case}: sampled point outside the enclosure"));
                }
            }
        }
    }
    Ok(())
}
