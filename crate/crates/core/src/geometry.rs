//! Closed-form capsule geometry.
//!
//! Capsules (a segment swept by a ball) are the only occupancy primitive used by the
//! shield: robot links, swept link volumes and human reachable sets are all capsules,
//! so everything here has to be exact, cheap and deterministic.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction; the zero vector is returned unchanged.
    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        if n > 0.0 {
            self / n
        } else {
            self
        }
    }

    #[inline]
    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self + (o - self) * t
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Closed line segment. `p1 == p2` is a point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub p1: Vec3,
    pub p2: Vec3,
}

impl Segment {
    pub const fn new(p1: Vec3, p2: Vec3) -> Self {
        Self { p1, p2 }
    }

    pub const fn point(p: Vec3) -> Self {
        Self { p1: p, p2: p }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.p1.lerp(self.p2, t)
    }

    pub fn length(&self) -> f64 {
        self.p1.distance(self.p2)
    }

    pub fn midpoint(&self) -> Vec3 {
        (self.p1 + self.p2) * 0.5
    }
}

/// Segment swept by a ball of `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub seg: Segment,
    pub radius: f64,
}

impl Capsule {
    pub const fn new(seg: Segment, radius: f64) -> Self {
        Self { seg, radius }
    }

    pub fn from_points(p1: Vec3, p2: Vec3, radius: f64) -> Self {
        Self::new(Segment::new(p1, p2), radius)
    }

    pub fn sphere(center: Vec3, radius: f64) -> Self {
        Self::new(Segment::point(center), radius)
    }

    /// Same axis, radius grown by `margin`.
    pub fn inflated(&self, margin: f64) -> Self {
        Self::new(self.seg, self.radius + margin)
    }

    pub fn contains_point(&self, p: Vec3) -> bool {
        point_segment_distance(p, &self.seg) <= self.radius
    }

    /// True if every point of `other` lies in `self`, up to `tol`.
    ///
    /// The point-to-segment distance is convex, so checking the two axis
    /// endpoints of `other` is exact.
    pub fn contains_capsule(&self, other: &Capsule, tol: f64) -> bool {
        let d = point_segment_distance(other.seg.p1, &self.seg)
            .max(point_segment_distance(other.seg.p2, &self.seg));
        d + other.radius <= self.radius + tol
    }
}

/// Parameter of the point on `s` closest to `p`, in `[0, 1]`.
#[inline]
fn closest_param(p: Vec3, s: &Segment) -> f64 {
    let d = s.p2 - s.p1;
    let len2 = d.norm_squared();
    if len2 <= 0.0 {
        return 0.0;
    }
    ((p - s.p1).dot(d) / len2).clamp(0.0, 1.0)
}

pub fn point_segment_distance(p: Vec3, s: &Segment) -> f64 {
    p.distance(s.at(closest_param(p, s)))
}

/// Closest points between two segments, as parameters `(s, t)` on `a` and `b`.
///
/// Follows the clamped-parameter construction: minimize over `s` for the
/// unconstrained optimum, clamp, recompute `t` and clamp again, then re-derive `s`.
/// Degenerate segments and parallel pairs fall out of the same code path.
pub fn closest_params(a: &Segment, b: &Segment) -> (f64, f64) {
    let d1 = a.p2 - a.p1;
    let d2 = b.p2 - b.p1;
    let r = a.p1 - b.p1;
    let aa = d1.norm_squared();
    let ee = d2.norm_squared();
    let f = d2.dot(r);

    if aa <= 0.0 && ee <= 0.0 {
        return (0.0, 0.0);
    }
    if aa <= 0.0 {
        return (0.0, (f / ee).clamp(0.0, 1.0));
    }
    let c = d1.dot(r);
    if ee <= 0.0 {
        return ((-c / aa).clamp(0.0, 1.0), 0.0);
    }

    let bb = d1.dot(d2);
    let denom = aa * ee - bb * bb;
    let mut s = if denom > 0.0 {
        ((bb * f - c * ee) / denom).clamp(0.0, 1.0)
    } else {
        // parallel: any s works, pick the start of `a`
        0.0
    };
    let mut t = (bb * s + f) / ee;
    if t < 0.0 {
        t = 0.0;
        s = (-c / aa).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((bb - c) / aa).clamp(0.0, 1.0);
    }
    (s, t)
}

/// Minimum distance between two segments.
///
/// Arguments are put in a canonical order first so the result is bit-identical
/// under swapping them.
pub fn segment_segment_distance(a: &Segment, b: &Segment) -> f64 {
    let (a, b) = if segment_key(b) < segment_key(a) {
        (b, a)
    } else {
        (a, b)
    };
    let (s, t) = closest_params(a, b);
    a.at(s).distance(b.at(t))
}

fn segment_key(s: &Segment) -> [u64; 6] {
    // Ordered bit keys: a total order on finite floats consistent with `<`.
    let k = |x: f64| {
        let bits = x.to_bits();
        if bits >> 63 == 1 {
            !bits
        } else {
            bits | (1 << 63)
        }
    };
    [
        k(s.p1.x),
        k(s.p1.y),
        k(s.p1.z),
        k(s.p2.x),
        k(s.p2.y),
        k(s.p2.z),
    ]
}

/// Closed test: touching capsules intersect.
#[inline]
pub fn capsules_intersect(c1: &Capsule, c2: &Capsule) -> bool {
    segment_segment_distance(&c1.seg, &c2.seg) <= c1.radius + c2.radius
}

/// Signed clearance between two capsule surfaces (negative when they overlap).
pub fn capsule_distance(c1: &Capsule, c2: &Capsule) -> f64 {
    segment_segment_distance(&c1.seg, &c2.seg) - c1.radius - c2.radius
}

/// Radius needed for a capsule around `axis` to contain `c`.
fn enclosing_radius(axis: &Segment, c: &Capsule) -> f64 {
    c.radius + point_segment_distance(c.seg.p1, axis).max(point_segment_distance(c.seg.p2, axis))
}

/// A capsule containing both inputs.
///
/// Two candidate axes are tried: the segment joining the midpoints of
/// corresponding endpoints (tight when the inputs are one capsule at two poses)
/// and the segment joining the two capsule centres (tight for spheres).
/// For either axis the radius is the largest endpoint-to-axis distance plus the
/// input radius; convexity of the point-to-segment distance makes the endpoint
/// maximum bound the whole input axis. The smaller result wins, ties go to the
/// endpoint-midpoint axis.
pub fn enclosing_capsule(c1: &Capsule, c2: &Capsule) -> Capsule {
    let paired = Segment::new((c1.seg.p1 + c2.seg.p1) * 0.5, (c1.seg.p2 + c2.seg.p2) * 0.5);
    let paired_r = enclosing_radius(&paired, c1).max(enclosing_radius(&paired, c2));
    let centres = Segment::new(c1.seg.midpoint(), c2.seg.midpoint());
    let centres_r = enclosing_radius(&centres, c1).max(enclosing_radius(&centres, c2));
    if centres_r < paired_r {
        Capsule::new(centres, centres_r)
    } else {
        Capsule::new(paired, paired_r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn point_segment_examples() {
        let s = Segment::new(v(0., 0., 0.), v(1., 0., 0.));
        assert_eq!(point_segment_distance(v(0., 1., 0.), &s), 1.0);
        assert_eq!(point_segment_distance(v(2., 0., 0.), &s), 1.0);
        let p = Segment::point(v(1., 1., 1.));
        assert!((point_segment_distance(v(0., 0., 0.), &p) - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn segment_segment_examples() {
        let a = Segment::new(v(0., 0., 0.), v(1., 0., 0.));
        let b = Segment::new(v(0., 1., 0.), v(1., 1., 0.));
        assert!((segment_segment_distance(&a, &b) - 1.0).abs() < 1e-15);
        let c = Segment::new(v(0.5, 1., -1.), v(0.5, 1., 1.));
        assert!((segment_segment_distance(&a, &c) - 1.0).abs() < 1e-15);
        let (s, t) = closest_params(&a, &c);
        assert!((s - 0.5).abs() < 1e-15 && (t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_and_collinear_segments() {
        let a = Segment::new(v(0., 0., 0.), v(1., 0., 0.));
        let b = Segment::new(v(2., 0., 0.), v(3., 0., 0.));
        assert!((segment_segment_distance(&a, &b) - 1.0).abs() < 1e-15);
        let overlapping = Segment::new(v(0.5, 0., 0.), v(3., 0., 0.));
        assert_eq!(segment_segment_distance(&a, &overlapping), 0.0);
        let pa = Segment::point(v(0., 0., 0.));
        let pb = Segment::point(v(0., 0., 2.));
        assert_eq!(segment_segment_distance(&pa, &pb), 2.0);
        assert_eq!(segment_segment_distance(&pa, &a), 0.0);
    }

    #[test]
    fn capsule_intersection_is_closed() {
        let c1 = Capsule::sphere(v(0., 0., 0.), 0.5);
        let near = Capsule::sphere(v(0.9, 0., 0.), 0.5);
        let touching = Capsule::sphere(v(1.0, 0., 0.), 0.5);
        let apart = Capsule::sphere(v(1.0 + 1e-9, 0., 0.), 0.5);
        assert!(capsules_intersect(&c1, &near));
        assert!(capsules_intersect(&c1, &touching));
        assert!(!capsules_intersect(&c1, &apart));
    }

    #[test]
    fn enclosing_examples() {
        let c = Capsule::from_points(v(0.1, 0.2, 0.3), v(1., -1., 2.), 0.25);
        assert_eq!(enclosing_capsule(&c, &c), c);
        let a = Capsule::sphere(v(0., 0., 0.), 0.1);
        let b = Capsule::sphere(v(1., 0., 0.), 0.1);
        let e = enclosing_capsule(&a, &b);
        assert_eq!(e.seg, Segment::new(v(0., 0., 0.), v(1., 0., 0.)));
        assert_eq!(e.radius, 0.1);
        let a = Capsule::from_points(v(0., 0., 0.), v(1., 0., 0.), 0.1);
        let b = Capsule::from_points(v(0., 0., 0.), v(1., 0., 0.), 0.1);
        let e = enclosing_capsule(&a, &b);
        assert_eq!(e.seg, Segment::new(v(0., 0., 0.), v(1., 0., 0.)));
        assert_eq!(e.radius, 0.1);
    }

    #[test]
    fn contains_capsule_matches_definition() {
        let big = Capsule::from_points(v(0., 0., 0.), v(2., 0., 0.), 1.0);
        assert!(big.contains_capsule(&Capsule::sphere(v(1., 0.5, 0.), 0.5), 0.0));
        assert!(!big.contains_capsule(&Capsule::sphere(v(1., 0.5, 0.), 0.51), 0.0));
    }
}
