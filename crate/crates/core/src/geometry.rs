//! Geometric primitives: points, log-radius spheres, annuli, cones, cubes,
//! and exact segment distances.
//!
//! All lengths are dimensionless with the unit ball as the scale anchor.
//! Spheres are addressed by log-radius, `S_r = {|x| = e^r}`.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    #[inline]
    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }

    #[inline]
    pub fn dist2(self, o: Self) -> f64 {
        (self - o).norm2()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector in the direction of `self`. The zero vector has no direction.
    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("cannot normalize the zero vector"));
        }
        Ok(self / n)
    }

    #[inline]
    pub fn min_components(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    #[inline]
    pub fn max_components(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Point3 {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Self;
    #[inline]
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Point3 {
    type Output = Self;
    #[inline]
    fn div(self, s: f64) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Index<usize> for Point3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Point3 index {i} out of range"),
        }
    }
}

/// Radius `e^r` of the sphere `S_r`.
#[inline]
pub fn log_sphere_radius(r: f64) -> f64 {
    r.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSphere {
    pub r: f64,
}

impl LogSphere {
    pub fn new(r: f64) -> Self {
        Self { r }
    }

    pub fn radius(&self) -> f64 {
        log_sphere_radius(self.r)
    }
}

/// Open annulus `inner_radius < |x - center| < outer_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annulus {
    pub center: Point3,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Annulus {
    pub fn new(center: Point3, inner_radius: f64, outer_radius: f64) -> Result<Self> {
        if !(inner_radius >= 0.0 && inner_radius < outer_radius && outer_radius.is_finite()) {
            return Err(crate::error::invalid(
                "annulus",
                format!("need 0 <= inner < outer, got {inner_radius} and {outer_radius}"),
            ));
        }
        Ok(Self {
            center,
            inner_radius,
            outer_radius,
        })
    }

    /// Annulus between the log-spheres `S_a` and `S_b` around the origin.
    pub fn between_log_spheres(a: f64, b: f64) -> Result<Self> {
        Self::new(Point3::ORIGIN, a.exp(), b.exp())
    }

    pub fn contains(&self, p: Point3) -> bool {
        let d = p.dist(self.center);
        d > self.inner_radius && d < self.outer_radius
    }
}

/// The cone `A_δ = {x : |x/|x| - u| < δ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub apex_direction: Point3,
    pub aperture: f64,
}

impl Cone {
    pub fn new(apex_direction: Point3, aperture: f64) -> Result<Self> {
        if !(aperture > 0.0 && aperture < 2.0) {
            return Err(crate::error::invalid(
                "aperture",
                format!("must lie in (0,2), got {aperture}"),
            ));
        }
        Ok(Self {
            apex_direction: apex_direction.normalized()?,
            aperture,
        })
    }

    /// `A_δ` around `u = (1,0,0)`.
    pub fn around_x(aperture: f64) -> Result<Self> {
        Self::new(Point3::new(1.0, 0.0, 0.0), aperture)
    }

    /// The reflected cone `-A_δ`.
    pub fn reflected(&self) -> Self {
        Self {
            apex_direction: -self.apex_direction,
            aperture: self.aperture,
        }
    }

    pub fn contains(&self, p: Point3) -> Result<bool> {
        cone_contains(self, p)
    }
}

pub fn cone_contains(c: &Cone, p: Point3) -> Result<bool> {
    let n = p.norm();
    if n == 0.0 {
        return Err(Error::Degenerate("cone membership is undefined at the origin"));
    }
    Ok((p / n).dist(c.apex_direction) < c.aperture)
}

/// Closed axis-aligned cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    pub center: Point3,
    pub half_side: f64,
}

impl Cube {
    pub fn new(center: Point3, half_side: f64) -> Result<Self> {
        if !(half_side > 0.0 && half_side.is_finite()) {
            return Err(crate::error::invalid("half_side", format!("must be > 0, got {half_side}")));
        }
        Ok(Self { center, half_side })
    }

    pub fn aabb(&self) -> Aabb {
        let h = Point3::new(self.half_side, self.half_side, self.half_side);
        Aabb {
            min: self.center - h,
            max: self.center + h,
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        (p.x - self.center.x).abs() <= self.half_side
            && (p.y - self.center.y).abs() <= self.half_side
            && (p.z - self.center.z).abs() <= self.half_side
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_side).powi(3)
    }
}

/// Closed ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point3,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point3, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn centered(radius: f64) -> Self {
        Self::new(Point3::ORIGIN, radius)
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.dist2(self.center) <= self.radius * self.radius
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radius.powi(3)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.include(*p);
        }
        b
    }

    #[inline]
    pub fn include(&mut self, p: Point3) {
        self.min = self.min.min_components(p);
        self.max = self.max.max_components(p);
    }

    pub fn union(&self, o: &Aabb) -> Aabb {
        Aabb {
            min: self.min.min_components(o.min),
            max: self.max.max_components(o.max),
        }
    }

    pub fn inflate(&self, by: f64) -> Aabb {
        let d = Point3::new(by, by, by);
        Aabb {
            min: self.min - d,
            max: self.max + d,
        }
    }

    #[inline]
    pub fn intersects(&self, o: &Aabb) -> bool {
        self.min.x <= o.max.x
            && o.min.x <= self.max.x
            && self.min.y <= o.max.y
            && o.min.y <= self.max.y
            && self.min.z <= o.max.z
            && o.min.z <= self.max.z
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Lower bound on the distance between the boxes (0 when they overlap).
    pub fn gap(&self, o: &Aabb) -> f64 {
        let dx = (o.min.x - self.max.x).max(self.min.x - o.max.x).max(0.0);
        let dy = (o.min.y - self.max.y).max(self.min.y - o.max.y).max(0.0);
        let dz = (o.min.z - self.max.z).max(self.min.z - o.max.z).max(0.0);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    /// Distance from a point to the box (0 inside).
    pub fn point_distance(&self, p: Point3) -> f64 {
        let dx = (self.min.x - p.x).max(p.x - self.max.x).max(0.0);
        let dy = (self.min.y - p.y).max(p.y - self.max.y).max(0.0);
        let dz = (self.min.z - p.z).max(p.z - self.max.z).max(0.0);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Euclidean distance between the closed segments `[a1,a2]` and `[b1,b2]`.
///
/// Closest points are found by clamped parametric minimisation; degenerate
/// (point) segments are handled explicitly.
pub fn segment_segment_distance(a1: Point3, a2: Point3, b1: Point3, b2: Point3) -> f64 {
    segment_segment_distance2(a1, a2, b1, b2).sqrt()
}

/// Squared form of [`segment_segment_distance`].
pub fn segment_segment_distance2(a1: Point3, a2: Point3, b1: Point3, b2: Point3) -> f64 {
    // Canonical ordering makes the result bit-identical under argument swap
    // and endpoint reversal.
    let canon = |p: Point3, q: Point3| {
        if p.to_array() > q.to_array() {
            (q, p)
        } else {
            (p, q)
        }
    };
    let (a1, a2) = canon(a1, a2);
    let (b1, b2) = canon(b1, b2);
    if (a1.to_array(), a2.to_array()) > (b1.to_array(), b2.to_array()) {
        return segment_segment_distance2_ordered(b1, b2, a1, a2);
    }
    segment_segment_distance2_ordered(a1, a2, b1, b2)
}

fn segment_segment_distance2_ordered(p1: Point3, q1: Point3, p2: Point3, q2: Point3) -> f64 {
    const EPS: f64 = 1e-300;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm2();
    let e = d2.norm2();
    let f = d2.dot(r);

    let (s, t);
    if a <= EPS && e <= EPS {
        return r.norm2();
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    let exact = c1.dist2(c2);
    // Guard against cancellation in nearly parallel configurations: the
    // endpoint-to-segment distances are always valid upper bounds.
    exact
        .min(point_segment_distance2(p1, p2, q2))
        .min(point_segment_distance2(q1, p2, q2))
        .min(point_segment_distance2(p2, p1, q1))
        .min(point_segment_distance2(q2, p1, q1))
}

/// Squared distance from `p` to the closed segment `[a,b]`.
pub fn point_segment_distance2(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = b - a;
    let l2 = ab.norm2();
    if l2 == 0.0 {
        return p.dist2(a);
    }
    let t = ((p - a).dot(ab) / l2).clamp(0.0, 1.0);
    p.dist2(a + ab * t)
}

/// Whether the closed segment `[a,b]` meets the closed box (slab test).
pub fn segment_intersects_aabb(a: Point3, b: Point3, bx: &Aabb) -> bool {
    let d = b - a;
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for axis in 0..3 {
        let (o, dir, lo, hi) = (a[axis], d[axis], bx.min[axis], bx.max[axis]);
        if dir == 0.0 {
            if o < lo || o > hi {
                return false;
            }
        } else {
            let inv = 1.0 / dir;
            let mut ta = (lo - o) * inv;
            let mut tb = (hi - o) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// Where the resolution of sampled objects is anchored.
///
/// `Uniform` uses one length scale everywhere. `Radial` uses
/// `max(|x - center|, floor)`, making steps and contact tolerances a fixed
/// fraction of the distance to `center`: the natural resolution for
/// scale-invariant events spanning many log-scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalScale {
    Uniform { length: f64 },
    Radial { center: Point3, floor: f64 },
}

impl LocalScale {
    pub const UNIT: LocalScale = LocalScale::Uniform { length: 1.0 };

    /// Radial scale around the origin with unit floor.
    pub const fn origin() -> Self {
        LocalScale::Radial {
            center: Point3::ORIGIN,
            floor: 1.0,
        }
    }

    #[inline]
    pub fn at(&self, p: Point3) -> f64 {
        match *self {
            LocalScale::Uniform { length } => length,
            LocalScale::Radial { center, floor } => p.dist(center).max(floor),
        }
    }

    /// Scale assigned to the segment `[a,b]`: the scale at its endpoint
    /// nearer to the anchor.
    #[inline]
    pub fn at_segment(&self, a: Point3, b: Point3) -> f64 {
        match *self {
            LocalScale::Uniform { length } => length,
            LocalScale::Radial { center, floor } => {
                a.dist(center).min(b.dist(center)).max(floor)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn log_sphere_radii() {
        assert_eq!(log_sphere_radius(0.0), 1.0);
        assert!((log_sphere_radius(1.0) - std::f64::consts::E).abs() < 1e-15);
        assert!((log_sphere_radius(-std::f64::consts::LN_2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cone_membership() {
        let a = Cone::around_x(0.1).unwrap();
        assert!(a.contains(p(2.0, 0.0, 0.0)).unwrap());
        assert!(!a.contains(p(-1.0, 0.0, 0.0)).unwrap());
        // |(1,0.2,0)/|.| - u| by hand.
        let n = (1.0f64 + 0.04).sqrt();
        let chord = ((1.0 / n - 1.0).powi(2) + (0.2 / n).powi(2)).sqrt();
        assert!((chord - 0.198).abs() < 1e-3);
        assert!(!a.contains(p(1.0, 0.2, 0.0)).unwrap());
        assert!(matches!(a.contains(Point3::ORIGIN), Err(Error::Degenerate(_))));
        assert!(Cone::around_x(2.0).is_err());
        assert!(Cone::new(Point3::ORIGIN, 0.5).is_err());
    }

    #[test]
    fn segment_distances() {
        // Collinear overlapping.
        assert_eq!(
            segment_segment_distance(p(0., 0., 0.), p(2., 0., 0.), p(1., 0., 0.), p(3., 0., 0.)),
            0.0
        );
        // Parallel offset by (0,0,1).
        let d = segment_segment_distance(p(0., 0., 0.), p(1., 0., 0.), p(0., 0., 1.), p(1., 0., 1.));
        assert!((d - 1.0).abs() < 1e-15);
        // Skew pair; oracle: brute-force grid minimisation.
        let (a1, a2, b1, b2) = (p(0., 0., 0.), p(1., 0., 0.), p(0., 0., 1.), p(0., 1., 1.));
        let mut best = f64::INFINITY;
        let n = 400;
        for i in 0..=n {
            for j in 0..=n {
                let s = i as f64 / n as f64;
                let t = j as f64 / n as f64;
                best = best.min((a1 + (a2 - a1) * s).dist(b1 + (b2 - b1) * t));
            }
        }
        assert!((best - 1.0).abs() < 1e-12);
        let d = segment_segment_distance(a1, a2, b1, b2);
        assert!((d - best).abs() < 1e-12);
        // Degenerate segments.
        let d = segment_segment_distance(p(0., 0., 0.), p(0., 0., 0.), p(3., 0., 0.), p(3., 0., 0.));
        assert_eq!(d, 3.0);
    }

    #[test]
    fn segment_box() {
        let b = Cube::new(Point3::ORIGIN, 0.5).unwrap().aabb();
        assert!(segment_intersects_aabb(p(-1., 0., 0.), p(1., 0., 0.), &b));
        assert!(!segment_intersects_aabb(p(-1., 1., 0.), p(1., 1., 0.), &b));
        assert!(segment_intersects_aabb(p(0.5, 0.5, 0.5), p(2., 2., 2.), &b));
        assert!(segment_intersects_aabb(p(0.1, 0.1, 0.1), p(0.1, 0.1, 0.1), &b));
    }

    #[test]
    fn radial_scale_floor() {
        let s = LocalScale::origin();
        assert_eq!(s.at(p(0.1, 0., 0.)), 1.0);
        assert_eq!(s.at(p(3.0, 4.0, 0.)), 5.0);
        assert_eq!(s.at_segment(p(3.0, 4.0, 0.), p(6.0, 8.0, 0.)), 5.0);
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn cone_scale_invariant(q in arb_point(), s in 0.01..100.0f64) {
            prop_assume!(q.norm() > 1e-6);
            let c = Cone::around_x(0.7).unwrap();
            prop_assert_eq!(c.contains(q).unwrap(), c.contains(q * s).unwrap());
        }

        #[test]
        fn segment_distance_symmetric_and_bounded(
            a1 in arb_point(), a2 in arb_point(), b1 in arb_point(), b2 in arb_point()
        ) {
            let d = segment_segment_distance(a1, a2, b1, b2);
            prop_assert_eq!(d, segment_segment_distance(b1, b2, a1, a2));
            prop_assert_eq!(d, segment_segment_distance(a2, a1, b2, b1));
            let ends = a1.dist(b1).min(a1.dist(b2)).min(a2.dist(b1)).min(a2.dist(b2));
            prop_assert!(d <= ends + 1e-12);
            // Never below the true minimum sampled on a grid.
            let mut grid = f64::INFINITY;
            for i in 0..=20 {
                for j in 0..=20 {
                    let s = i as f64 / 20.0;
                    let t = j as f64 / 20.0;
                    grid = grid.min((a1 + (a2 - a1) * s).dist(b1 + (b2 - b1) * t));
                }
            }
            prop_assert!(d <= grid + 1e-9);
        }
    }
}
