//! Brownian paths: sphere-stopped motions, bridges, annulus excursions, the
//! heat kernel and Green function, and the inversion map.
//!
//! Time steps follow the [`LocalScale`] of the walk: a step taken at `x` has
//! duration `delta * s(x)^2`, so the spatial resolution is a fixed fraction
//! of the local scale. With `LocalScale::UNIT` this is the plain uniform grid.
//!
//! Sphere hits between grid times are detected with the tangent-plane bridge
//! crossing probability `exp(-2 d1 d2 / dt)`, where `d1, d2` are the distances
//! of the step endpoints to the sphere. Hit points are snapped radially onto
//! the sphere.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, LocalScale, Point3};
use crate::rng::StreamRng;

/// Time-stamped polyline realisation of a Brownian path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPath {
    pub times: Vec<f64>,
    pub points: Vec<Point3>,
    /// Target time step in local units.
    pub resolution: f64,
    pub scale: LocalScale,
}

impl SampledPath {
    pub fn single(p: Point3, resolution: f64, scale: LocalScale) -> Self {
        Self {
            times: vec![0.0],
            points: vec![p],
            resolution,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> Point3 {
        self.points[0]
    }

    pub fn last(&self) -> Point3 {
        *self.points.last().expect("non-empty path")
    }

    pub fn duration(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0) - self.times.first().copied().unwrap_or(0.0)
    }

    /// The first `n` points.
    pub fn prefix(&self, n: usize) -> SampledPath {
        let n = n.clamp(1, self.len());
        SampledPath {
            times: self.times[..n].to_vec(),
            points: self.points[..n].to_vec(),
            resolution: self.resolution,
            scale: self.scale,
        }
    }

    /// Points `from..=to` with times shifted to start at 0.
    pub fn slice(&self, from: usize, to: usize) -> SampledPath {
        let t0 = self.times[from];
        SampledPath {
            times: self.times[from..=to].iter().map(|t| t - t0).collect(),
            points: self.points[from..=to].to_vec(),
            resolution: self.resolution,
            scale: self.scale,
        }
    }

    pub fn bbox(&self) -> Aabb {
        Aabb::from_points(&self.points)
    }

    /// Segments as index pairs; a single-point path yields one degenerate
    /// segment so that it still takes part in proximity tests.
    pub fn segment_count(&self) -> usize {
        self.points.len().saturating_sub(1).max(1)
    }

    #[inline]
    pub fn segment(&self, i: usize) -> (Point3, Point3) {
        if self.points.len() == 1 {
            (self.points[0], self.points[0])
        } else {
            (self.points[i], self.points[i + 1])
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Time reversal `t -> T - t`.
    pub fn reversed(&self) -> SampledPath {
        let end = *self.times.last().unwrap_or(&0.0);
        SampledPath {
            times: self.times.iter().rev().map(|t| end - t).collect(),
            points: self.points.iter().rev().copied().collect(),
            resolution: self.resolution,
            scale: self.scale,
        }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.points.is_empty() || self.points.len() != self.times.len() {
            return Err(Error::Degenerate("path must have equal, non-zero numbers of times and points"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Degenerate("path times must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    HitSphere { r: f64 },
    ExhaustedBudget,
    /// Left through the kill sphere before reaching an inward target.
    Escaped,
    /// A sampled point fell outside the region given to [`sample_bm_confined`].
    LeftRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppedPath {
    pub path: SampledPath,
    pub stop_reason: StopReason,
    pub hit_point: Point3,
}

impl StoppedPath {
    pub fn hit(&self) -> bool {
        matches!(self.stop_reason, StopReason::HitSphere { .. })
    }
}

/// Hit tolerance in local units: `max(1e-9, sqrt(delta)/100)`.
pub fn tol_hit(delta: f64) -> f64 {
    (delta.sqrt() / 100.0).max(1e-9)
}

/// Heat kernel `p_t(x,y) = (2 pi t)^{-3/2} exp(-|y-x|^2 / 2t)`.
pub fn heat_kernel(x: Point3, y: Point3, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(invalid("t", format!("heat kernel needs t > 0, got {t}")));
    }
    Ok((2.0 * PI * t).powf(-1.5) * (-x.dist2(y) / (2.0 * t)).exp())
}

/// Green function `G(x,y) = 1 / (2 pi |x-y|)`.
pub fn green(x: Point3, y: Point3) -> Result<f64> {
    let d = x.dist(y);
    if d == 0.0 {
        return Err(Error::Degenerate("Green function is singular at x = y"));
    }
    Ok(1.0 / (2.0 * PI * d))
}

/// Controls for sphere-stopped walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkOptions {
    /// Time step in local units.
    pub delta: f64,
    pub scale: LocalScale,
    /// Maximal elapsed local time `sum dt / s^2` before giving up.
    pub budget: f64,
    /// Walks crossing this radius stop with [`StopReason::Escaped`].
    pub kill_radius: Option<f64>,
}

impl WalkOptions {
    pub fn new(delta: f64, scale: LocalScale, budget: f64) -> Self {
        Self {
            delta,
            scale,
            budget,
            kill_radius: None,
        }
    }

    pub fn with_kill_radius(mut self, r: f64) -> Self {
        self.kill_radius = Some(r);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(invalid("delta", format!("must be > 0, got {}", self.delta)));
        }
        if !(self.budget > 0.0) {
            return Err(invalid("budget", format!("must be > 0, got {}", self.budget)));
        }
        Ok(())
    }
}

/// Brownian motion run until it hits `S_target_r` (inward or outward).
pub fn sample_bm_to_sphere(
    start: Point3,
    target_r: f64,
    opts: &WalkOptions,
    rng: &mut StreamRng,
) -> Result<StoppedPath> {
    let lp = sample_bm_levels(start, &[target_r], opts, rng)?;
    let hit_point = lp.path.last();
    Ok(StoppedPath {
        path: lp.path,
        stop_reason: lp.stop_reason,
        hit_point,
    })
}

/// A walk stopped successively at a list of spheres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeveledPath {
    pub path: SampledPath,
    /// Log-radii of the level spheres, in the order they are targeted.
    pub levels: Vec<f64>,
    /// Index of the point snapped onto each level sphere, if reached.
    pub hit_index: Vec<Option<usize>>,
    pub stop_reason: StopReason,
}

impl LeveledPath {
    /// The trace stopped at level `i`, i.e. `B[0, T_{levels[i]}]`.
    pub fn stopped_at(&self, i: usize) -> Option<SampledPath> {
        self.hit_index[i].map(|k| self.path.prefix(k + 1))
    }

    /// Number of points in the trace stopped at level `i`.
    pub fn prefix_len(&self, i: usize) -> Option<usize> {
        self.hit_index[i].map(|k| k + 1)
    }
}

/// Brownian motion from `start` stopped in turn at each sphere `S_{levels[i]}`.
///
/// Levels must be monotone away from the start (all outward, increasing, or
/// all inward, decreasing). The path up to `hit_index[i]` is exactly the walk
/// stopped at the `i`-th sphere, so traces at different levels are nested.
pub fn sample_bm_levels(
    start: Point3,
    levels: &[f64],
    opts: &WalkOptions,
    rng: &mut StreamRng,
) -> Result<LeveledPath> {
    walk_levels(start, levels, opts, rng, &|_| true)
}

/// Like [`sample_bm_to_sphere`], but stops with [`StopReason::LeftRegion`]
/// as soon as a sampled point falls outside `region`. Snapped hit points are
/// tested too.
pub fn sample_bm_confined(
    start: Point3,
    target_r: f64,
    opts: &WalkOptions,
    rng: &mut StreamRng,
    region: &dyn Fn(Point3) -> bool,
) -> Result<StoppedPath> {
    if !region(start) {
        return Ok(StoppedPath {
            path: SampledPath::single(start, opts.delta, opts.scale),
            stop_reason: StopReason::LeftRegion,
            hit_point: start,
        });
    }
    let lp = walk_levels(start, &[target_r], opts, rng, region)?;
    let hit_point = lp.path.last();
    Ok(StoppedPath {
        path: lp.path,
        stop_reason: lp.stop_reason,
        hit_point,
    })
}

fn walk_levels(
    start: Point3,
    levels: &[f64],
    opts: &WalkOptions,
    rng: &mut StreamRng,
    region: &dyn Fn(Point3) -> bool,
) -> Result<LeveledPath> {
    opts.validate()?;
    if !start.is_finite() {
        return Err(Error::Degenerate("start point must be finite"));
    }
    if levels.is_empty() {
        return Err(invalid("levels", "need at least one target sphere"));
    }
    let tol = tol_hit(opts.delta);
    let mut times = vec![0.0];
    let mut points = vec![start];
    let mut hit_index = vec![None; levels.len()];
    let mut level = 0usize;
    let mut x = start;
    let mut t = 0.0;
    let mut local_time = 0.0;
    let mut stop = StopReason::ExhaustedBudget;

    // Direction fixed by the first level that is not already touched.
    let outward_of = |r: f64, x: Point3| r.exp() >= x.norm();

    'walk: loop {
        // Consume every level the current point already sits on.
        while level < levels.len() {
            let radius = levels[level].exp();
            let s = opts.scale.at(x);
            if (x.norm() - radius).abs() <= tol * s {
                let n = x.norm();
                if n > 0.0 {
                    x = x * (radius / n);
                    *points.last_mut().unwrap() = x;
                }
                hit_index[level] = Some(points.len() - 1);
                level += 1;
            } else {
                break;
            }
        }
        if level == levels.len() {
            stop = StopReason::HitSphere {
                r: levels[levels.len() - 1],
            };
            break;
        }
        let radius = levels[level].exp();
        let outward = outward_of(levels[level], x);

        if local_time >= opts.budget {
            break;
        }
        let s = opts.scale.at(x);
        let dt = opts.delta * s * s;
        let y = x + rng.normal3() * dt.sqrt();
        local_time += opts.delta;

        let (nx, ny) = (x.norm(), y.norm());
        let (d1, d2) = if outward {
            (radius - nx, radius - ny)
        } else {
            (nx - radius, ny - radius)
        };
        let crossed_end = d2 <= 0.0;
        let crossed_between = !crossed_end && rng.open01() < (-2.0 * d1 * d2 / dt).exp();

        if crossed_end {
            let f = segment_sphere_fraction(x, y, radius, outward);
            let hit = x + (y - x) * f;
            let hit = snap(hit, radius, y);
            let th = t + f.max(1e-12) * dt;
            push_point(&mut times, &mut points, th, hit);
            x = hit;
            t = th;
            hit_index[level] = Some(points.len() - 1);
            level += 1;
            if !region(hit) {
                stop = StopReason::LeftRegion;
                break;
            }
            continue 'walk;
        }
        if crossed_between {
            let hit = snap(y, radius, y);
            t += dt;
            push_point(&mut times, &mut points, t, hit);
            x = hit;
            hit_index[level] = Some(points.len() - 1);
            level += 1;
            if !region(hit) {
                stop = StopReason::LeftRegion;
                break;
            }
            continue 'walk;
        }
        t += dt;
        push_point(&mut times, &mut points, t, y);
        x = y;
        if !region(y) {
            stop = StopReason::LeftRegion;
            break;
        }
        if let Some(kill) = opts.kill_radius {
            if !outward && ny >= kill {
                stop = StopReason::Escaped;
                break;
            }
        }
    }
    Ok(LeveledPath {
        path: SampledPath {
            times,
            points,
            resolution: opts.delta,
            scale: opts.scale,
        },
        levels: levels.to_vec(),
        hit_index,
        stop_reason: stop,
    })
}

fn push_point(times: &mut Vec<f64>, points: &mut Vec<Point3>, t: f64, p: Point3) {
    let last = *times.last().unwrap();
    let t = if t > last { t } else { next_up(last) };
    times.push(t);
    points.push(p);
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

fn snap(p: Point3, radius: f64, fallback: Point3) -> Point3 {
    let n = p.norm();
    if n > 0.0 {
        p * (radius / n)
    } else {
        fallback.normalized().map(|u| u * radius).unwrap_or(p)
    }
}

/// Fraction `f` along `[x,y]` where the segment first meets the sphere of the
/// given radius, for a segment starting on the near side.
fn segment_sphere_fraction(x: Point3, y: Point3, radius: f64, outward: bool) -> f64 {
    let d = y - x;
    let a = d.norm2();
    let b = 2.0 * x.dot(d);
    let c = x.norm2() - radius * radius;
    if a == 0.0 {
        return 1.0;
    }
    let disc = (b * b - 4.0 * a * c).max(0.0).sqrt();
    let f = if outward {
        (-b + disc) / (2.0 * a)
    } else {
        (-b - disc) / (2.0 * a)
    };
    f.clamp(0.0, 1.0)
}

/// Brownian bridge from `x` to `y` of duration `t` on a uniform grid of at
/// most `delta` per step. The endpoints are exact.
pub fn sample_bridge(
    x: Point3,
    y: Point3,
    t: f64,
    delta: f64,
    rng: &mut StreamRng,
) -> Result<SampledPath> {
    if !(t > 0.0) {
        return Err(invalid("t", format!("bridge duration must be > 0, got {t}")));
    }
    if !(delta > 0.0) {
        return Err(invalid("delta", format!("must be > 0, got {delta}")));
    }
    let steps = ((t / delta).ceil() as usize).max(1);
    let mut p = sample_bridge_steps(x, y, t, steps, rng);
    p.resolution = delta;
    Ok(p)
}

/// Bridge with a fixed number of equal steps.
pub fn sample_bridge_steps(
    x: Point3,
    y: Point3,
    t: f64,
    steps: usize,
    rng: &mut StreamRng,
) -> SampledPath {
    let steps = steps.max(1);
    let dt = t / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut points = Vec::with_capacity(steps + 1);
    times.push(0.0);
    points.push(x);
    let mut cur = x;
    for i in 1..steps {
        let remaining = t - (i - 1) as f64 * dt;
        let w = dt / remaining;
        let mean = cur + (y - cur) * w;
        let var = dt * (remaining - dt) / remaining;
        cur = mean + rng.normal3() * var.max(0.0).sqrt();
        times.push(i as f64 * dt);
        points.push(cur);
    }
    times.push(t);
    points.push(y);
    SampledPath {
        times,
        points,
        resolution: dt,
        scale: LocalScale::UNIT,
    }
}

/// Outcome counters of the excursion sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExcursionStats {
    pub attempts: u64,
    pub accepted: u64,
}

/// Approximate sample of the normalised excursion law between the inner and
/// outer boundary of `ann` (centered at the origin).
///
/// Rejection construction: start uniformly on the outer sphere and run until
/// the inner sphere is hit, rejecting walks that escape through the kill
/// sphere `e^6 * outer`. The piece after the last visit to the outer sphere,
/// reversed in time, is an excursion from the inner to the outer boundary.
/// The acceptance rate is the harmonic ratio `inner/outer`.
pub fn sample_annulus_excursion(
    inner_radius: f64,
    outer_radius: f64,
    delta: f64,
    max_attempts: u64,
    rng: &mut StreamRng,
    stats: &mut ExcursionStats,
) -> Result<SampledPath> {
    if !(inner_radius > 0.0 && inner_radius < outer_radius) {
        return Err(invalid("annulus", "need 0 < inner < outer"));
    }
    let opts = WalkOptions::new(delta, LocalScale::origin_scaled(inner_radius), 1e7)
        .with_kill_radius(outer_radius * 6f64.exp());
    let r_in = inner_radius.ln();
    for _ in 0..max_attempts {
        stats.attempts += 1;
        let start = rng.unit_vector() * outer_radius;
        let sp = sample_bm_to_sphere(start, r_in, &opts, rng)?;
        if !sp.hit() {
            continue;
        }
        stats.accepted += 1;
        let pts = &sp.path.points;
        let last_out = pts
            .iter()
            .rposition(|p| p.norm() >= outer_radius)
            .unwrap_or(0);
        let mut piece = sp.path.slice(last_out, pts.len() - 1);
        let first = piece.points[0];
        piece.points[0] = snap(first, outer_radius, first);
        return Ok(piece.reversed());
    }
    Err(Error::RejectionBudget {
        sampler: "annulus excursion",
        attempts: max_attempts,
    })
}

impl LocalScale {
    /// Radial scale around the origin with the given floor.
    pub fn origin_scaled(floor: f64) -> Self {
        LocalScale::Radial {
            center: Point3::ORIGIN,
            floor,
        }
    }
}

/// Image of a path under `x -> x/|x|^2`, re-timed by the clock
/// `int ds / |B_s|^2` (trapezoidal rule on the existing grid).
pub fn invert_path(p: &SampledPath, eps_inv: f64) -> Result<SampledPath> {
    if p.points.iter().any(|x| x.norm() < eps_inv) {
        return Err(Error::Degenerate("path comes within eps_inv of the origin"));
    }
    let points: Vec<Point3> = p.points.iter().map(|x| *x / x.norm2()).collect();
    let mut times = Vec::with_capacity(p.len());
    times.push(0.0);
    let mut clock = 0.0;
    for i in 1..p.len() {
        let dt = p.times[i] - p.times[i - 1];
        clock += 0.5 * dt * (1.0 / p.points[i - 1].norm2() + 1.0 / p.points[i].norm2());
        let last = *times.last().unwrap();
        times.push(if clock > last { clock } else { next_up(last) });
    }
    Ok(SampledPath {
        times,
        points,
        resolution: p.resolution,
        scale: p.scale,
    })
}
