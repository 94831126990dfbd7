//! Cut-box scans on a single loop in an independent soup.
//!
//! The loop is a counter-based dyadic Brownian bridge: the point at every
//! dyadic time is a fixed function of the loop key, so it can be refined
//! lazily and differently around each cube while remaining one path.

use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::cluster::ClusterIndex;
use crate::error::{invalid, Error, Result};
use crate::geometry::{point_segment_distance2, Aabb, Ball, Cube, LocalScale, Point3};
use crate::path::{tol_hit, SampledPath};
use crate::rng::{counter_normals, stream_id, RngStream};
use crate::soup::{contained_in, duration_inverse_cdf, sample_soup, RootRegion, SoupConfig};
use crate::spatial::{ContactGrid, QueryScratch, Tolerance};
use crate::stats::{linear_fit, percentile_interval, resample_indices, LinearFit};

const TAG_CUT: u64 = 0x6375_7473;
/// Refinement margin in units of `sqrt(dt)`.
const KAPPA: f64 = 6.0;
/// Half side of `D_0 = [-1/16, 1/16]^3`.
pub const D0_HALF: f64 = 1.0 / 16.0;

/// Brownian bridge from `root` to itself, defined at dyadic times by the
/// Lévy midpoint construction with counter-based normals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DyadicLoop {
    pub root: Point3,
    pub duration: f64,
    pub key: u64,
    pub max_level: u32,
}

impl DyadicLoop {
    #[inline]
    fn midpoint(&self, a: Point3, b: Point3, level: u32, index: u64, dt: f64) -> Point3 {
        (a + b) * 0.5 + counter_normals(self.key, level, index) * (dt / 4.0).sqrt()
    }

    /// Visits the trace in time order. An interval `[a, b]` of length `dt`
    /// is split while `need(a, b, dt)` holds and the level cap allows.
    pub fn visit(&self, need: &dyn Fn(Point3, Point3, f64) -> bool, f: &mut dyn FnMut(f64, Point3)) {
        f(0.0, self.root);
        // (level, index, a, b)
        let mut stack = vec![(0u32, 0u64, self.root, self.root)];
        while let Some((level, index, a, b)) = stack.pop() {
            let dt = self.duration / (1u64 << level) as f64;
            if level < self.max_level && need(a, b, dt) {
                let m = self.midpoint(a, b, level, index, dt);
                stack.push((level + 1, 2 * index + 1, m, b));
                stack.push((level + 1, 2 * index, a, m));
            } else {
                f((index + 1) as f64 * dt, b);
            }
        }
    }

    pub fn trace(&self, need: &dyn Fn(Point3, Point3, f64) -> bool, resolution: f64, scale: LocalScale) -> SampledPath {
        let mut times = Vec::new();
        let mut points = Vec::new();
        self.visit(need, &mut |t, p| {
            times.push(t);
            points.push(p);
        });
        SampledPath {
            times,
            points,
            resolution,
            scale,
        }
    }

    /// Points at times `i T / 2^level`, built level by level; `None` as soon
    /// as a new point fails `keep`.
    pub fn level_points(&self, level: u32, keep: &dyn Fn(Point3) -> bool) -> Option<Vec<Point3>> {
        let mut pts = vec![self.root, self.root];
        for l in 0..level.min(self.max_level) {
            let dt = self.duration / (1u64 << l) as f64;
            let mut next = Vec::with_capacity(2 * pts.len() - 1);
            for i in 0..pts.len() - 1 {
                let m = self.midpoint(pts[i], pts[i + 1], l, i as u64, dt);
                if !keep(m) {
                    return None;
                }
                next.push(pts[i]);
                next.push(m);
            }
            next.push(*pts.last().unwrap());
            pts = next;
        }
        Some(pts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopLaw {
    /// Bridge of fixed duration rooted at `root`.
    FixedDurationBridge { duration: f64, root: Point3 },
    /// Bridge rooted at `(1 - depth) r a`, duration with density
    /// `∝ t^{-5/2}` on `[t_lo, t_hi]`, kept if its level-`check_level`
    /// points stay in `B_r`.
    TruncatedBubbleApprox {
        r: f64,
        a: Point3,
        depth: f64,
        t_lo: f64,
        t_hi: f64,
        check_level: u32,
        max_attempts: u64,
    },
}

impl LoopLaw {
    pub fn bubble_default() -> Self {
        LoopLaw::TruncatedBubbleApprox {
            r: 0.5,
            a: Point3::new(1.0, 0.0, 0.0),
            depth: 0.02,
            t_lo: 0.25,
            t_hi: 4.0,
            check_level: 10,
            max_attempts: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoupMode {
    /// A fresh soup per cube, restricted to its annulus.
    Independent,
    /// One soup per replica and level shared by all scanned cubes.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutScanConfig {
    pub j: u32,
    pub n_range: Vec<u32>,
    pub loop_law: LoopLaw,
    pub alpha: f64,
    pub delta: f64,
    pub h: f64,
    pub t_min: f64,
    pub min_loop_steps: usize,
    /// Hit detection refines near `D_0` to `dt <= hit_delta 4^{-n_max}`.
    pub hit_delta: f64,
    /// Hit cubes analysed per `n`; above this a uniform subsample is used
    /// and counts are scaled up.
    pub max_cubes_per_n: usize,
    pub soup_mode: SoupMode,
    pub replicas: u64,
    pub seed: u64,
}

impl CutScanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.j < 4 {
            return Err(invalid("j", "must be >= 4"));
        }
        if self.n_range.is_empty() || self.n_range.iter().any(|&n| n < self.j + 4 || n > 30) {
            return Err(invalid("n_range", "need j + 4 <= n <= 30"));
        }
        if self.n_range.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("n_range", "must be strictly increasing"));
        }
        for (name, v) in [("delta", self.delta), ("h", self.h), ("t_min", self.t_min), ("hit_delta", self.hit_delta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be finite and > 0"));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid("alpha", "must be >= 0"));
        }
        if self.max_cubes_per_n == 0 {
            return Err(invalid("max_cubes_per_n", "must be >= 1"));
        }
        Ok(())
    }

    fn n_max(&self) -> u32 {
        *self.n_range.last().unwrap()
    }
}

/// The `n`-cube with grid index `idx` in `D_0`.
pub fn n_cube(n: u32, idx: [u32; 3]) -> Cube {
    let side = (-(n as f64)).exp2();
    let c = |i: u32| -D0_HALF + (i as f64 + 0.5) * side;
    Cube {
        center: Point3::new(c(idx[0]), c(idx[1]), c(idx[2])),
        half_side: side / 2.0,
    }
}

/// Grid index of the `n`-cube containing `p`, if `p` is in `D_0`.
pub fn cube_index(n: u32, p: Point3) -> Option<[u32; 3]> {
    let side = (-(n as f64)).exp2();
    let cells = 1u32 << (n - 3);
    let mut out = [0u32; 3];
    for k in 0..3 {
        let x = p[k] + D0_HALF;
        if !(0.0..=2.0 * D0_HALF).contains(&x) {
            return None;
        }
        out[k] = ((x / side) as u32).min(cells - 1);
    }
    Some(out)
}

fn d0_box() -> Aabb {
    Aabb {
        min: Point3::new(-D0_HALF, -D0_HALF, -D0_HALF),
        max: Point3::new(D0_HALF, D0_HALF, D0_HALF),
    }
}

/// Crossing structure of a path around one cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossings {
    pub s1: usize,
    pub t1: usize,
    pub v: usize,
    pub s2: usize,
    pub t2: usize,
    /// Number of crossings of the annulus between its two boundaries.
    pub crossings: usize,
    pub gamma1: SampledPath,
    pub gamma2: SampledPath,
    pub middle: SampledPath,
}

/// The annulus `B_{2^{-j} - 2^{-n}}(v_D) \ B_{2^{-n}}(v_D)` of a cube.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeAnnulus {
    pub cube: Cube,
    pub r_in: f64,
    pub r_out: f64,
}

impl CubeAnnulus {
    pub fn new(cube: Cube, j: u32, n: u32) -> Self {
        let r_in = (-(n as f64)).exp2();
        Self {
            cube,
            r_in,
            r_out: (-(j as f64)).exp2() - r_in,
        }
    }

    pub fn scale(&self) -> LocalScale {
        LocalScale::Radial {
            center: self.cube.center,
            floor: self.r_in,
        }
    }
}

/// First crossing into the annulus' inner ball before the first visit to the
/// cube, last crossing out after it, and the total crossing count.
/// Boundaries are inflated by `tol * s(x)`.
pub fn locate_crossings(path: &SampledPath, ann: &CubeAnnulus, tol: f64) -> Result<Crossings> {
    let c = ann.cube.center;
    let scale = ann.scale();
    let bx = ann.cube.aabb();
    let pts = &path.points;
    let v = pts
        .iter()
        .position(|p| bx.point_distance(*p) <= tol * scale.at(*p))
        .ok_or(Error::Degenerate("path does not hit the cube"))?;
    let on_in = |p: Point3| p.dist(c) <= ann.r_in + tol * scale.at(p);
    let on_out = |p: Point3| p.dist(c) >= ann.r_out - tol * scale.at(p);
    let s1 = (0..v)
        .rev()
        .find(|&i| on_out(pts[i]))
        .ok_or(Error::Degenerate("path starts inside the annulus"))?;
    let t1 = (s1 + 1..=v).find(|&i| on_in(pts[i])).expect("cube lies in the inner ball");
    let s2 = (v..pts.len()).rev().find(|&i| on_in(pts[i])).expect("v is inside");
    let t2 = (s2 + 1..pts.len())
        .find(|&i| on_out(pts[i]))
        .ok_or(Error::Degenerate("path ends inside the annulus"))?;
    let mut crossings = 0;
    let mut last_out = true;
    for &p in pts {
        if last_out && on_in(p) {
            crossings += 1;
            last_out = false;
        } else if !last_out && on_out(p) {
            crossings += 1;
            last_out = true;
        }
    }
    Ok(Crossings {
        s1,
        t1,
        v,
        s2,
        t2,
        crossings,
        gamma1: path.slice(s1, t1),
        gamma2: path.slice(s2, t2),
        middle: path.slice(t1, s2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBoxRecord {
    pub replica: u64,
    pub n: u32,
    pub cube_x: u32,
    pub cube_y: u32,
    pub cube_z: u32,
    pub hit: bool,
    pub crossings: u32,
    pub is_k: bool,
    pub is_f: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutCountRow {
    pub replica: u64,
    pub j: u32,
    pub n: u32,
    pub cubes_total: u64,
    pub cubes_hit: u64,
    pub cubes_scanned: u64,
    /// Scanned cubes whose refined trace missed the cube.
    pub cubes_lost: u64,
    pub k_scanned: u64,
    pub f_scanned: u64,
    /// `|K_{j,n}|`, scaled up from the scanned subsample when needed.
    pub k_count: f64,
    pub f_count: f64,
}

/// K-cube pairs among scanned cubes with centre distance in
/// `[2^{-m-1}, 2^{-m})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCountRow {
    pub replica: u64,
    pub n: u32,
    pub m: u32,
    pub k_pairs_scanned: u64,
    /// Scale factor from scanned pairs to all pairs of hit cubes.
    pub pair_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CutScan {
    pub counts: Vec<CutCountRow>,
    pub records: Vec<CutBoxRecord>,
    pub pairs: Vec<PairCountRow>,
    /// Loop proposals per accepted loop, per replica.
    pub attempts: Vec<u64>,
}

impl CutScan {
    pub fn write_counts_csv(&self, w: impl Write) -> Result<()> {
        crate::io::write_csv(&self.counts, w)
    }

    pub fn write_pairs_csv(&self, w: impl Write) -> Result<()> {
        crate::io::write_csv(&self.pairs, w)
    }

    pub fn write_records_csv(&self, w: impl Write) -> Result<()> {
        crate::io::write_csv(&self.records, w)
    }

    /// `k_count` per replica (rows) and `n` (columns, in `ns` order).
    pub fn k_matrix(&self, ns: &[u32]) -> Vec<Vec<f64>> {
        let mut reps: Vec<u64> = self.counts.iter().map(|c| c.replica).collect();
        reps.sort_unstable();
        reps.dedup();
        reps.iter()
            .map(|&r| {
                ns.iter()
                    .map(|&n| {
                        self.counts
                            .iter()
                            .find(|c| c.replica == r && c.n == n)
                            .map_or(0.0, |c| c.k_count)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Draws the replica's loop, conditioned on visiting `D_0`.
pub fn sample_scan_loop(cfg: &CutScanConfig, replica: u64) -> Result<(DyadicLoop, u64)> {
    let stream = RngStream::new(cfg.seed, stream_id(&[TAG_CUT, replica]));
    let mut rng = stream.rng();
    let max_level = 48;
    let dt_hit = hit_dt(cfg);
    let bx = d0_box();
    let hits_d0 = |l: &DyadicLoop| {
        let hit = std::cell::Cell::new(false);
        l.visit(
            &|a, b, dt| !hit.get() && refine_near_box(a, b, dt, &bx, dt_hit),
            &mut |_, p| {
                if bx.point_distance(p) == 0.0 {
                    hit.set(true);
                }
            },
        );
        hit.get()
    };
    match cfg.loop_law {
        LoopLaw::FixedDurationBridge { duration, root } => {
            for attempt in 1..=1_000_000u64 {
                let l = DyadicLoop {
                    root,
                    duration,
                    key: rng.next_key(),
                    max_level,
                };
                if hits_d0(&l) {
                    return Ok((l, attempt));
                }
            }
            Err(Error::RejectionBudget {
                sampler: "fixed-duration scan loop",
                attempts: 1_000_000,
            })
        }
        LoopLaw::TruncatedBubbleApprox {
            r,
            a,
            depth,
            t_lo,
            t_hi,
            check_level,
            max_attempts,
        } => {
            let root = a.normalized()? * (r * (1.0 - depth));
            let ball = Ball::centered(r);
            for attempt in 1..=max_attempts {
                let t = duration_inverse_cdf(rng.open01(), t_lo, t_hi)?;
                let l = DyadicLoop {
                    root,
                    duration: t,
                    key: rng.next_key(),
                    max_level,
                };
                if l.level_points(check_level, &|p| ball.contains(p)).is_some() && hits_d0(&l) {
                    return Ok((l, attempt));
                }
            }
            Err(Error::RejectionBudget {
                sampler: "truncated bubble scan loop",
                attempts: max_attempts,
            })
        }
    }
}

fn hit_dt(cfg: &CutScanConfig) -> f64 {
    cfg.hit_delta * (-2.0 * cfg.n_max() as f64).exp2()
}

#[inline]
fn refine_near_box(a: Point3, b: Point3, dt: f64, bx: &Aabb, dt_target: f64) -> bool {
    dt > dt_target && Aabb::from_points([&a, &b]).gap(bx) < KAPPA * dt.sqrt()
}

trait NextKey {
    fn next_key(&mut self) -> u64;
}

impl NextKey for crate::rng::StreamRng {
    fn next_key(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}

/// Hit cubes at every `n`, from one trace refined near `D_0`.
pub fn hit_cubes(cfg: &CutScanConfig, l: &DyadicLoop) -> Vec<Vec<[u32; 3]>> {
    let bx = d0_box();
    let dt_hit = hit_dt(cfg);
    let mut sets: Vec<FxHashSet<[u32; 3]>> = vec![FxHashSet::default(); cfg.n_range.len()];
    l.visit(&|a, b, dt| refine_near_box(a, b, dt, &bx, dt_hit), &mut |_, p| {
        for (k, &n) in cfg.n_range.iter().enumerate() {
            if let Some(idx) = cube_index(n, p) {
                sets[k].insert(idx);
            } else {
                break;
            }
        }
    });
    sets.into_iter()
        .map(|s| {
            let mut v: Vec<[u32; 3]> = s.into_iter().collect();
            v.sort_unstable();
            v
        })
        .collect()
}

/// The loop's trace refined for the annulus of one cube.
pub fn cube_trace(cfg: &CutScanConfig, l: &DyadicLoop, ann: &CubeAnnulus) -> SampledPath {
    let c = ann.cube.center;
    let bx = ann.cube.aabb();
    let dt_hit = hit_dt(cfg);
    let (r_out, floor, delta) = (ann.r_out, ann.r_in, cfg.delta);
    let need = move |a: Point3, b: Point3, dt: f64| {
        let d = point_segment_distance2(c, a, b).sqrt();
        let local = d <= r_out + KAPPA * dt.sqrt() && dt > delta * d.max(floor).powi(2);
        local || refine_near_box(a, b, dt, &bx, dt_hit)
    };
    l.trace(&need, cfg.delta, ann.scale())
}

/// Loops of the annulus soup: inside `B_{r_out}` and outside `B_{r_in}`
/// under the inflated containment predicate.
fn annulus_loops(ann: &CubeAnnulus, loops: impl Iterator<Item = SampledPath>, delta: f64) -> Vec<SampledPath> {
    let tol = tol_hit(delta);
    let scale = ann.scale();
    let outer = Ball::new(ann.cube.center, ann.r_out);
    loops
        .filter(|t| {
            contained_in(t, &outer, tol, &scale)
                && t.points
                    .iter()
                    .all(|p| p.dist(ann.cube.center) - tol * scale.at(*p) > ann.r_in)
        })
        .collect()
}

fn cube_soup_config(cfg: &CutScanConfig, ann: &CubeAnnulus, stream: RngStream) -> SoupConfig {
    SoupConfig {
        alpha: cfg.alpha,
        root_region: RootRegion::Ball(Ball::new(ann.cube.center, ann.r_out)),
        t_min: cfg.t_min,
        t_max: (2.0 * ann.r_out).powi(2),
        scale: ann.scale(),
        containment: Some(Ball::new(ann.cube.center, ann.r_out)),
        exclusion: None,
        delta: cfg.delta,
        min_loop_steps: cfg.min_loop_steps,
        stream,
    }
}

/// Whether the two crossings, each enlarged by the annulus clusters it
/// touches, are disjoint.
pub fn crossings_disjoint(g1: &SampledPath, g2: &SampledPath, loops: Vec<SampledPath>, tol: Tolerance) -> bool {
    let mut grid = ContactGrid::new();
    grid.insert_path(g2, &tol, 0);
    let mut scratch = QueryScratch::new();
    for s in 0..g1.segment_count() {
        let (a, b) = g1.segment(s);
        if !grid.for_each_touching(a, b, tol.reach(a, b), &mut scratch, |_| false) {
            return false;
        }
    }
    if loops.is_empty() {
        return true;
    }
    let idx = ClusterIndex::from_paths(loops, tol);
    let c1: FxHashSet<u32> = idx
        .loops_touching(g1)
        .into_iter()
        .map(|l| idx.cluster_of[l as usize])
        .collect();
    idx.loops_touching(g2)
        .into_iter()
        .all(|l| !c1.contains(&idx.cluster_of[l as usize]))
}

struct CubeOutcome {
    record: CutBoxRecord,
    lost: bool,
}

fn analyse_cube(
    cfg: &CutScanConfig,
    l: &DyadicLoop,
    replica: u64,
    n: u32,
    idx: [u32; 3],
    soup: Vec<SampledPath>,
) -> CubeOutcome {
    let ann = CubeAnnulus::new(n_cube(n, idx), cfg.j, n);
    let path = cube_trace(cfg, l, &ann);
    let mut record = CutBoxRecord {
        replica,
        n,
        cube_x: idx[0],
        cube_y: idx[1],
        cube_z: idx[2],
        hit: false,
        crossings: 0,
        is_k: false,
        is_f: false,
    };
    let Ok(cr) = locate_crossings(&path, &ann, tol_hit(cfg.delta)) else {
        return CubeOutcome { record, lost: true };
    };
    record.hit = true;
    record.crossings = cr.crossings as u32;
    let loops = annulus_loops(&ann, soup.into_iter(), cfg.delta);
    record.is_k = crossings_disjoint(&cr.gamma1, &cr.gamma2, loops, Tolerance::new(cfg.h, ann.scale()));
    record.is_f = record.is_k && cr.crossings >= 4;
    CubeOutcome { record, lost: false }
}

/// Uniform subsample of `k` of the items, in sorted order.
fn subsample(items: &[[u32; 3]], k: usize, stream: RngStream) -> Vec<[u32; 3]> {
    if items.len() <= k {
        return items.to_vec();
    }
    let mut rng = stream.rng();
    let mut v = items.to_vec();
    for i in 0..k {
        let j = i + ((rng.open01() * (v.len() - i) as f64) as usize).min(v.len() - i - 1);
        v.swap(i, j);
    }
    v.truncate(k);
    v.sort_unstable();
    v
}

fn scan_replica(cfg: &CutScanConfig, replica: u64) -> Result<(Vec<CutCountRow>, Vec<CutBoxRecord>, Vec<PairCountRow>, u64)> {
    let (l, attempts) = sample_scan_loop(cfg, replica)?;
    let hits = hit_cubes(cfg, &l);
    let stream = RngStream::new(cfg.seed, stream_id(&[TAG_CUT, replica, 1]));
    let mut counts = Vec::new();
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (k, &n) in cfg.n_range.iter().enumerate() {
        let hit = &hits[k];
        let chosen = subsample(hit, cfg.max_cubes_per_n, stream.child(&[n as u64, 0]));
        let anns: Vec<CubeAnnulus> = chosen
            .iter()
            .map(|&i| CubeAnnulus::new(n_cube(n, i), cfg.j, n))
            .collect();
        let cube_stream = |i: [u32; 3]| stream.child(&[n as u64, 1, i[0] as u64, i[1] as u64, i[2] as u64]);
        let global: Vec<SampledPath> = if cfg.alpha > 0.0 && cfg.soup_mode == SoupMode::Global {
            global_soup(cfg, &anns, &chosen, &cube_stream)?
        } else {
            Vec::new()
        };
        let outcomes: Vec<CubeOutcome> = chosen
            .par_iter()
            .zip(&anns)
            .map(|(&i, ann)| -> Result<CubeOutcome> {
                let soup = if cfg.alpha == 0.0 {
                    Vec::new()
                } else {
                    match cfg.soup_mode {
                        SoupMode::Independent => sample_soup(&cube_soup_config(cfg, ann, cube_stream(i)))?
                            .loops
                            .into_iter()
                            .map(|l| l.trace)
                            .collect(),
                        SoupMode::Global => {
                            let reach = Aabb::from_points([&ann.cube.center, &ann.cube.center]).inflate(ann.r_out);
                            global
                                .iter()
                                .filter(|t| {
                                    let b = t.bbox();
                                    b.min.x >= reach.min.x
                                        && b.min.y >= reach.min.y
                                        && b.min.z >= reach.min.z
                                        && b.max.x <= reach.max.x
                                        && b.max.y <= reach.max.y
                                        && b.max.z <= reach.max.z
                                })
                                .cloned()
                                .collect()
                        }
                    }
                };
                Ok(analyse_cube(cfg, &l, replica, n, i, soup))
            })
            .collect::<Result<_>>()?;
        let scanned = outcomes.len() as u64;
        let lost = outcomes.iter().filter(|o| o.lost).count() as u64;
        let k_scanned = outcomes.iter().filter(|o| o.record.is_k).count() as u64;
        let f_scanned = outcomes.iter().filter(|o| o.record.is_f).count() as u64;
        let scale_up = if scanned == 0 {
            0.0
        } else {
            hit.len() as f64 / scanned as f64
        };
        counts.push(CutCountRow {
            replica,
            j: cfg.j,
            n,
            cubes_total: 1u64 << (3 * (n - 3)),
            cubes_hit: hit.len() as u64,
            cubes_scanned: scanned,
            cubes_lost: lost,
            k_scanned,
            f_scanned,
            k_count: k_scanned as f64 * scale_up,
            f_count: f_scanned as f64 * scale_up,
        });
        pairs.extend(pair_rows(replica, n, &outcomes, hit.len(), &anns));
        records.extend(outcomes.into_iter().map(|o| o.record));
    }
    Ok((counts, records, pairs, attempts))
}

fn pair_rows(replica: u64, n: u32, outcomes: &[CubeOutcome], hit: usize, anns: &[CubeAnnulus]) -> Vec<PairCountRow> {
    let s = outcomes.len();
    if s < 2 {
        return Vec::new();
    }
    let weight = (hit as f64 * (hit as f64 - 1.0)) / (s as f64 * (s as f64 - 1.0));
    let mut by_m: std::collections::BTreeMap<u32, u64> = Default::default();
    for a in 0..s {
        if !outcomes[a].record.is_k {
            continue;
        }
        for b in a + 1..s {
            if !outcomes[b].record.is_k {
                continue;
            }
            let d = anns[a].cube.center.dist(anns[b].cube.center);
            *by_m.entry(distance_bin(d)).or_default() += 1;
        }
    }
    by_m.into_iter()
        .map(|(m, c)| PairCountRow {
            replica,
            n,
            m,
            k_pairs_scanned: c,
            pair_weight: weight,
        })
        .collect()
}

/// `m` with `d` in `[2^{-m-1}, 2^{-m})`.
pub fn distance_bin(d: f64) -> u32 {
    (-d.log2()).floor().max(0.0) as u32
}

/// Number of unordered pairs of `n`-cubes in `D_0` per distance bin `m`.
pub fn cube_pairs_by_bin(n: u32) -> Vec<(u32, u64)> {
    let cells = 1i64 << (n - 3);
    let side = (-(n as f64)).exp2();
    let mut bins: std::collections::BTreeMap<u32, u64> = Default::default();
    for dx in 0..cells {
        for dy in 0..cells {
            for dz in 0..cells {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                // Offsets with nonzero components appear with both signs.
                let sym = [dx, dy, dz].iter().filter(|&&d| d != 0).count() as u32;
                let pairs = ((cells - dx) * (cells - dy) * (cells - dz)) as u64 * (1u64 << sym) / 2;
                let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt() * side;
                *bins.entry(distance_bin(d)).or_default() += pairs;
            }
        }
    }
    bins.into_iter().collect()
}

/// One shared soup: each chosen cube contributes loops of its radial law
/// whose root is nearer its centre than any other chosen centre.
fn global_soup(
    cfg: &CutScanConfig,
    anns: &[CubeAnnulus],
    chosen: &[[u32; 3]],
    cube_stream: &(dyn Fn([u32; 3]) -> RngStream + Sync),
) -> Result<Vec<SampledPath>> {
    let centres: Vec<Point3> = anns.iter().map(|a| a.cube.center).collect();
    let parts: Vec<Vec<SampledPath>> = anns
        .par_iter()
        .zip(chosen)
        .enumerate()
        .map(|(k, (ann, &i))| -> Result<Vec<SampledPath>> {
            let soup = sample_soup(&cube_soup_config(cfg, ann, cube_stream(i)))?;
            Ok(soup
                .loops
                .into_iter()
                .filter(|l| {
                    let own = l.root.dist2(centres[k]);
                    centres
                        .iter()
                        .enumerate()
                        .all(|(o, c)| o == k || (c.dist2(l.root), o) > (own, k))
                })
                .map(|l| l.trace)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Runs the scan over replicas `0..cfg.replicas`.
pub fn scan_cutboxes(cfg: &CutScanConfig) -> Result<CutScan> {
    scan_cutbox_range(cfg, 0..cfg.replicas)
}

pub fn scan_cutbox_range(cfg: &CutScanConfig, range: std::ops::Range<u64>) -> Result<CutScan> {
    cfg.validate()?;
    let per: Vec<_> = range
        .into_par_iter()
        .map(|rep| scan_replica(cfg, rep))
        .collect::<Result<_>>()?;
    let mut out = CutScan::default();
    for (c, r, p, a) in per {
        out.counts.extend(c);
        out.records.extend(r);
        out.pairs.extend(p);
        out.attempts.push(a);
    }
    Ok(out)
}

pub const DIMENSION_CAVEAT: &str = "single point estimate: the upper bound holds almost surely, the lower bound only with positive probability";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub dim_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fit: LinearFit,
    pub ns: Vec<u32>,
    pub mean_counts: Vec<f64>,
    /// Mean count at the largest `n` is zero.
    pub zero_at_largest: bool,
    pub caveat: String,
}

fn log2_slope(ns: &[u32], means: &[f64]) -> Option<LinearFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = ns
        .iter()
        .zip(means)
        .filter(|(_, &m)| m > 0.0)
        .map(|(&n, &m)| (n as f64, m.log2()))
        .unzip();
    linear_fit(&x, &y)
}

fn column_means(rows: &[&Vec<f64>], k: usize) -> Vec<f64> {
    (0..k)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64)
        .collect()
}

/// Slope of `log2 E|K_{j,n}|` against `n`, with a replica bootstrap
/// percentile interval. `counts[replica][i]` is the count at `ns[i]`.
pub fn dimension_estimate(counts: &[Vec<f64>], ns: &[u32], bootstrap: usize, seed: u64) -> Result<DimensionEstimate> {
    if ns.len() < 3 {
        return Err(Error::InsufficientData("need counts for at least three n".into()));
    }
    if counts.is_empty() || counts.iter().any(|c| c.len() != ns.len()) {
        return Err(invalid("counts", "one row per replica with one entry per n"));
    }
    let rows: Vec<&Vec<f64>> = counts.iter().collect();
    let means = column_means(&rows, ns.len());
    let fit = log2_slope(ns, &means).ok_or_else(|| Error::InsufficientData("fewer than two nonzero mean counts".into()))?;
    let mut rng = RngStream::new(seed, stream_id(&[TAG_CUT, u64::MAX])).rng();
    let mut slopes = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let idx = resample_indices(rows.len(), &mut rng);
        let pick: Vec<&Vec<f64>> = idx.iter().map(|&i| rows[i]).collect();
        if let Some(f) = log2_slope(ns, &column_means(&pick, ns.len())) {
            slopes.push(f.slope);
        }
    }
    let (ci_low, ci_high) = if slopes.is_empty() {
        (fit.slope, fit.slope)
    } else {
        percentile_interval(&mut slopes, 0.05)
    };
    Ok(DimensionEstimate {
        dim_hat: fit.slope,
        ci_low,
        ci_high,
        fit,
        ns: ns.to_vec(),
        zero_at_largest: *means.last().unwrap() == 0.0,
        mean_counts: means,
        caveat: DIMENSION_CAVEAT.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairBin {
    pub n: u32,
    pub m: u32,
    pub cube_pairs: u64,
    /// Estimated mean number of K-pairs per replica.
    pub k_pairs: f64,
    pub k_pairs_scanned: u64,
    pub frequency: f64,
    /// `2^{(-2n+m)(xi+1)}`.
    pub shape: f64,
    pub sparse: bool,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentReport {
    pub xi_hat: f64,
    pub fitted_constant: f64,
    pub band_tol: f64,
    pub bins: Vec<PairBin>,
    pub violations: usize,
    /// `-d log2 frequency / dn` at fixed `m`, from a joint fit in `(n, m)`.
    pub pair_exponent: Option<f64>,
}

/// Checks pair frequencies against `C 2^{(-2n+m)(xi+1)}`, with `C` the
/// geometric mean ratio over non-sparse bins; a bin violates when it exceeds
/// `band_tol C shape`. Bins need `j + 4 <= m <= n`.
pub fn second_moment_check(pairs: &[PairCountRow], replicas: u64, j: u32, xi_hat: f64, band_tol: f64, min_pairs: u64) -> SecondMomentReport {
    let mut acc: std::collections::BTreeMap<(u32, u32), (f64, u64)> = Default::default();
    for p in pairs {
        let e = acc.entry((p.n, p.m)).or_default();
        e.0 += p.k_pairs_scanned as f64 * p.pair_weight;
        e.1 += p.k_pairs_scanned;
    }
    let mut totals: std::collections::BTreeMap<u32, Vec<(u32, u64)>> = Default::default();
    let mut bins = Vec::new();
    for (&(n, m), &(w, raw)) in &acc {
        if m < j + 4 || m > n {
            continue;
        }
        let table = totals.entry(n).or_insert_with(|| cube_pairs_by_bin(n));
        let cube_pairs = table.iter().find(|(b, _)| *b == m).map_or(0, |x| x.1);
        if cube_pairs == 0 {
            continue;
        }
        let k_pairs = w / replicas.max(1) as f64;
        bins.push(PairBin {
            n,
            m,
            cube_pairs,
            k_pairs,
            k_pairs_scanned: raw,
            frequency: k_pairs / cube_pairs as f64,
            shape: ((-2.0 * n as f64 + m as f64) * (xi_hat + 1.0)).exp2(),
            sparse: raw < min_pairs,
            violation: false,
        });
    }
    let dense: Vec<&PairBin> = bins.iter().filter(|b| !b.sparse && b.frequency > 0.0).collect();
    let fitted_constant = if dense.is_empty() {
        f64::NAN
    } else {
        (dense.iter().map(|b| (b.frequency / b.shape).ln()).sum::<f64>() / dense.len() as f64).exp()
    };
    let pair_exponent = joint_pair_fit(&dense);
    let mut violations = 0;
    for b in bins.iter_mut() {
        if !b.sparse && fitted_constant.is_finite() && b.frequency > band_tol * fitted_constant * b.shape {
            b.violation = true;
            violations += 1;
        }
    }
    SecondMomentReport {
        xi_hat,
        fitted_constant,
        band_tol,
        bins,
        violations,
        pair_exponent,
    }
}

/// Least squares `log2 f = a + b n + c m`; returns `-b`.
fn joint_pair_fit(bins: &[&PairBin]) -> Option<f64> {
    if bins.len() < 3 {
        return None;
    }
    let rows: Vec<[f64; 4]> = bins
        .iter()
        .map(|b| [1.0, b.n as f64, b.m as f64, b.frequency.log2()])
        .collect();
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for r in &rows {
        for i in 0..3 {
            for k in 0..3 {
                ata[i][k] += r[i] * r[k];
            }
            atb[i] += r[i] * r[3];
        }
    }
    let sol = solve3(ata, atb)?;
    Some(-sol[1])
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for c in 0..3 {
        let p = (c..3).max_by(|&i, &k| a[i][c].abs().total_cmp(&a[k][c].abs()))?;
        if a[p][c].abs() < 1e-12 {
            return None;
        }
        a.swap(c, p);
        b.swap(c, p);
        for r in 0..3 {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in 0..3 {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some([b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_grid_round_trip() {
        for n in 7..10 {
            let c = n_cube(n, [0, 3, 5]);
            assert_eq!(cube_index(n, c.center), Some([0, 3, 5]));
        }
        assert_eq!(cube_index(8, Point3::new(0.2, 0.0, 0.0)), None);
    }

    #[test]
    fn pair_table_counts_all_pairs() {
        for n in 4..7u32 {
            let cells = 1u64 << (3 * (n - 3));
            let total: u64 = cube_pairs_by_bin(n).iter().map(|x| x.1).sum();
            assert_eq!(total, cells * (cells - 1) / 2);
        }
    }

    #[test]
    fn dyadic_refinement_is_consistent() {
        let l = DyadicLoop {
            root: Point3::new(0.25, 0.0, 0.0),
            duration: 1.0 / 16.0,
            key: 42,
            max_level: 20,
        };
        let coarse = l.trace(&|_, _, dt| dt > 1.0 / 16.0 / 64.0, 0.01, LocalScale::UNIT);
        let fine = l.trace(&|_, _, dt| dt > 1.0 / 16.0 / 1024.0, 0.01, LocalScale::UNIT);
        assert_eq!(coarse.len(), 65);
        assert_eq!(fine.len(), 1025);
        for (i, p) in coarse.points.iter().enumerate() {
            assert_eq!(*p, fine.points[16 * i]);
        }
        assert_eq!(*fine.points.last().unwrap(), l.root);
        let lp = l.level_points(10, &|_| true).unwrap();
        assert_eq!(lp, fine.points);
    }
}
