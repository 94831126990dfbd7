//! Brownian loop soup sampling via the rooted decomposition of the loop
//! measure.
//!
//! The rooted loop measure has density `dt/t * (2 pi t)^{-3/2}` in the
//! duration and Lebesgue density in the root. A soup of intensity `alpha` is
//! a Poisson process with that intensity; each loop is a Brownian bridge from
//! its root back to itself.
//!
//! Durations are truncated below at `t_min * s(root)^2`, where `s` is the
//! [`LocalScale`] of the soup, and above at the absolute `t_max`. Under a
//! radial scale the root distribution splits into a uniform inner ball and a
//! log-uniform shell, which makes the number of loops per unit log-radius
//! constant.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{Aabb, Ball, Cube, LocalScale, Point3};
use crate::path::{sample_bridge_steps, tol_hit, SampledPath};
use crate::rng::{RngStream, StreamRng};
use crate::stats::ks_two_sample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RootRegion {
    Cube(Cube),
    Ball(Ball),
}

impl RootRegion {
    pub fn volume(&self) -> f64 {
        match self {
            RootRegion::Cube(c) => c.volume(),
            RootRegion::Ball(b) => b.volume(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupConfig {
    pub alpha: f64,
    pub root_region: RootRegion,
    /// Lower duration cutoff at unit local scale.
    pub t_min: f64,
    /// Absolute upper duration cutoff.
    pub t_max: f64,
    pub scale: LocalScale,
    /// Loops must stay inside this ball.
    pub containment: Option<Ball>,
    /// Loops staying inside this ball are discarded.
    pub exclusion: Option<Ball>,
    /// Bridge time step in local units.
    pub delta: f64,
    /// Lower bound on the number of bridge steps per loop.
    pub min_loop_steps: usize,
    pub stream: RngStream,
}

impl SoupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        // t_min is in local units, so t_min >= t_max only empties the
        // coarse part of the soup.
        if !(self.t_min > 0.0 && self.t_max > 0.0) {
            return Err(invalid(
                "t_min/t_max",
                format!("need t_min, t_max > 0, got {} and {}", self.t_min, self.t_max),
            ));
        }
        if !(self.delta > 0.0) {
            return Err(invalid("delta", "must be > 0"));
        }
        if let (LocalScale::Radial { center, .. }, region) = (self.scale, self.root_region) {
            match region {
                RootRegion::Ball(b) if b.center == center => {}
                _ => {
                    return Err(invalid(
                        "root_region",
                        "a radial local scale needs a ball root region sharing its center",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Whether a trace passes the containment and exclusion filters.
    pub fn accepts(&self, trace: &SampledPath) -> bool {
        let tol = tol_hit(self.delta);
        if let Some(c) = self.containment {
            if !contained_in(trace, &c, tol, &self.scale) {
                return false;
            }
        }
        if let Some(e) = self.exclusion {
            if contained_in(trace, &e, tol, &self.scale) {
                return false;
            }
        }
        true
    }
}

/// Closed-ball containment of the trace inflated by `tol * s(x)`.
pub fn contained_in(trace: &SampledPath, ball: &Ball, tol: f64, scale: &LocalScale) -> bool {
    trace
        .points
        .iter()
        .all(|p| p.dist(ball.center) + tol * scale.at(*p) <= ball.radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianLoop {
    pub root: Point3,
    pub duration: f64,
    /// Closed trace: first and last points equal `root`.
    pub trace: SampledPath,
    pub bbox: Aabb,
    /// Uniform mark in (0,1) used for thinning couplings.
    pub mark: f64,
}

impl BrownianLoop {
    /// Largest distance of the trace from `c`.
    pub fn max_distance_from(&self, c: Point3) -> f64 {
        self.trace.points.iter().map(|p| p.dist(c)).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSoup {
    pub loops: Vec<BrownianLoop>,
    pub config: SoupConfig,
    /// Number of rooted loops drawn before the geometric filters.
    pub raw_count: u64,
}

impl LoopSoup {
    pub fn empty(config: SoupConfig) -> Self {
        Self {
            loops: Vec::new(),
            config,
            raw_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.loops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loops.is_empty()
    }

    /// The sub-soup at intensity `alpha <= config.alpha`, keeping loops
    /// with `mark < alpha / config.alpha`.
    pub fn thinned(&self, alpha: f64) -> LoopSoup {
        let keep = thinning_threshold(alpha, self.config.alpha);
        let mut config = self.config.clone();
        config.alpha = alpha;
        LoopSoup {
            loops: self.loops.iter().filter(|l| l.mark < keep).cloned().collect(),
            config,
            raw_count: self.raw_count,
        }
    }

    /// Re-applies the config filters.
    pub fn filtered(&self) -> LoopSoup {
        LoopSoup {
            loops: self
                .loops
                .iter()
                .filter(|l| self.config.accepts(&l.trace))
                .cloned()
                .collect(),
            config: self.config.clone(),
            raw_count: self.raw_count,
        }
    }
}

/// Mark threshold realising intensity `alpha` from a soup sampled at
/// `alpha_max`.
pub fn thinning_threshold(alpha: f64, alpha_max: f64) -> f64 {
    if alpha_max <= 0.0 {
        0.0
    } else {
        (alpha / alpha_max).clamp(0.0, 1.0)
    }
}

const KERNEL_NORM: f64 = 0.063_493_635_934_240_97; // (2 pi)^{-3/2}

/// Expected number of rooted loops with root in a region of the given
/// volume and duration in `[t_min, t_max]`:
/// `alpha * volume * (2 pi)^{-3/2} * (2/3) * (t_min^{-3/2} - t_max^{-3/2})`.
pub fn rooted_mass(alpha: f64, volume: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if !(t_min > 0.0 && t_min < t_max) {
        return Err(invalid(
            "t_min/t_max",
            format!("need 0 < t_min < t_max, got {t_min} and {t_max}"),
        ));
    }
    Ok(alpha * volume * KERNEL_NORM * (2.0 / 3.0) * (t_min.powf(-1.5) - t_max.powf(-1.5)))
}

/// Inverse CDF of the duration law with density proportional to `t^{-5/2}`
/// on `[t_min, t_max]` (`t_max` may be infinite).
pub fn duration_inverse_cdf(u: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(invalid("u", format!("must lie in (0,1), got {u}")));
    }
    if !(t_min > 0.0 && t_min < t_max) {
        return Err(invalid("t_min/t_max", "need 0 < t_min < t_max"));
    }
    let a = t_min.powf(-1.5);
    let b = if t_max.is_finite() { t_max.powf(-1.5) } else { 0.0 };
    Ok((a - u * (a - b)).powf(-2.0 / 3.0))
}

/// CDF matching [`duration_inverse_cdf`].
pub fn duration_cdf(t: f64, t_min: f64, t_max: f64) -> f64 {
    if t <= t_min {
        return 0.0;
    }
    if t >= t_max {
        return 1.0;
    }
    let a = t_min.powf(-1.5);
    let b = if t_max.is_finite() { t_max.powf(-1.5) } else { 0.0 };
    (a - t.powf(-1.5)) / (a - b)
}

/// Pieces of the root distribution used by the sampler.
#[derive(Debug, Clone, Copy)]
enum Component {
    /// Uniform roots in a cube or ball with fixed cutoffs.
    Uniform { region: RootRegion, t_lo: f64 },
    /// Log-uniform radius in `[r_lo, r_hi]` around `center`; durations from
    /// `t_min * rho^2` upward, thinned at `t_max` afterwards.
    Shell { center: Point3, r_lo: f64, r_hi: f64 },
}

fn components(cfg: &SoupConfig) -> Vec<(Component, f64)> {
    let kn = cfg.alpha * KERNEL_NORM * (2.0 / 3.0);
    match (cfg.scale, cfg.root_region) {
        (LocalScale::Uniform { length }, region) => {
            let t_lo = cfg.t_min * length * length;
            if t_lo >= cfg.t_max {
                return vec![];
            }
            let m = kn * region.volume() * (t_lo.powf(-1.5) - cfg.t_max.powf(-1.5));
            vec![(Component::Uniform { region, t_lo }, m)]
        }
        (LocalScale::Radial { center, floor }, RootRegion::Ball(b)) => {
            let mut out = Vec::new();
            let inner = Ball::new(center, floor.min(b.radius));
            let t_lo = cfg.t_min * floor * floor;
            if t_lo < cfg.t_max {
                let m = kn * inner.volume() * (t_lo.powf(-1.5) - cfg.t_max.powf(-1.5));
                out.push((
                    Component::Uniform {
                        region: RootRegion::Ball(inner),
                        t_lo,
                    },
                    m,
                ));
            }
            let r_hi = b.radius.min((cfg.t_max / cfg.t_min).sqrt());
            if r_hi > floor {
                let m = kn * 4.0 * PI * cfg.t_min.powf(-1.5) * (r_hi / floor).ln();
                out.push((
                    Component::Shell {
                        center,
                        r_lo: floor,
                        r_hi,
                    },
                    m,
                ));
            }
            out
        }
        (LocalScale::Radial { .. }, RootRegion::Cube(_)) => vec![],
    }
}

/// Expected `raw_count`: the mass of the truncated rooted measure over the
/// root region.
pub fn expected_raw_count(cfg: &SoupConfig) -> f64 {
    let kn = cfg.alpha * KERNEL_NORM * (2.0 / 3.0);
    components(cfg)
        .into_iter()
        .map(|(c, m)| match c {
            Component::Uniform { .. } => m,
            Component::Shell { r_lo, r_hi, .. } => {
                m - kn * 4.0 * PI * cfg.t_max.powf(-1.5) * (r_hi.powi(3) - r_lo.powi(3)) / 3.0
            }
        })
        .sum()
}

fn uniform_root(region: &RootRegion, rng: &mut StreamRng) -> Point3 {
    match region {
        RootRegion::Cube(c) => {
            let h = c.half_side;
            c.center
                + Point3::new(
                    (2.0 * rng.open01() - 1.0) * h,
                    (2.0 * rng.open01() - 1.0) * h,
                    (2.0 * rng.open01() - 1.0) * h,
                )
        }
        RootRegion::Ball(b) => rng.in_ball(b.center, b.radius),
    }
}

/// One rooted loop drawn from the truncated measure, before filtering;
/// `None` when the duration falls above `t_max`.
fn draw_loop(cfg: &SoupConfig, comps: &[(Component, f64)], total: f64, rng: &mut StreamRng) -> Option<BrownianLoop> {
    let mut pick = rng.open01() * total;
    let mut comp = comps[comps.len() - 1].0;
    for (c, m) in comps {
        if pick < *m {
            comp = *c;
            break;
        }
        pick -= m;
    }
    let (root, duration) = match comp {
        Component::Uniform { region, t_lo } => {
            let root = uniform_root(&region, rng);
            let t = duration_inverse_cdf(rng.open01(), t_lo, cfg.t_max).expect("valid cutoffs");
            (root, t)
        }
        Component::Shell { center, r_lo, r_hi } => {
            let rho = r_lo * (rng.open01() * (r_hi / r_lo).ln()).exp();
            let root = center + rng.unit_vector() * rho;
            let t = duration_inverse_cdf(rng.open01(), cfg.t_min * rho * rho, f64::INFINITY)
                .expect("valid cutoffs");
            (root, t)
        }
    };
    let mark = rng.open01();
    if duration > cfg.t_max {
        return None;
    }
    let s = cfg.scale.at(root);
    let dt = cfg.delta * s * s;
    let steps = ((duration / dt).ceil() as usize).max(cfg.min_loop_steps).max(1);
    let mut trace = sample_bridge_steps(root, root, duration, steps, rng);
    trace.resolution = cfg.delta;
    trace.scale = cfg.scale;
    let bbox = trace.bbox();
    Some(BrownianLoop {
        root,
        duration,
        trace,
        bbox,
        mark,
    })
}

/// Samples a soup: Poisson number of rooted loops, each traced as a bridge,
/// then filtered by containment and exclusion.
pub fn sample_soup(cfg: &SoupConfig) -> Result<LoopSoup> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return Ok(LoopSoup::empty(cfg.clone()));
    }
    let comps = components(cfg);
    let total: f64 = comps.iter().map(|(_, m)| m).sum();
    if !(total > 0.0) {
        return Ok(LoopSoup::empty(cfg.clone()));
    }
    let mut rng = cfg.stream.rng();
    let n = Poisson::new(total)
        .map_err(|e| invalid("loop mass", e.to_string()))?
        .sample(rng.inner()) as u64;
    let mut loops = Vec::new();
    let mut raw = 0u64;
    for _ in 0..n {
        let Some(l) = draw_loop(cfg, &comps, total, &mut rng) else {
            continue;
        };
        raw += 1;
        if cfg.accepts(&l.trace) {
            loops.push(l);
        }
    }
    Ok(LoopSoup {
        loops,
        config: cfg.clone(),
        raw_count: raw,
    })
}

/// Exact diameter of a point set (quadratic).
pub fn point_set_diameter(points: &[Point3]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.max(points[i].dist2(points[j]));
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub scale_factor: f64,
    pub mean_count_base: f64,
    pub mean_count_scaled: f64,
    /// Count difference in combined standard errors.
    pub count_z: f64,
    pub diameter_ks: f64,
    pub diameter_p: f64,
    pub passed: bool,
}

/// The soup config with window, cutoffs and resolution scaled by `lambda`
/// (lengths by `lambda`, times by `lambda^2`).
pub fn scaled_config(cfg: &SoupConfig, lambda: f64) -> SoupConfig {
    let mut c = cfg.clone();
    let sp = |p: Point3| p * lambda;
    c.root_region = match cfg.root_region {
        RootRegion::Cube(k) => RootRegion::Cube(Cube {
            center: sp(k.center),
            half_side: k.half_side * lambda,
        }),
        RootRegion::Ball(b) => RootRegion::Ball(Ball::new(sp(b.center), b.radius * lambda)),
    };
    c.containment = cfg.containment.map(|b| Ball::new(sp(b.center), b.radius * lambda));
    c.exclusion = cfg.exclusion.map(|b| Ball::new(sp(b.center), b.radius * lambda));
    c.scale = match cfg.scale {
        LocalScale::Uniform { length } => LocalScale::Uniform {
            length: length * lambda,
        },
        LocalScale::Radial { center, floor } => LocalScale::Radial {
            center: sp(center),
            floor: floor * lambda,
        },
    };
    c.t_max = cfg.t_max * lambda * lambda;
    c
}

/// Compares loop counts and rescaled loop diameters of soups sampled at
/// scale 1 and at scale `lambda` over `replicas` independent streams.
pub fn scaling_check(cfg: &SoupConfig, lambda: f64, replicas: u64) -> Result<ScalingReport> {
    let scaled = scaled_config(cfg, lambda);
    let mut counts = [Vec::new(), Vec::new()];
    let mut diam = [Vec::new(), Vec::new()];
    for rep in 0..replicas {
        for (k, (c, f)) in [(cfg, 1.0), (&scaled, lambda)].into_iter().enumerate() {
            let mut c = c.clone();
            c.stream = cfg.stream.child(&[k as u64, rep]);
            let soup = sample_soup(&c)?;
            counts[k].push(soup.len() as f64);
            diam[k].extend(soup.loops.iter().map(|l| point_set_diameter(&l.trace.points) / f));
        }
    }
    let m0 = crate::stats::mean(&counts[0]);
    let m1 = crate::stats::mean(&counts[1]);
    let se = (crate::stats::stderr_of_mean(&counts[0]).powi(2)
        + crate::stats::stderr_of_mean(&counts[1]).powi(2))
    .sqrt();
    let count_z = if se > 0.0 { (m0 - m1).abs() / se } else { 0.0 };
    let (d, p) = ks_two_sample(&diam[0], &diam[1]);
    Ok(ScalingReport {
        scale_factor: lambda,
        mean_count_base: m0,
        mean_count_scaled: m1,
        count_z,
        diameter_ks: d,
        diameter_p: p,
        passed: count_z <= 3.0 && p > 0.01,
    })
}

const SOUP_MAGIC: &[u8; 8] = b"BLSOUP\0\0";
pub const SOUP_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SoupHeader {
    format_version: u32,
    config: SoupConfig,
    raw_count: u64,
    loop_count: u64,
}

/// Writes a soup as magic, version, a JSON header, then little-endian binary
/// loop records `(root, duration, mark, n, n x (t, x, y, z))`.
pub fn write_soup(soup: &LoopSoup, mut w: impl Write) -> std::io::Result<()> {
    let header = serde_json::to_vec(&SoupHeader {
        format_version: SOUP_FORMAT_VERSION,
        config: soup.config.clone(),
        raw_count: soup.raw_count,
        loop_count: soup.loops.len() as u64,
    })?;
    w.write_all(SOUP_MAGIC)?;
    w.write_all(&SOUP_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for l in &soup.loops {
        for v in l.root.to_array() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&l.duration.to_le_bytes())?;
        w.write_all(&l.mark.to_le_bytes())?;
        w.write_all(&(l.trace.len() as u64).to_le_bytes())?;
        for (t, p) in l.trace.times.iter().zip(&l.trace.points) {
            w.write_all(&t.to_le_bytes())?;
            for v in p.to_array() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_soup(mut r: impl Read) -> Result<LoopSoup> {
    let io = |e: std::io::Error| Error::InsufficientData(format!("soup stream: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != SOUP_MAGIC {
        return Err(Error::InsufficientData("not a soup file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != SOUP_FORMAT_VERSION {
        return Err(Error::InsufficientData(format!("unsupported soup format version {version}")));
    }
    r.read_exact(&mut b8).map_err(io)?;
    let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: SoupHeader =
        serde_json::from_slice(&header).map_err(|e| Error::InsufficientData(e.to_string()))?;
    let f = |r: &mut dyn Read| -> Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        Ok(f64::from_le_bytes(b))
    };
    let mut loops = Vec::with_capacity(header.loop_count as usize);
    for _ in 0..header.loop_count {
        let root = Point3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?);
        let duration = f(&mut r)?;
        let mark = f(&mut r)?;
        r.read_exact(&mut b8).map_err(io)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut times = Vec::with_capacity(n);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            times.push(f(&mut r)?);
            points.push(Point3::new(f(&mut r)?, f(&mut r)?, f(&mut r)?));
        }
        let trace = SampledPath {
            times,
            points,
            resolution: header.config.delta,
            scale: header.config.scale,
        };
        let bbox = trace.bbox();
        loops.push(BrownianLoop {
            root,
            duration,
            trace,
            bbox,
            mark,
        });
    }
    Ok(LoopSoup {
        loops,
        config: header.config,
        raw_count: header.raw_count,
    })
}
