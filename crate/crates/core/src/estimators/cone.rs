//! Decay in `eps` of the probability that a path, or the clusters meeting a
//! cone-shaped neighbourhood, stay confined to a slightly larger one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterIndex;
use crate::error::{invalid, Result};
use crate::geometry::{Ball, Cone, LocalScale, Point3};
use crate::path::{sample_bm_confined, StopReason, WalkOptions};
use crate::rng::{stream_id, RngStream, StreamRng};
use crate::soup::{sample_soup, RootRegion, SoupConfig};
use crate::spatial::Tolerance;
use crate::stats::{weighted_linear_fit, LinearFit};

const TAG_CONE: u64 = 0x636f_6e65;
const U: Point3 = Point3::new(1.0, 0.0, 0.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeDecayConfig {
    pub eps_grid: Vec<f64>,
    /// Chord aperture of the inner cone `u + A_inner` (defines `V^-`).
    pub inner_aperture: f64,
    /// Chord aperture of the outer cone `u + A_outer` (defines `V`).
    pub outer_aperture: f64,
    pub samples: u64,
    pub alpha: f64,
    /// Soup replicas per eps for the cluster event.
    pub soups: u64,
    pub delta: f64,
    pub h: f64,
    pub t_min: f64,
    pub min_loop_steps: usize,
    pub walk_budget: f64,
    pub seed: u64,
}

impl ConeDecayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_grid.is_empty() || self.eps_grid.iter().any(|&e| !(e > 0.0 && e < 0.5 + 1e-12)) {
            return Err(invalid("eps_grid", "values must lie in (0, 1/2]"));
        }
        if !(self.inner_aperture > 0.0 && self.inner_aperture <= self.outer_aperture && self.outer_aperture < 2.0) {
            return Err(invalid("apertures", "need 0 < inner <= outer < 2"));
        }
        if self.samples == 0 {
            return Err(invalid("samples", "must be >= 1"));
        }
        Ok(())
    }
}

/// `((u + A_aperture) ∪ B_radius(u)) ∩ B_e`.
#[derive(Debug, Clone, Copy)]
pub struct ConeRegion {
    pub cone: Cone,
    pub radius: f64,
}

impl ConeRegion {
    pub fn new(aperture: f64, radius: f64) -> Result<Self> {
        Ok(Self {
            cone: Cone::new(U, aperture)?,
            radius,
        })
    }

    pub fn contains(&self, x: Point3) -> bool {
        if x.norm() > std::f64::consts::E * (1.0 + 1e-12) {
            return false;
        }
        let y = x - U;
        y.norm() <= self.radius || self.cone.contains(y).unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeDecayRow {
    pub eps: f64,
    pub path_trials: u64,
    pub path_successes: u64,
    pub path_probability: f64,
    pub cluster_trials: u64,
    pub cluster_successes: u64,
    pub cluster_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeDecayReport {
    pub rows: Vec<ConeDecayRow>,
    /// `log p = log c1 + c2 log eps` over the nonzero path cells.
    pub path_fit: Option<LinearFit>,
    pub cluster_fit: Option<LinearFit>,
    /// Eps values whose path cell had no successes.
    pub zero_path_cells: Vec<f64>,
    pub zero_cluster_cells: Vec<f64>,
    pub budget_failures: u64,
}

impl ConeDecayReport {
    pub fn path_c1_c2(&self) -> Option<(f64, f64)> {
        self.path_fit.map(|f| (f.intercept.exp(), f.slope))
    }

    pub fn cluster_c1_c2(&self) -> Option<(f64, f64)> {
        self.cluster_fit.map(|f| (f.intercept.exp(), f.slope))
    }
}

/// Uniform point of `S_0` within chord distance `rho` of `u`.
fn cap_point(rho: f64, rng: &mut StreamRng) -> Point3 {
    let c0 = 1.0 - rho * rho / 2.0;
    let c = c0 + (1.0 - c0) * rng.open01();
    let s = (1.0 - c * c).max(0.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * rng.open01();
    Point3::new(c, s * phi.cos(), s * phi.sin())
}

/// One path trial: `Some(true)` if `B[0, T_1]` stays in `V^-`, `None` on
/// budget exhaustion.
fn path_trial(cfg: &ConeDecayConfig, eps: f64, stream: RngStream) -> Result<Option<bool>> {
    let v_minus = ConeRegion::new(cfg.inner_aperture, eps / 2.0)?;
    let mut rng = stream.rng();
    let x = cap_point(eps / 4.0, &mut rng);
    let opts = WalkOptions::new(
        cfg.delta,
        LocalScale::Radial {
            center: U,
            floor: eps / 8.0,
        },
        cfg.walk_budget,
    );
    let sp = sample_bm_confined(x, 1.0, &opts, &mut rng, &|p| v_minus.contains(p))?;
    Ok(match sp.stop_reason {
        StopReason::HitSphere { .. } => Some(true),
        StopReason::LeftRegion => Some(false),
        _ => None,
    })
}

/// One soup trial: every cluster with a trace point in `V^-` lies in `V`.
fn cluster_trial(cfg: &ConeDecayConfig, eps: f64, stream: RngStream) -> Result<bool> {
    if cfg.alpha == 0.0 {
        return Ok(true);
    }
    let v_minus = ConeRegion::new(cfg.inner_aperture, eps / 2.0)?;
    let v = ConeRegion::new(cfg.outer_aperture, eps)?;
    let scale = LocalScale::Radial {
        center: U,
        floor: eps / 8.0,
    };
    let soup = sample_soup(&SoupConfig {
        alpha: cfg.alpha,
        root_region: RootRegion::Ball(Ball::new(U, 4.0)),
        t_min: cfg.t_min,
        t_max: 16.0,
        scale,
        containment: None,
        exclusion: None,
        delta: cfg.delta,
        min_loop_steps: cfg.min_loop_steps,
        stream,
    })?;
    let idx = ClusterIndex::build(&soup, Tolerance::new(cfg.h, scale));
    Ok(idx.clusters().iter().all(|(_, members)| {
        let meets = members
            .iter()
            .any(|&m| idx.trace(m as usize).points.iter().any(|&p| v_minus.contains(p)));
        !meets
            || members
                .iter()
                .all(|&m| idx.trace(m as usize).points.iter().all(|&p| v.contains(p)))
    }))
}

fn log_fit(rows: &[(f64, u64, u64)]) -> Option<LinearFit> {
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter(|(_, s, n)| *s > 0 && *n > 0)
        .map(|&(e, s, n)| {
            let p = s as f64 / n as f64;
            // Delta-method weight: var(log p) ~ (1 - p) / (n p).
            let var = ((1.0 - p) / (n as f64 * p)).max(1e-12);
            (e.ln(), p.ln(), 1.0 / var)
        })
        .collect();
    let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let w: Vec<f64> = pts.iter().map(|p| p.2).collect();
    weighted_linear_fit(&x, &y, &w)
}

pub fn cone_confinement_decay(cfg: &ConeDecayConfig) -> Result<ConeDecayReport> {
    cfg.validate()?;
    let base = RngStream::new(cfg.seed, stream_id(&[TAG_CONE]));
    let mut rows = Vec::new();
    let mut budget_failures = 0;
    for (ei, &eps) in cfg.eps_grid.iter().enumerate() {
        let paths: Vec<Option<bool>> = (0..cfg.samples)
            .into_par_iter()
            .map(|s| path_trial(cfg, eps, base.child(&[1, ei as u64, s])))
            .collect::<Result<_>>()?;
        let clusters: Vec<bool> = (0..cfg.soups)
            .into_par_iter()
            .map(|s| cluster_trial(cfg, eps, base.child(&[2, ei as u64, s])))
            .collect::<Result<_>>()?;
        let done: Vec<bool> = paths.iter().flatten().copied().collect();
        budget_failures += (paths.len() - done.len()) as u64;
        let ps = done.iter().filter(|&&b| b).count() as u64;
        let cs = clusters.iter().filter(|&&b| b).count() as u64;
        rows.push(ConeDecayRow {
            eps,
            path_trials: done.len() as u64,
            path_successes: ps,
            path_probability: ps as f64 / done.len().max(1) as f64,
            cluster_trials: cfg.soups,
            cluster_successes: cs,
            cluster_probability: if cfg.soups == 0 {
                f64::NAN
            } else {
                cs as f64 / cfg.soups as f64
            },
        });
    }
    let path_rows: Vec<(f64, u64, u64)> = rows
        .iter()
        .map(|r| (r.eps, r.path_successes, r.path_trials))
        .collect();
    let cluster_rows: Vec<(f64, u64, u64)> = rows
        .iter()
        .map(|r| (r.eps, r.cluster_successes, r.cluster_trials))
        .collect();
    Ok(ConeDecayReport {
        path_fit: log_fit(&path_rows),
        cluster_fit: log_fit(&cluster_rows),
        zero_path_cells: rows
            .iter()
            .filter(|r| r.path_successes == 0)
            .map(|r| r.eps)
            .collect(),
        zero_cluster_cells: rows
            .iter()
            .filter(|r| r.cluster_trials > 0 && r.cluster_successes == 0)
            .map(|r| r.eps)
            .collect(),
        rows,
        budget_failures,
    })
}
