//! Estimators of the generalized non-intersection probability
//! `p(alpha, k, r, lambda) = E[Z_r^lambda]`.
//!
//! `Z_r` is the conditional probability, given `k` obstacle paths from `S_0`
//! to `S_r` and the soup `L_r \ L_0`, that an independent path from `S_0` to
//! `S_r` avoids the obstacles enlarged by the clusters they meet. The direct
//! estimator averages `Zhat^lambda` over outer replicas, with `Zhat` the
//! fraction of inner paths that avoid.
//!
//! One replica serves every `(alpha, k, r)` at once: the soup is sampled at
//! the largest `alpha` and thinned by loop marks, obstacle and inner paths are
//! stopped at every grid sphere in turn, and the first `k` obstacles are used
//! for `k`. Each of these couplings can only shrink the avoidance event, so
//! `Zhat` is monotone replica by replica.

mod cone;
mod engine;
mod separation;
mod splitting;

pub use cone::{cone_confinement_decay, ConeDecayConfig, ConeDecayReport, ConeDecayRow, ConeRegion};
pub use engine::{estimate_z, run_coupled, sample_environment, CoupledReplica, Environment};
pub use separation::{separation_stats, SeparationConfig, SeparationRow, SeparationStats};
pub use splitting::{estimate_p_splitting, SplittingConfig, SplittingResult};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Ball, LocalScale, Point3};
use crate::path::WalkOptions;
use crate::rng::{stream_id, RngStream};
use crate::soup::{RootRegion, SoupConfig};
use crate::spatial::Tolerance;
use crate::stats::Moments;

pub const TAG_REPLICA: u64 = 0x7265_706c;
pub(crate) const TAG_OBSTACLE: u64 = 1;
pub(crate) const TAG_SOUP: u64 = 2;
pub(crate) const TAG_INNER: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Intensities, coupled by thinning.
    pub alphas: Vec<f64>,
    /// Numbers of obstacle paths, coupled by adding paths.
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Increasing log-radii.
    pub r_grid: Vec<f64>,
    pub outer_n: u64,
    pub inner_m: usize,
    /// Time step in local units.
    pub delta: f64,
    /// Contact tolerance in local units.
    pub h: f64,
    /// Loop duration cutoff in local units.
    pub t_min: f64,
    pub min_loop_steps: usize,
    /// Local-time budget per path.
    pub walk_budget: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(invalid("alphas", "need at least one finite alpha >= 0"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("ks", "need at least one k >= 1"));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(invalid("lambdas", "need at least one finite lambda > 0"));
        }
        if self.r_grid.is_empty()
            || self.r_grid[0] < 0.0
            || self.r_grid.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(invalid("r_grid", "must be non-empty, >= 0 and strictly increasing"));
        }
        if self.outer_n == 0 {
            return Err(invalid("outer_n", "must be >= 1"));
        }
        if self.inner_m == 0 {
            return Err(invalid("inner_m", "must be >= 1"));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("h", self.h),
            ("t_min", self.t_min),
            ("walk_budget", self.walk_budget),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn alpha_max(&self) -> f64 {
        self.alphas.iter().copied().fold(0.0, f64::max)
    }

    pub fn k_max(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }

    pub fn r_max(&self) -> f64 {
        *self.r_grid.last().expect("validated grid")
    }

    /// Whether some lambda needs the two-batch bias correction.
    pub fn extrapolating(&self) -> bool {
        self.lambdas.iter().any(|&l| l != 1.0)
    }

    /// Inner paths per replica: `inner_m`, or two batches of `inner_m`.
    pub fn inner_paths(&self) -> usize {
        if self.extrapolating() {
            2 * self.inner_m
        } else {
            self.inner_m
        }
    }

    pub fn scale(&self) -> LocalScale {
        LocalScale::origin()
    }

    pub fn tolerance(&self) -> Tolerance {
        Tolerance::new(self.h, self.scale())
    }

    pub fn walk_options(&self) -> WalkOptions {
        WalkOptions::new(self.delta, self.scale(), self.walk_budget)
    }

    pub fn replica_stream(&self, replica: u64) -> RngStream {
        RngStream::new(self.seed, stream_id(&[TAG_REPLICA, replica]))
    }

    /// Soup `L_{r_max} \ L_0` at the largest alpha.
    pub fn soup_config(&self, stream: RngStream) -> SoupConfig {
        let big = self.r_max().exp();
        SoupConfig {
            alpha: self.alpha_max(),
            root_region: RootRegion::Ball(Ball::new(Point3::ORIGIN, big)),
            t_min: self.t_min,
            t_max: (4.0 * big).powi(2),
            scale: self.scale(),
            containment: Some(Ball::centered(big)),
            exclusion: Some(Ball::centered(1.0)),
            delta: self.delta,
            min_loop_steps: self.min_loop_steps,
            stream,
        }
    }

    /// Index of cell `(alpha, k, r)` in replica count vectors.
    pub fn cell(&self, a: usize, k: usize, r: usize) -> usize {
        (a * self.ks.len() + k) * self.r_grid.len() + r
    }

    fn cell_count(&self) -> usize {
        self.alphas.len() * self.ks.len() * self.r_grid.len()
    }
}

/// Avoidance counts of one replica, per `(alpha, k, r)` cell and inner batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica: u64,
    /// Some path ran out of its walk budget; the replica is excluded.
    pub failed: bool,
    pub loops: u64,
    pub path_steps: u64,
    /// `[first batch, second batch]` avoidance counts per cell, cells in
    /// `(alpha, k, r)` row-major order.
    pub counts: Vec<[u32; 2]>,
}

impl ReplicaRecord {
    pub fn from_coupled(cfg: &ExperimentConfig, c: &CoupledReplica) -> Self {
        let m = cfg.inner_m;
        let mut counts = vec![[0u32; 2]; cfg.cell_count()];
        if !c.failed {
            for a in 0..cfg.alphas.len() {
                for k in 0..cfg.ks.len() {
                    for r in 0..cfg.r_grid.len() {
                        let cell = cfg.cell(a, k, r);
                        for i in 0..c.inner.len() {
                            if c.avoids(i, cell) {
                                counts[cell][(i >= m) as usize] += 1;
                            }
                        }
                    }
                }
            }
        }
        Self {
            replica: c.replica,
            failed: c.failed,
            loops: c.loop_count as u64,
            path_steps: c.path_steps,
            counts,
        }
    }
}

/// Runs replica `replica` of the coupled design.
pub fn run_replica(cfg: &ExperimentConfig, replica: u64) -> Result<ReplicaRecord> {
    let c = run_coupled(cfg, replica)?;
    Ok(ReplicaRecord::from_coupled(cfg, &c))
}

/// Runs replicas `range` in parallel; output is in replica order.
pub fn run_replicas(cfg: &ExperimentConfig, range: std::ops::Range<u64>) -> Result<Vec<ReplicaRecord>> {
    cfg.validate()?;
    range
        .into_par_iter()
        .map(|rep| run_replica(cfg, rep))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub alpha: f64,
    pub k: usize,
    pub lambda: f64,
    pub r: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub outer_n: u64,
    pub inner_m: usize,
    pub delta: f64,
    pub h: f64,
    pub seed: u64,
    pub estimator: String,
    pub extrapolated: bool,
    /// Plain mean of `Zhat^lambda` over replicas, before bias correction.
    pub raw_p_hat: f64,
    pub raw_stderr: f64,
    /// Replicas with `Zhat > 0`.
    pub avoiding_replicas: u64,
    pub budget_failures: u64,
    /// Per-replica values whose mean is `p_hat`, in replica order.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateSeries {
    pub records: Vec<EstimateRecord>,
}

impl EstimateSeries {
    /// Records for one `(alpha, k, lambda)`, sorted by `r`.
    pub fn select(&self, alpha: f64, k: usize, lambda: f64) -> Vec<&EstimateRecord> {
        let mut v: Vec<&EstimateRecord> = self
            .records
            .iter()
            .filter(|r| r.alpha == alpha && r.k == k && r.lambda == lambda)
            .collect();
        v.sort_by(|a, b| a.r.total_cmp(&b.r));
        v
    }

    pub fn at(&self, alpha: f64, k: usize, lambda: f64, r: f64) -> Option<&EstimateRecord> {
        self.records
            .iter()
            .find(|x| x.alpha == alpha && x.k == k && x.lambda == lambda && x.r == r)
    }

    /// Builds the series from replica records (any order; duplicates are
    /// the caller's responsibility).
    pub fn from_records(cfg: &ExperimentConfig, records: &[ReplicaRecord]) -> Self {
        let mut recs: Vec<&ReplicaRecord> = records.iter().collect();
        recs.sort_by_key(|r| r.replica);
        let ok: Vec<&ReplicaRecord> = recs.iter().copied().filter(|r| !r.failed).collect();
        let failures = (recs.len() - ok.len()) as u64;
        let m = cfg.inner_m as f64;
        let ex = cfg.extrapolating();
        let mut out = Vec::new();
        for (ai, &alpha) in cfg.alphas.iter().enumerate() {
            for (ki, &k) in cfg.ks.iter().enumerate() {
                for (ri, &r) in cfg.r_grid.iter().enumerate() {
                    let cell = cfg.cell(ai, ki, ri);
                    for &lambda in &cfg.lambdas {
                        let mut raw = Moments::default();
                        let mut val = Moments::default();
                        let mut samples = Vec::with_capacity(ok.len());
                        let mut avoiding = 0;
                        for rec in &ok {
                            let [c1, c2] = rec.counts[cell];
                            let total = if ex { 2.0 * m } else { m };
                            let z = (c1 + c2) as f64 / total;
                            avoiding += (c1 + c2 > 0) as u64;
                            let zl = z.powf(lambda);
                            let v = if lambda == 1.0 {
                                zl
                            } else {
                                let z1 = (c1 as f64 / m).powf(lambda);
                                let z2 = (c2 as f64 / m).powf(lambda);
                                2.0 * zl - 0.5 * (z1 + z2)
                            };
                            raw.push(zl);
                            val.push(v);
                            samples.push(v);
                        }
                        out.push(EstimateRecord {
                            alpha,
                            k,
                            lambda,
                            r,
                            p_hat: val.mean().clamp(0.0, 1.0),
                            stderr: val.stderr(),
                            outer_n: ok.len() as u64,
                            inner_m: cfg.inner_m,
                            delta: cfg.delta,
                            h: cfg.h,
                            seed: cfg.seed,
                            estimator: "direct".into(),
                            extrapolated: lambda != 1.0,
                            raw_p_hat: raw.mean(),
                            raw_stderr: raw.stderr(),
                            avoiding_replicas: avoiding,
                            budget_failures: failures,
                            samples,
                        });
                    }
                }
            }
        }
        EstimateSeries { records: out }
    }

    pub fn write_jsonl(&self, w: impl std::io::Write) -> Result<()> {
        crate::io::write_jsonl(&self.records, w)
    }
}

/// Direct nested Monte Carlo estimate over replicas `0..outer_n`.
pub fn estimate_p(cfg: &ExperimentConfig) -> Result<EstimateSeries> {
    let records = run_replicas(cfg, 0..cfg.outer_n)?;
    Ok(EstimateSeries::from_records(cfg, &records))
}
