//! Quality and separation statistics for `k = 1`, among avoiding pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_coupled, ExperimentConfig};
use crate::error::{invalid, Result};
use crate::geometry::Cone;
use crate::path::LeveledPath;
use crate::spatial::point_polyline_distance;
use crate::stats::percentile_interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationConfig {
    pub alpha: f64,
    /// Radii `r` at which separation over `[r - 1/2, r]` is examined.
    pub r_values: Vec<f64>,
    pub eps_grid: Vec<f64>,
    /// Chord aperture of the cone `A` around `(1,0,0)`.
    pub aperture: f64,
    pub outer_n: u64,
    pub inner_m: usize,
    pub delta: f64,
    pub h: f64,
    pub t_min: f64,
    pub min_loop_steps: usize,
    pub walk_budget: f64,
    pub seed: u64,
}

impl SeparationConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        let mut grid: Vec<f64> = self
            .r_values
            .iter()
            .flat_map(|&r| [r - 0.5, r])
            .collect();
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        ExperimentConfig {
            alphas: vec![self.alpha],
            ks: vec![1],
            lambdas: vec![1.0],
            r_grid: grid,
            outer_n: self.outer_n,
            inner_m: self.inner_m,
            delta: self.delta,
            h: self.h,
            t_min: self.t_min,
            min_loop_steps: self.min_loop_steps,
            walk_budget: self.walk_budget,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r_values.is_empty() || self.r_values.iter().any(|&r| r < 0.5) {
            return Err(invalid("r_values", "need at least one r >= 1/2"));
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0)) {
            return Err(invalid("eps_grid", "values must be > 0"));
        }
        if !(self.aperture > 0.0 && self.aperture < 2.0) {
            return Err(invalid("aperture", "must lie in (0, 2)"));
        }
        self.experiment().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub r: f64,
    /// Replicas with at least one avoiding inner path.
    pub avoiding_replicas: u64,
    pub avoiding_pairs: u64,
    /// Avoiding pairs with both tails in their cones.
    pub separated_pairs: u64,
    /// Pooled ratio `separated / avoiding`.
    pub frequency: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub low_confidence: bool,
    pub eps: Vec<f64>,
    /// Fraction of avoiding pairs with `delta_r >= eps`.
    pub q_eps: Vec<f64>,
    /// Quantiles 0, 1/4, 1/2, 3/4, 1 of `delta_r`.
    pub delta_quantiles: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    pub alpha: f64,
    pub aperture: f64,
    pub rows: Vec<SeparationRow>,
    pub budget_failures: u64,
    /// Row with the smallest frequency.
    pub min_frequency: f64,
    pub min_ci_low: f64,
    /// The smallest frequency has a 95% interval excluding 0.
    pub bounded_below: bool,
}

const LOW_CONFIDENCE: u64 = 50;

fn tail_in(p: &LeveledPath, from: usize, to: usize, cone: &Cone) -> bool {
    let (Some(a), Some(b)) = (p.hit_index[from], p.hit_index[to]) else {
        return false;
    };
    p.path.points[a..=b]
        .iter()
        .all(|&x| cone.contains(x).unwrap_or(false))
}

/// Per pair at one radius: `(delta_r, separated)`.
type PairStat = (f64, bool);

pub fn separation_stats(cfg: &SeparationConfig) -> Result<SeparationStats> {
    cfg.validate()?;
    let ex = cfg.experiment();
    let a_cone = Cone::around_x(cfg.aperture)?;
    let minus_a = a_cone.reflected();
    let idx = |r: f64| ex.r_grid.iter().position(|&g| g == r).expect("radius in grid");
    let per_replica: Vec<Option<Vec<Vec<PairStat>>>> = (0..cfg.outer_n)
        .into_par_iter()
        .map(|rep| -> Result<Option<Vec<Vec<PairStat>>>> {
            let c = run_coupled(&ex, rep)?;
            if c.failed {
                return Ok(None);
            }
            let ob = &c.obstacles[0];
            let mut out = Vec::with_capacity(cfg.r_values.len());
            for &r in &cfg.r_values {
                let (gi, gs) = (idx(r), idx(r - 0.5));
                let cell = ex.cell(0, 0, gi);
                let ob_trace = ob.stopped_at(gi).expect("replica not failed");
                let ob_end = ob_trace.last();
                let u = tail_in(ob, gs, gi, &minus_a);
                let mut pairs = Vec::new();
                for (i, p) in c.inner.iter().enumerate() {
                    if !c.avoids(i, cell) {
                        continue;
                    }
                    let tr = p.stopped_at(gi).expect("replica not failed");
                    let d = point_polyline_distance(tr.last(), &ob_trace)
                        .min(point_polyline_distance(ob_end, &tr));
                    let sep = u && tail_in(p, gs, gi, &a_cone);
                    pairs.push((d * (-r).exp(), sep));
                }
                out.push(pairs);
            }
            Ok(Some(out))
        })
        .collect::<Result<_>>()?;
    let budget_failures = per_replica.iter().filter(|x| x.is_none()).count() as u64;
    let ok: Vec<&Vec<Vec<PairStat>>> = per_replica.iter().flatten().collect();

    let mut rows = Vec::new();
    for (ri, &r) in cfg.r_values.iter().enumerate() {
        let mut deltas = Vec::new();
        let mut a_i = Vec::new();
        let mut b_i = Vec::new();
        for rep in &ok {
            let pairs = &rep[ri];
            a_i.push(pairs.iter().filter(|p| p.1).count() as f64);
            b_i.push(pairs.len() as f64);
            deltas.extend(pairs.iter().map(|p| p.0));
        }
        let avoiding_pairs = deltas.len() as u64;
        let separated_pairs = a_i.iter().sum::<f64>() as u64;
        let avoiding_replicas = b_i.iter().filter(|&&b| b > 0.0).count() as u64;
        let (frequency, ci_low, ci_high) = ratio_interval(&a_i, &b_i);
        let q_eps = cfg
            .eps_grid
            .iter()
            .map(|&e| {
                if deltas.is_empty() {
                    f64::NAN
                } else {
                    deltas.iter().filter(|&&d| d >= e).count() as f64 / deltas.len() as f64
                }
            })
            .collect();
        let delta_quantiles = if deltas.is_empty() {
            vec![f64::NAN; 5]
        } else {
            let mut d = deltas.clone();
            let (q25, q75) = percentile_interval(&mut d, 0.5);
            let (_, med) = percentile_interval(&mut d, 1.0);
            vec![d[0], q25, med, q75, d[d.len() - 1]]
        };
        rows.push(SeparationRow {
            r,
            avoiding_replicas,
            avoiding_pairs,
            separated_pairs,
            frequency,
            ci_low,
            ci_high,
            low_confidence: avoiding_replicas < LOW_CONFIDENCE,
            eps: cfg.eps_grid.clone(),
            q_eps,
            delta_quantiles,
        });
    }
    let worst = rows
        .iter()
        .min_by(|a, b| a.frequency.total_cmp(&b.frequency))
        .expect("at least one radius");
    Ok(SeparationStats {
        alpha: cfg.alpha,
        aperture: cfg.aperture,
        min_frequency: worst.frequency,
        min_ci_low: worst.ci_low,
        bounded_below: worst.ci_low > 0.0,
        rows,
        budget_failures,
    })
}

/// Ratio `sum a / sum b` with a 95% delta-method interval over replicas.
/// With no successes the upper end is the rule-of-three bound.
fn ratio_interval(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let sb: f64 = b.iter().sum();
    if sb == 0.0 {
        return (f64::NAN, 0.0, 1.0);
    }
    let sa: f64 = a.iter().sum();
    let ratio = sa / sb;
    if sa == 0.0 {
        return (0.0, 0.0, (3.0 / sb).min(1.0));
    }
    let bbar = sb / n;
    let s2: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ratio * y).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let se = (s2 / n).sqrt() / bbar;
    (
        ratio,
        (ratio - 1.96 * se).max(0.0),
        (ratio + 1.96 * se).min(1.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_interval_basics() {
        let (r, lo, hi) = ratio_interval(&[1.0, 2.0, 1.0, 2.0], &[2.0, 4.0, 2.0, 4.0]);
        assert_eq!(r, 0.5);
        assert!(lo <= 0.5 && hi >= 0.5);
        let (r, lo, hi) = ratio_interval(&[0.0; 10], &[3.0; 10]);
        assert_eq!((r, lo), (0.0, 0.0));
        assert!((hi - 0.1).abs() < 1e-12);
    }
}
