//! Fixed-effort multilevel splitting across log-radius levels, for
//! `lambda = 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EstimateRecord;
use crate::cluster::{enlarge, ClusterIndex};
use crate::error::{invalid, Result};
use crate::geometry::{Ball, LocalScale};
use crate::path::{sample_bm_levels, SampledPath, WalkOptions};
use crate::rng::{stream_id, RngStream};
use crate::soup::{sample_soup, RootRegion, SoupConfig};
use crate::spatial::{QueryScratch, Tolerance};
use crate::stats::{mean, stderr_of_mean};

const TAG_SPLIT: u64 = 0x7370_6c74;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplittingConfig {
    pub alpha: f64,
    pub k: usize,
    /// Increasing positive log-radii; the estimate is for the last one.
    pub levels: Vec<f64>,
    pub population: usize,
    pub runs: u64,
    pub delta: f64,
    pub h: f64,
    pub t_min: f64,
    pub min_loop_steps: usize,
    pub walk_budget: f64,
    pub seed: u64,
}

impl SplittingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", "must be finite and >= 0"));
        }
        if self.k == 0 {
            return Err(invalid("k", "must be >= 1"));
        }
        if self.levels.is_empty()
            || self.levels[0] <= 0.0
            || self.levels.windows(2).any(|w| !(w[1] > w[0]))
        {
            return Err(invalid("levels", "must be positive and strictly increasing"));
        }
        if self.population == 0 || self.runs == 0 {
            return Err(invalid("population/runs", "must be >= 1"));
        }
        Ok(())
    }

    fn walk_options(&self) -> WalkOptions {
        WalkOptions::new(self.delta, LocalScale::origin(), self.walk_budget)
    }
}

#[derive(Debug, Clone)]
struct Particle {
    obstacles: Vec<SampledPath>,
    inner: SampledPath,
    loops: Vec<SampledPath>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingResult {
    pub alpha: f64,
    pub k: usize,
    pub r: f64,
    pub p_hat: f64,
    pub stderr: f64,
    pub runs: u64,
    pub population: usize,
    /// Product of survival ratios per run.
    pub per_run: Vec<f64>,
    /// Survival ratio per level, averaged over runs that reached it.
    pub level_survival: Vec<f64>,
    /// Standard error of each level's ratio over runs.
    pub level_stderr: Vec<f64>,
    /// Runs in which no particle survived, with the level index reached.
    pub extinctions: Vec<(u64, usize)>,
    pub budget_failures: u64,
}

impl SplittingResult {
    pub fn to_record(&self, cfg: &SplittingConfig) -> EstimateRecord {
        EstimateRecord {
            alpha: self.alpha,
            k: self.k,
            lambda: 1.0,
            r: self.r,
            p_hat: self.p_hat,
            stderr: self.stderr,
            outer_n: self.runs,
            inner_m: self.population,
            delta: cfg.delta,
            h: cfg.h,
            seed: cfg.seed,
            estimator: "splitting".into(),
            extrapolated: false,
            raw_p_hat: self.p_hat,
            raw_stderr: self.stderr,
            avoiding_replicas: self.runs - self.extinctions.len() as u64,
            budget_failures: self.budget_failures,
            samples: self.per_run.clone(),
        }
    }
}

fn extend(path: &SampledPath, to_r: f64, opts: &WalkOptions, stream: RngStream) -> Result<Option<SampledPath>> {
    let mut rng = stream.rng();
    let lp = sample_bm_levels(path.last(), &[to_r], opts, &mut rng)?;
    if lp.hit_index[0].is_none() {
        return Ok(None);
    }
    let mut out = path.clone();
    let t0 = path.duration();
    for (t, p) in lp.path.times.iter().zip(&lp.path.points).skip(1) {
        out.times.push(t0 + t);
        out.points.push(*p);
    }
    Ok(Some(out))
}

fn survives(p: &Particle, tol: Tolerance) -> bool {
    let idx = ClusterIndex::from_paths(p.loops.clone(), tol);
    let e = enlarge(&p.obstacles, &idx);
    !e.obstacle(&idx).touches(&p.inner, &mut QueryScratch::new())
}

/// Advances one particle to the next level; `Ok(None)` on budget exhaustion.
fn advance(
    cfg: &SplittingConfig,
    p: &Particle,
    from_r: f64,
    to_r: f64,
    stream: RngStream,
) -> Result<Option<Particle>> {
    let opts = cfg.walk_options();
    let mut obstacles = Vec::with_capacity(p.obstacles.len());
    for (j, o) in p.obstacles.iter().enumerate() {
        match extend(o, to_r, &opts, stream.child(&[1, j as u64]))? {
            Some(x) => obstacles.push(x),
            None => return Ok(None),
        }
    }
    let Some(inner) = extend(&p.inner, to_r, &opts, stream.child(&[3]))? else {
        return Ok(None);
    };
    let big = cfg.levels.last().unwrap().exp();
    let soup = sample_soup(&SoupConfig {
        alpha: cfg.alpha,
        root_region: RootRegion::Ball(Ball::centered(to_r.exp())),
        t_min: cfg.t_min,
        t_max: (4.0 * big).powi(2),
        scale: LocalScale::origin(),
        containment: Some(Ball::centered(to_r.exp())),
        exclusion: Some(Ball::centered(from_r.exp())),
        delta: cfg.delta,
        min_loop_steps: cfg.min_loop_steps,
        stream: stream.child(&[2]),
    })?;
    let mut loops = p.loops.clone();
    loops.extend(soup.loops.into_iter().map(|l| l.trace));
    Ok(Some(Particle {
        obstacles,
        inner,
        loops,
    }))
}

struct RunOutcome {
    estimate: f64,
    ratios: Vec<f64>,
    extinct_at: Option<usize>,
    failures: u64,
}

fn run_once(cfg: &SplittingConfig, run: u64) -> Result<RunOutcome> {
    let stream = RngStream::new(cfg.seed, stream_id(&[TAG_SPLIT, run]));
    let tol = Tolerance::new(cfg.h, LocalScale::origin());
    let scale = LocalScale::origin();
    let mut pop: Vec<Particle> = (0..cfg.population)
        .map(|i| {
            let mut rng = stream.child(&[0, i as u64]).rng();
            Particle {
                obstacles: (0..cfg.k)
                    .map(|_| SampledPath::single(rng.unit_vector(), cfg.delta, scale))
                    .collect(),
                inner: SampledPath::single(rng.unit_vector(), cfg.delta, scale),
                loops: Vec::new(),
            }
        })
        .collect();
    let mut ratios = Vec::with_capacity(cfg.levels.len());
    let mut estimate = 1.0;
    let mut failures = 0;
    let mut from = 0.0;
    for (li, &to) in cfg.levels.iter().enumerate() {
        let lstream = stream.child(&[1 + li as u64]);
        let advanced: Vec<Option<Particle>> = pop
            .par_iter()
            .enumerate()
            .map(|(i, p)| advance(cfg, p, from, to, lstream.child(&[i as u64])))
            .collect::<Result<_>>()?;
        let mut survivors = Vec::new();
        let mut tried = 0usize;
        for p in advanced {
            match p {
                None => failures += 1,
                Some(p) => {
                    tried += 1;
                    survivors.push(p);
                }
            }
        }
        let alive: Vec<bool> = survivors.par_iter().map(|p| survives(p, tol)).collect();
        let survivors: Vec<Particle> = survivors
            .into_iter()
            .zip(alive)
            .filter_map(|(p, a)| a.then_some(p))
            .collect();
        let ratio = if tried == 0 {
            0.0
        } else {
            survivors.len() as f64 / tried as f64
        };
        ratios.push(ratio);
        estimate *= ratio;
        if survivors.is_empty() {
            return Ok(RunOutcome {
                estimate: 0.0,
                ratios,
                extinct_at: Some(li),
                failures,
            });
        }
        let mut rng = lstream.child(&[u64::MAX]).rng();
        pop = (0..cfg.population)
            .map(|_| {
                let j = ((rng.open01() * survivors.len() as f64) as usize).min(survivors.len() - 1);
                survivors[j].clone()
            })
            .collect();
        from = to;
    }
    Ok(RunOutcome {
        estimate,
        ratios,
        extinct_at: None,
        failures,
    })
}

/// Splitting estimate of `p(alpha, k, r, 1)` at `r = levels.last()`.
///
/// Particles that exhaust their walk budget are dropped from the level's
/// denominator and counted in `budget_failures`.
pub fn estimate_p_splitting(cfg: &SplittingConfig) -> Result<SplittingResult> {
    cfg.validate()?;
    let mut per_run = Vec::new();
    let mut by_level: Vec<Vec<f64>> = vec![Vec::new(); cfg.levels.len()];
    let mut extinctions = Vec::new();
    let mut budget_failures = 0;
    for run in 0..cfg.runs {
        let o = run_once(cfg, run)?;
        per_run.push(o.estimate);
        for (l, r) in o.ratios.iter().enumerate() {
            by_level[l].push(*r);
        }
        if let Some(l) = o.extinct_at {
            extinctions.push((run, l));
        }
        budget_failures += o.failures;
    }
    let p_hat = mean(&per_run);
    let stderr = if cfg.runs > 1 {
        stderr_of_mean(&per_run)
    } else {
        let n = cfg.population as f64;
        let rel: f64 = by_level[0..]
            .iter()
            .filter_map(|v| v.first())
            .map(|&q| if q > 0.0 { (1.0 - q) / (n * q) } else { 0.0 })
            .sum();
        p_hat * rel.sqrt()
    };
    Ok(SplittingResult {
        alpha: cfg.alpha,
        k: cfg.k,
        r: *cfg.levels.last().unwrap(),
        p_hat,
        stderr,
        runs: cfg.runs,
        population: cfg.population,
        per_run,
        level_survival: by_level.iter().map(|v| mean(v)).collect(),
        level_stderr: by_level.iter().map(|v| stderr_of_mean(v)).collect(),
        extinctions,
        budget_failures,
    })
}

