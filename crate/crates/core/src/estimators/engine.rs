//! The coupled replica engine and the direct per-cell route used to check it.

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, TAG_INNER, TAG_OBSTACLE, TAG_SOUP};
use crate::cluster::{contact_edges, enlarge, ClusterIndex, Dsu};
use crate::error::{invalid, Result};
use crate::geometry::Ball;
use crate::path::{sample_bm_levels, tol_hit, LeveledPath, SampledPath};
use crate::rng::RngStream;
use crate::soup::{contained_in, sample_soup, thinning_threshold, LoopSoup};
use crate::spatial::{ContactGrid, QueryScratch};

const NEVER: usize = usize::MAX;

/// Everything sampled for one outer replica, with the avoidance outcome of
/// every inner path in every `(alpha, k, r)` cell.
#[derive(Debug, Clone)]
pub struct CoupledReplica {
    pub replica: u64,
    pub failed: bool,
    pub loop_count: usize,
    pub path_steps: u64,
    pub obstacles: Vec<LeveledPath>,
    pub inner: Vec<LeveledPath>,
    /// Soup `L_{r_max} \ L_0` at the largest alpha.
    pub soup: LoopSoup,
    /// Index of the smallest grid ball containing each loop.
    pub loop_level: Vec<usize>,
    n_cells: usize,
    avoid: Vec<bool>,
}

impl CoupledReplica {
    /// Whether inner path `i` avoids in cell `cell` (row-major over
    /// `(alpha, k, r)`).
    pub fn avoids(&self, i: usize, cell: usize) -> bool {
        self.avoid[i * self.n_cells + cell]
    }
}

/// Walk from a uniform point of `S_0`, stopped at every grid sphere.
fn leveled_walk(cfg: &ExperimentConfig, stream: RngStream, levels: &[f64]) -> Result<LeveledPath> {
    let mut rng = stream.rng();
    let start = rng.unit_vector();
    sample_bm_levels(start, levels, &cfg.walk_options(), &mut rng)
}

/// For each segment, the first grid index at whose stopping time the
/// segment is part of the trace.
fn segment_levels(lp: &LeveledPath) -> Vec<usize> {
    let n = lp.path.segment_count();
    let mut out = vec![NEVER; n];
    let mut g = 0;
    for (s, slot) in out.iter_mut().enumerate() {
        while g < lp.hit_index.len() && matches!(lp.hit_index[g], Some(h) if h <= s) {
            g += 1;
        }
        if g < lp.hit_index.len() && lp.hit_index[g].is_some() {
            *slot = g;
        }
    }
    out
}

fn loop_levels(cfg: &ExperimentConfig, soup: &LoopSoup) -> Vec<usize> {
    let tol = tol_hit(cfg.delta);
    let scale = cfg.scale();
    soup.loops
        .iter()
        .map(|l| {
            cfg.r_grid
                .iter()
                .position(|r| contained_in(&l.trace, &Ball::centered(r.exp()), tol, &scale))
                .unwrap_or(NEVER)
        })
        .collect()
}

fn sample_soup_for(cfg: &ExperimentConfig, stream: &RngStream) -> Result<LoopSoup> {
    sample_soup(&cfg.soup_config(stream.child(&[TAG_SOUP])))
}

/// Samples replica `replica` and evaluates every cell.
pub fn run_coupled(cfg: &ExperimentConfig, replica: u64) -> Result<CoupledReplica> {
    cfg.validate()?;
    let stream = cfg.replica_stream(replica);
    let ng = cfg.r_grid.len();
    let obstacles = (0..cfg.k_max())
        .map(|j| leveled_walk(cfg, stream.child(&[TAG_OBSTACLE, j as u64]), &cfg.r_grid))
        .collect::<Result<Vec<_>>>()?;
    let soup = sample_soup_for(cfg, &stream)?;
    let inner = (0..cfg.inner_paths())
        .map(|i| leveled_walk(cfg, stream.child(&[TAG_INNER, i as u64]), &cfg.r_grid))
        .collect::<Result<Vec<_>>>()?;
    let failed = obstacles
        .iter()
        .chain(&inner)
        .any(|p| p.hit_index[ng - 1].is_none());
    let path_steps = obstacles
        .iter()
        .chain(&inner)
        .map(|p| p.path.len() as u64 - 1)
        .sum();
    let loop_level = loop_levels(cfg, &soup);
    let n_cells = cfg.cell_count();
    let mut out = CoupledReplica {
        replica,
        failed,
        loop_count: soup.len(),
        path_steps,
        obstacles,
        inner,
        soup,
        loop_level,
        n_cells,
        avoid: vec![false; cfg.inner_paths() * n_cells],
    };
    if !failed {
        evaluate_cells(cfg, &mut out);
    }
    Ok(out)
}

fn evaluate_cells(cfg: &ExperimentConfig, c: &mut CoupledReplica) {
    let tol = cfg.tolerance();
    let ng = cfg.r_grid.len();
    let nl = c.soup.len();
    let traces: Vec<&SampledPath> = c.soup.loops.iter().map(|l| &l.trace).collect();
    let edges = contact_edges(&traces, &tol);

    let mut loop_grid = ContactGrid::new();
    for (l, t) in traces.iter().enumerate() {
        loop_grid.insert_path(t, &tol, l as u32);
    }
    let mut obs_grid = ContactGrid::new();
    for (j, o) in c.obstacles.iter().enumerate() {
        obs_grid.insert_path(&o.path, &tol, j as u32);
    }
    let obs_levels: Vec<Vec<usize>> = c.obstacles.iter().map(segment_levels).collect();
    let mut scratch = QueryScratch::new();

    // Level at which loop l first touches obstacle j: (l, j, level).
    let mut attach: Vec<(u32, usize, usize)> = Vec::new();
    let mut first = vec![NEVER; nl];
    for (j, o) in c.obstacles.iter().enumerate() {
        first.iter_mut().for_each(|f| *f = NEVER);
        let sl = &obs_levels[j];
        for s in 0..o.path.segment_count() {
            if sl[s] == NEVER {
                break;
            }
            let (a, b) = o.path.segment(s);
            loop_grid.for_each_touching(a, b, tol.reach(a, b), &mut scratch, |id| {
                let l = loop_grid.item(id).owner as usize;
                if first[l] == NEVER {
                    first[l] = sl[s];
                }
                true
            });
        }
        for (l, &f) in first.iter().enumerate() {
            if f != NEVER && c.loop_level[l] != NEVER {
                attach.push((l as u32, j, f.max(c.loop_level[l])));
            }
        }
    }

    // Per inner path: contact level with each obstacle, and with each loop.
    let mut obs_contact = Vec::with_capacity(c.inner.len());
    let mut loop_contact: Vec<Vec<(u32, usize)>> = Vec::with_capacity(c.inner.len());
    for p in &c.inner {
        let sl = segment_levels(p);
        let mut oc = vec![NEVER; c.obstacles.len()];
        first.iter_mut().for_each(|f| *f = NEVER);
        for s in 0..p.path.segment_count() {
            if sl[s] == NEVER {
                break;
            }
            let (a, b) = p.path.segment(s);
            let reach = tol.reach(a, b);
            obs_grid.for_each_touching(a, b, reach, &mut scratch, |id| {
                let it = obs_grid.item(id);
                let j = it.owner as usize;
                let lv = sl[s].max(obs_levels[j][it.seg as usize]);
                oc[j] = oc[j].min(lv);
                true
            });
            loop_grid.for_each_touching(a, b, reach, &mut scratch, |id| {
                let l = loop_grid.item(id).owner as usize;
                if first[l] == NEVER {
                    first[l] = sl[s];
                }
                true
            });
        }
        obs_contact.push(oc);
        loop_contact.push(
            first
                .iter()
                .enumerate()
                .filter(|(l, &f)| f != NEVER && c.loop_level[*l] != NEVER)
                .map(|(l, &f)| (l as u32, f.max(c.loop_level[l])))
                .collect(),
        );
    }

    let alpha_max = cfg.alpha_max();
    let mut attached = vec![false; nl];
    for (ai, &alpha) in cfg.alphas.iter().enumerate() {
        let thr = thinning_threshold(alpha, alpha_max);
        let kept: Vec<bool> = c.soup.loops.iter().map(|l| l.mark < thr).collect();
        for gi in 0..ng {
            if cfg.r_grid[gi] == 0.0 {
                for ki in 0..cfg.ks.len() {
                    let cell = cfg.cell(ai, ki, gi);
                    for i in 0..c.inner.len() {
                        c.avoid[i * c.n_cells + cell] = true;
                    }
                }
                continue;
            }
            let present = |l: usize| kept[l] && c.loop_level[l] <= gi;
            let mut dsu = Dsu::new(nl);
            for &(a, b) in &edges {
                if present(a as usize) && present(b as usize) {
                    dsu.union(a, b);
                }
            }
            for (ki, &k) in cfg.ks.iter().enumerate() {
                attached.iter_mut().for_each(|x| *x = false);
                for &(l, j, lv) in &attach {
                    if j < k && lv <= gi && kept[l as usize] {
                        attached[dsu.find(l) as usize] = true;
                    }
                }
                let cell = cfg.cell(ai, ki, gi);
                for i in 0..c.inner.len() {
                    let hits_obstacle = obs_contact[i][..k].iter().any(|&lv| lv <= gi);
                    let hits_cluster = loop_contact[i].iter().any(|&(l, lv)| {
                        lv <= gi && kept[l as usize] && attached[dsu.find(l) as usize]
                    });
                    c.avoid[i * c.n_cells + cell] = !hits_obstacle && !hits_cluster;
                }
            }
        }
    }
}

/// One cell's configuration sampled on its own: obstacle and inner paths
/// stopped at `S_r`, and the soup `L_r \ L_0` at intensity `alpha`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Environment {
    pub alpha: f64,
    pub k: usize,
    pub r: f64,
    pub failed: bool,
    pub obstacles: Vec<SampledPath>,
    pub inner: Vec<SampledPath>,
    pub soup: LoopSoup,
}

/// Samples the cell `(alpha, k, r_grid[r_index])` of replica `replica`
/// without the coupled bookkeeping. Uses the same random streams as
/// [`run_coupled`].
pub fn sample_environment(
    cfg: &ExperimentConfig,
    alpha: f64,
    k: usize,
    r_index: usize,
    replica: u64,
) -> Result<Environment> {
    cfg.validate()?;
    if r_index >= cfg.r_grid.len() {
        return Err(invalid("r_index", "outside the grid"));
    }
    if alpha > cfg.alpha_max() {
        return Err(invalid("alpha", "above the largest configured alpha"));
    }
    let stream = cfg.replica_stream(replica);
    let levels = &cfg.r_grid[..=r_index];
    let r = cfg.r_grid[r_index];
    let mut failed = false;
    let mut walk = |s: RngStream| -> Result<SampledPath> {
        let lp = leveled_walk(cfg, s, levels)?;
        failed |= lp.hit_index[r_index].is_none();
        Ok(lp.path)
    };
    let obstacles = (0..k)
        .map(|j| walk(stream.child(&[TAG_OBSTACLE, j as u64])))
        .collect::<Result<Vec<_>>>()?;
    let inner = (0..cfg.inner_paths())
        .map(|i| walk(stream.child(&[TAG_INNER, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let full = sample_soup_for(cfg, &stream)?;
    let ball = Ball::centered(r.exp());
    let tol = tol_hit(cfg.delta);
    let scale = cfg.scale();
    let mut soup = full.thinned(alpha);
    soup.loops
        .retain(|l| contained_in(&l.trace, &ball, tol, &scale));
    Ok(Environment {
        alpha,
        k,
        r,
        failed,
        obstacles,
        inner,
        soup,
    })
}

impl Environment {
    /// Avoidance outcome of each inner path.
    pub fn avoid_flags(&self, cfg: &ExperimentConfig) -> Vec<bool> {
        if self.r == 0.0 {
            return vec![true; self.inner.len()];
        }
        let idx = ClusterIndex::build(&self.soup, cfg.tolerance());
        let e = enlarge(&self.obstacles, &idx);
        let ob = e.obstacle(&idx);
        let mut scratch = QueryScratch::new();
        self.inner.iter().map(|p| !ob.touches(p, &mut scratch)).collect()
    }
}

/// Fraction of inner paths avoiding the enlarged obstacle.
pub fn estimate_z(cfg: &ExperimentConfig, env: &Environment) -> f64 {
    let f = env.avoid_flags(cfg);
    f.iter().filter(|&&b| b).count() as f64 / f.len().max(1) as f64
}
