//! Loop-soup clusters under the tolerance contact relation, and the
//! enlargement of a set of paths by the clusters it meets.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{Aabb, Ball, Point3};
use crate::path::SampledPath;
use crate::soup::{sample_soup, LoopSoup, SoupConfig};
use crate::spatial::{ContactGrid, QueryScratch, Tolerance};
use crate::stats::wilson_interval;

/// Union-find with path compression and union by size.
#[derive(Debug, Clone)]
pub struct Dsu {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl Dsu {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, x: u32) -> u32 {
        let mut root = x;
        while self.parent[root as usize] != root {
            root = self.parent[root as usize];
        }
        let mut cur = x;
        while self.parent[cur as usize] != root {
            let next = self.parent[cur as usize];
            self.parent[cur as usize] = root;
            cur = next;
        }
        root
    }

    /// Returns true when two distinct sets were merged.
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
        true
    }

    /// Component labels equal to the smallest member index.
    pub fn labels(&mut self) -> Vec<u32> {
        let n = self.parent.len();
        let mut min_of_root = vec![u32::MAX; n];
        for i in 0..n as u32 {
            let r = self.find(i) as usize;
            min_of_root[r] = min_of_root[r].min(i);
        }
        (0..n as u32).map(|i| min_of_root[self.find(i) as usize]).collect()
    }
}

/// All pairs `(i, j)`, `i < j`, of paths in contact, in lexicographic order.
pub fn contact_edges(paths: &[&SampledPath], tol: &Tolerance) -> Vec<(u32, u32)> {
    let mut grid = ContactGrid::new();
    for (i, p) in paths.iter().enumerate() {
        grid.insert_path(p, tol, i as u32);
    }
    let mut edges = Vec::new();
    let mut scratch = QueryScratch::new();
    let mut seen = vec![u32::MAX; paths.len()];
    for (i, p) in paths.iter().enumerate() {
        let i = i as u32;
        for s in 0..p.segment_count() {
            let (a, b) = p.segment(s);
            grid.for_each_touching(a, b, tol.reach(a, b), &mut scratch, |id| {
                let j = grid.item(id).owner;
                if j > i && seen[j as usize] != i {
                    seen[j as usize] = i;
                    edges.push((i, j));
                }
                true
            });
        }
    }
    edges.sort_unstable();
    edges
}

/// Partition of a soup into clusters.
#[derive(Debug, Clone)]
pub struct ClusterIndex {
    pub tol: Tolerance,
    /// Contact pairs between loops.
    pub edges: Vec<(u32, u32)>,
    /// Cluster id (smallest member loop index) per loop.
    pub cluster_of: Vec<u32>,
    grid: ContactGrid,
    traces: Vec<SampledPath>,
}

impl ClusterIndex {
    pub fn build(soup: &LoopSoup, tol: Tolerance) -> Self {
        let traces: Vec<SampledPath> = soup.loops.iter().map(|l| l.trace.clone()).collect();
        Self::from_paths(traces, tol)
    }

    pub fn from_paths(traces: Vec<SampledPath>, tol: Tolerance) -> Self {
        let refs: Vec<&SampledPath> = traces.iter().collect();
        let edges = contact_edges(&refs, &tol);
        let mut dsu = Dsu::new(traces.len());
        for &(a, b) in &edges {
            dsu.union(a, b);
        }
        let cluster_of = dsu.labels();
        let mut grid = ContactGrid::new();
        for (i, t) in traces.iter().enumerate() {
            grid.insert_path(t, &tol, i as u32);
        }
        Self {
            tol,
            edges,
            cluster_of,
            grid,
            traces,
        }
    }

    pub fn loop_count(&self) -> usize {
        self.traces.len()
    }

    pub fn trace(&self, i: usize) -> &SampledPath {
        &self.traces[i]
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_of
            .iter()
            .enumerate()
            .filter(|(i, &c)| c as usize == *i)
            .count()
    }

    /// Member loops of each cluster, keyed by cluster id, in id order.
    pub fn clusters(&self) -> Vec<(u32, Vec<u32>)> {
        let mut out: Vec<(u32, Vec<u32>)> = Vec::new();
        let mut slot = vec![usize::MAX; self.cluster_of.len()];
        for (i, &c) in self.cluster_of.iter().enumerate() {
            if slot[c as usize] == usize::MAX {
                slot[c as usize] = out.len();
                out.push((c, Vec::new()));
            }
            out[slot[c as usize]].1.push(i as u32);
        }
        out
    }

    /// Loops with a segment in contact with `path`.
    pub fn loops_touching(&self, path: &SampledPath) -> BTreeSet<u32> {
        let mut hit = BTreeSet::new();
        let mut scratch = QueryScratch::new();
        for s in 0..path.segment_count() {
            let (a, b) = path.segment(s);
            self.grid
                .for_each_touching(a, b, self.tol.reach(a, b), &mut scratch, |id| {
                    hit.insert(self.grid.item(id).owner);
                    true
                });
        }
        hit
    }

    /// Summary rows for CSV export.
    pub fn summaries(&self) -> Vec<ClusterSummary> {
        self.clusters()
            .into_iter()
            .map(|(id, members)| {
                let pts: Vec<Point3> = members
                    .iter()
                    .flat_map(|&m| self.traces[m as usize].points.iter().copied())
                    .collect();
                let bb = Aabb::from_points(&pts);
                ClusterSummary {
                    cluster_id: id,
                    loops: members.len(),
                    points: pts.len(),
                    diameter: point_cloud_diameter(&pts),
                    min_norm: pts.iter().map(|p| p.norm()).fold(f64::INFINITY, f64::min),
                    max_norm: pts.iter().map(|p| p.norm()).fold(0.0, f64::max),
                    bbox_diagonal: bb.diagonal(),
                }
            })
            .collect()
    }
}

pub fn build_clusters(soup: &LoopSoup, tol: Tolerance) -> ClusterIndex {
    ClusterIndex::build(soup, tol)
}

/// O(n^2) reference partition labelled by smallest member index.
pub fn brute_force_clusters(traces: &[&SampledPath], tol: &Tolerance) -> Vec<u32> {
    let n = traces.len();
    let mut dsu = Dsu::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if tol.polylines_touch(traces[i], traces[j]) {
                dsu.union(i as u32, j as u32);
            }
        }
    }
    dsu.labels()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_id: u32,
    pub loops: usize,
    pub points: usize,
    pub diameter: f64,
    pub min_norm: f64,
    pub max_norm: f64,
    pub bbox_diagonal: f64,
}

pub fn write_cluster_csv(rows: &[ClusterSummary], w: impl Write) -> Result<()> {
    crate::io::write_csv(rows, w)
}

/// Exact diameter of a point cloud.
pub fn point_cloud_diameter(pts: &[Point3]) -> f64 {
    diameter_exceeds(pts, f64::INFINITY).1
}

/// Whether the diameter of `pts` exceeds `bound`, with the diameter itself
/// when it does not (or the first witnessed pair distance when it does).
fn diameter_exceeds(pts: &[Point3], bound: f64) -> (bool, f64) {
    let bb = Aabb::from_points(pts);
    if pts.is_empty() {
        return (false, 0.0);
    }
    let b2 = bound * bound;
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = pts[i].dist2(pts[j]);
            if d > best {
                best = d;
                if best > b2 {
                    return (true, best.sqrt());
                }
            }
        }
        if bb.diagonal() * bb.diagonal() <= best {
            break;
        }
    }
    (false, best.sqrt())
}

/// The set `V` enlarged by every cluster it touches.
#[derive(Debug, Clone)]
pub struct Enlargement {
    pub base: Vec<SampledPath>,
    pub attached_clusters: BTreeSet<u32>,
    /// Loops of the attached clusters.
    pub attached_loops: Vec<u32>,
    pub tol: Tolerance,
}

/// Attaches exactly the clusters with a loop in contact with some base path.
pub fn enlarge(v: &[SampledPath], idx: &ClusterIndex) -> Enlargement {
    let mut attached = BTreeSet::new();
    for p in v {
        for l in idx.loops_touching(p) {
            attached.insert(idx.cluster_of[l as usize]);
        }
    }
    let attached_loops = (0..idx.loop_count() as u32)
        .filter(|&l| attached.contains(&idx.cluster_of[l as usize]))
        .collect();
    Enlargement {
        base: v.to_vec(),
        attached_clusters: attached,
        attached_loops,
        tol: idx.tol,
    }
}

impl Enlargement {
    /// Spatial index over the base paths and attached loops.
    pub fn obstacle(&self, idx: &ClusterIndex) -> Obstacle {
        let mut grid = ContactGrid::new();
        for p in &self.base {
            grid.insert_path(p, &self.tol, 0);
        }
        for &l in &self.attached_loops {
            grid.insert_path(idx.trace(l as usize), &self.tol, 0);
        }
        Obstacle {
            grid,
            tol: self.tol,
        }
    }
}

/// Indexed union of polylines for repeated avoidance queries.
#[derive(Debug, Clone)]
pub struct Obstacle {
    grid: ContactGrid,
    tol: Tolerance,
}

impl Obstacle {
    pub fn touches(&self, p: &SampledPath, scratch: &mut QueryScratch) -> bool {
        (0..p.segment_count()).any(|s| {
            let (a, b) = p.segment(s);
            !self
                .grid
                .for_each_touching(a, b, self.tol.reach(a, b), scratch, |_| false)
        })
    }
}

/// True iff `p` is out of contact with every base path and attached loop.
pub fn avoidance_test(p: &SampledPath, e: &Enlargement, idx: &ClusterIndex) -> bool {
    !e.obstacle(idx).touches(p, &mut QueryScratch::new())
}

/// Reference for [`avoidance_test`] by exhaustive pairwise scan.
pub fn avoidance_brute(p: &SampledPath, e: &Enlargement, idx: &ClusterIndex) -> bool {
    e.base.iter().all(|b| !e.tol.polylines_touch(p, b))
        && e
            .attached_loops
            .iter()
            .all(|&l| !e.tol.polylines_touch(p, idx.trace(l as usize)))
}

/// Whether a polyline meets the sphere `|x - c| = radius`.
pub fn path_meets_sphere(p: &SampledPath, sphere: &Ball) -> bool {
    (0..p.segment_count()).any(|s| {
        let (a, b) = p.segment(s);
        let near = crate::geometry::point_segment_distance2(sphere.center, a, b).sqrt();
        let far = a.dist(sphere.center).max(b.dist(sphere.center));
        near <= sphere.radius && far >= sphere.radius
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub alpha: f64,
    pub diameter_bound: f64,
    pub soups: u64,
    pub successes: u64,
    pub probability: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// For each `alpha`, the fraction of soups in which every cluster meeting
/// the unit sphere has diameter at most `diameter_bound`. Soups are sampled
/// once at the largest alpha and thinned, so rows are coupled.
pub fn cluster_diameter_survey(
    alphas: &[f64],
    diameter_bound: f64,
    template: &SoupConfig,
    h: f64,
    replicas: u64,
) -> Result<Vec<SurveyRow>> {
    let mut successes = vec![0u64; alphas.len()];
    for rep in 0..replicas {
        for (s, ok) in successes.iter_mut().zip(survey_replica(alphas, diameter_bound, template, h, rep)?) {
            *s += ok as u64;
        }
    }
    Ok(survey_rows(alphas, diameter_bound, &successes, replicas))
}

/// One soup of the survey: whether the bound holds at each alpha.
pub fn survey_replica(alphas: &[f64], diameter_bound: f64, template: &SoupConfig, h: f64, rep: u64) -> Result<Vec<bool>> {
    let alpha_max = alphas.iter().copied().fold(0.0, f64::max);
    let unit = Ball::centered(1.0);
    let tol = Tolerance::new(h, template.scale);
    let mut cfg = template.clone();
    cfg.alpha = alpha_max;
    cfg.stream = template.stream.child(&[rep]);
    let soup = sample_soup(&cfg)?;
    Ok(alphas
        .iter()
        .map(|&a| {
            let sub = soup.thinned(a);
            let idx = ClusterIndex::build(&sub, tol);
            idx.clusters().iter().all(|(_, members)| {
                let meets = members
                    .iter()
                    .any(|&m| path_meets_sphere(idx.trace(m as usize), &unit));
                if !meets {
                    return true;
                }
                let pts: Vec<Point3> = members
                    .iter()
                    .flat_map(|&m| idx.trace(m as usize).points.iter().copied())
                    .collect();
                !diameter_exceeds(&pts, diameter_bound).0
            })
        })
        .collect())
}

pub fn survey_rows(alphas: &[f64], diameter_bound: f64, successes: &[u64], replicas: u64) -> Vec<SurveyRow> {
    alphas
        .iter()
        .zip(successes)
        .map(|(&alpha, &s)| {
            let p = s as f64 / replicas.max(1) as f64;
            let (lo, hi) = wilson_interval(s, replicas, 1.96);
            SurveyRow {
                alpha,
                diameter_bound,
                soups: replicas,
                successes: s,
                probability: p,
                stderr: (p * (1.0 - p) / replicas.max(1) as f64).sqrt(),
                ci_low: lo,
                ci_high: hi,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LocalScale;

    fn line(a: Point3, b: Point3) -> SampledPath {
        SampledPath {
            times: vec![0.0, 1.0],
            points: vec![a, b],
            resolution: 1.0,
            scale: LocalScale::UNIT,
        }
    }

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn empty_soup_has_no_clusters() {
        let idx = ClusterIndex::from_paths(vec![], Tolerance::uniform(0.1));
        assert_eq!(idx.cluster_count(), 0);
        let e = enlarge(&[line(p(0., 0., 0.), p(1., 0., 0.))], &idx);
        assert!(e.attached_clusters.is_empty());
    }

    #[test]
    fn contact_at_zero_and_two_h() {
        let h = 0.1;
        let a = line(p(0., 0., 0.), p(1., 0., 0.));
        let touching = line(p(0.5, -1., 0.), p(0.5, 1., 0.));
        let far = line(p(0.5, -1., 2.0 * h), p(0.5, 1., 2.0 * h));
        let idx = ClusterIndex::from_paths(vec![a.clone(), touching], Tolerance::uniform(h));
        assert_eq!(idx.cluster_count(), 1);
        let idx = ClusterIndex::from_paths(vec![a, far], Tolerance::uniform(h));
        assert_eq!(idx.cluster_count(), 2);
    }

    #[test]
    fn chain_is_attached_whole() {
        let chain = vec![
            line(p(0., 0., 0.), p(1., 0., 0.)),
            line(p(1., 0., 0.), p(2., 0., 0.)),
            line(p(2., 0., 0.), p(3., 0., 0.)),
            line(p(10., 0., 0.), p(11., 0., 0.)),
        ];
        let idx = ClusterIndex::from_paths(chain, Tolerance::uniform(0.05));
        assert_eq!(idx.cluster_of, vec![0, 0, 0, 3]);
        let v = line(p(3.0, -1., 0.), p(3.0, 1., 0.));
        let e = enlarge(&[v.clone()], &idx);
        assert_eq!(e.attached_clusters.iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(e.attached_loops, vec![0, 1, 2]);
        let probe = line(p(0.0, -1., 0.), p(0.0, 1., 0.));
        assert!(!avoidance_test(&probe, &e, &idx));
        let far = line(p(5.0, -1., 0.), p(5.0, 1., 0.));
        assert!(avoidance_test(&far, &e, &idx));
        assert!(!avoidance_test(&v, &e, &idx));
    }

    #[test]
    fn dsu_labels_are_minimal_members() {
        let mut d = Dsu::new(6);
        d.union(5, 3);
        d.union(3, 4);
        d.union(1, 2);
        assert_eq!(d.labels(), vec![0, 1, 1, 3, 3, 3]);
    }

    #[test]
    fn diameter_bound_decision() {
        let pts = [p(0., 0., 0.), p(1., 0., 0.), p(0., 2., 0.)];
        assert!((point_cloud_diameter(&pts) - 5f64.sqrt()).abs() < 1e-12);
        assert!(diameter_exceeds(&pts, 2.0).0);
        assert!(!diameter_exceeds(&pts, 2.3).0);
    }
}
