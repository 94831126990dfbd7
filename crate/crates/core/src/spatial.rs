//! Spatial acceleration for polyline proximity.
//!
//! [`ContactGrid`] is a hierarchical spatial hash for the tolerance contact
//! relation. A segment with tolerance reach `q` lives on the level whose cell
//! size is the smallest power of two covering its extent plus `q`, so every
//! level is a uniform hash with cell size comparable to the local tolerance.
//! [`SegmentBvh`] answers exact nearest-distance queries by branch and bound.
//!
//! Both structures only prune; the final decision is always the exact
//! segment predicate, so results equal brute force bit for bit.

use rustc_hash::FxHashMap;

use crate::geometry::{segment_segment_distance2, Aabb, LocalScale, Point3};
use crate::path::SampledPath;

/// Tolerance-`h` contact relation: segments `s`, `t` touch when
/// `dist(s,t) <= h * min(scale(s), scale(t))`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tolerance {
    pub h: f64,
    pub scale: LocalScale,
}

impl Tolerance {
    pub fn new(h: f64, scale: LocalScale) -> Self {
        Self { h, scale }
    }

    pub fn uniform(h: f64) -> Self {
        Self::new(h, LocalScale::UNIT)
    }

    #[inline]
    pub fn reach(&self, a: Point3, b: Point3) -> f64 {
        self.h * self.scale.at_segment(a, b)
    }

    #[inline]
    pub fn segments_touch(&self, a1: Point3, a2: Point3, b1: Point3, b2: Point3) -> bool {
        let r = self.reach(a1, a2).min(self.reach(b1, b2));
        segment_segment_distance2(a1, a2, b1, b2) <= r * r
    }

    /// Brute-force contact between two polylines.
    pub fn polylines_touch(&self, p: &SampledPath, q: &SampledPath) -> bool {
        for i in 0..p.segment_count() {
            let (a1, a2) = p.segment(i);
            for j in 0..q.segment_count() {
                let (b1, b2) = q.segment(j);
                if self.segments_touch(a1, a2, b1, b2) {
                    return true;
                }
            }
        }
        false
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridItem {
    pub a: Point3,
    pub b: Point3,
    pub reach: f64,
    /// Object the segment belongs to.
    pub owner: u32,
    /// Segment index within its owner.
    pub seg: u32,
}

type CellKey = (i32, i64, i64, i64);

/// Hierarchical spatial hash over segments.
#[derive(Debug, Clone, Default)]
pub struct ContactGrid {
    items: Vec<GridItem>,
    cells: FxHashMap<CellKey, Vec<u32>>,
    /// Per level: (level, item ids on that level).
    levels: Vec<(i32, Vec<u32>)>,
}

#[inline]
fn level_for(size: f64) -> i32 {
    let s = size.max(1e-12);
    s.log2().ceil() as i32
}

#[inline]
fn cell_size(level: i32) -> f64 {
    (level as f64).exp2()
}

#[inline]
fn cell_range(lo: f64, hi: f64, c: f64) -> (i64, i64) {
    ((lo / c).floor() as i64, (hi / c).floor() as i64)
}

impl ContactGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, id: u32) -> &GridItem {
        &self.items[id as usize]
    }

    pub fn insert(&mut self, a: Point3, b: Point3, reach: f64, owner: u32, seg: u32) -> u32 {
        let id = self.items.len() as u32;
        let bb = Aabb::from_points([&a, &b]);
        let ext = bb.extent();
        let level = level_for(ext.x.max(ext.y).max(ext.z) + reach);
        let c = cell_size(level);
        let (x0, x1) = cell_range(bb.min.x, bb.max.x, c);
        let (y0, y1) = cell_range(bb.min.y, bb.max.y, c);
        let (z0, z1) = cell_range(bb.min.z, bb.max.z, c);
        for ix in x0..=x1 {
            for iy in y0..=y1 {
                for iz in z0..=z1 {
                    self.cells.entry((level, ix, iy, iz)).or_default().push(id);
                }
            }
        }
        match self.levels.binary_search_by_key(&level, |(l, _)| *l) {
            Ok(pos) => self.levels[pos].1.push(id),
            Err(pos) => self.levels.insert(pos, (level, vec![id])),
        }
        self.items.push(GridItem {
            a,
            b,
            reach,
            owner,
            seg,
        });
        id
    }

    /// Inserts every segment of `path` under `owner`.
    pub fn insert_path(&mut self, path: &SampledPath, tol: &Tolerance, owner: u32) {
        for i in 0..path.segment_count() {
            let (a, b) = path.segment(i);
            self.insert(a, b, tol.reach(a, b), owner, i as u32);
        }
    }

    /// Calls `f(item_id)` once for every stored segment that touches `[a,b]`
    /// with reach `reach`. Returning `false` from `f` stops the query.
    pub fn for_each_touching(
        &self,
        a: Point3,
        b: Point3,
        reach: f64,
        scratch: &mut QueryScratch,
        mut f: impl FnMut(u32) -> bool,
    ) -> bool {
        scratch.begin(self.items.len());
        let bb = Aabb::from_points([&a, &b]);
        for (level, ids) in &self.levels {
            let c = cell_size(*level);
            let pad = reach.min(c) * (1.0 + 1e-9) + 1e-300;
            let q = bb.inflate(pad);
            let (x0, x1) = cell_range(q.min.x, q.max.x, c);
            let (y0, y1) = cell_range(q.min.y, q.max.y, c);
            let (z0, z1) = cell_range(q.min.z, q.max.z, c);
            let ncells = ((x1 - x0 + 1) as f64) * ((y1 - y0 + 1) as f64) * ((z1 - z0 + 1) as f64);
            if ncells > ids.len() as f64 {
                for &id in ids {
                    if !self.test(id, a, b, reach, &q, scratch) {
                        continue;
                    }
                    if !f(id) {
                        return false;
                    }
                }
                continue;
            }
            for ix in x0..=x1 {
                for iy in y0..=y1 {
                    for iz in z0..=z1 {
                        let Some(bucket) = self.cells.get(&(*level, ix, iy, iz)) else {
                            continue;
                        };
                        for &id in bucket {
                            if !self.test(id, a, b, reach, &q, scratch) {
                                continue;
                            }
                            if !f(id) {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }

    #[inline]
    fn test(&self, id: u32, a: Point3, b: Point3, reach: f64, q: &Aabb, scratch: &mut QueryScratch) -> bool {
        if !scratch.mark(id) {
            return false;
        }
        let it = &self.items[id as usize];
        let ib = Aabb::from_points([&it.a, &it.b]);
        if !ib.intersects(q) {
            return false;
        }
        let r = reach.min(it.reach);
        segment_segment_distance2(a, b, it.a, it.b) <= r * r
    }
}

/// Reusable de-duplication buffer for grid queries.
#[derive(Debug, Clone, Default)]
pub struct QueryScratch {
    stamp: Vec<u32>,
    epoch: u32,
}

impl QueryScratch {
    pub fn new() -> Self {
        Self::default()
    }

    fn begin(&mut self, n: usize) {
        if self.stamp.len() < n {
            self.stamp.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
    }

    #[inline]
    fn mark(&mut self, id: u32) -> bool {
        let s = &mut self.stamp[id as usize];
        if *s == self.epoch {
            false
        } else {
            *s = self.epoch;
            true
        }
    }
}

/// Bounding-volume hierarchy over the segments of one polyline.
#[derive(Debug, Clone)]
pub struct SegmentBvh {
    segs: Vec<(Point3, Point3)>,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct BvhNode {
    bb: Aabb,
    /// Leaf: range into `order`; inner: children.
    start: u32,
    count: u32,
    left: u32,
    right: u32,
}

const LEAF_SIZE: usize = 8;

impl SegmentBvh {
    pub fn build(path: &SampledPath) -> Self {
        let segs: Vec<(Point3, Point3)> = (0..path.segment_count()).map(|i| path.segment(i)).collect();
        let mut order: Vec<u32> = (0..segs.len() as u32).collect();
        let mut nodes = Vec::new();
        Self::build_node(&segs, &mut order, 0, segs.len(), &mut nodes);
        Self { segs, nodes, order }
    }

    fn build_node(
        segs: &[(Point3, Point3)],
        order: &mut [u32],
        start: usize,
        end: usize,
        nodes: &mut Vec<BvhNode>,
    ) -> u32 {
        let mut bb = Aabb::empty();
        for &i in &order[start..end] {
            let (a, b) = segs[i as usize];
            bb.include(a);
            bb.include(b);
        }
        let id = nodes.len() as u32;
        nodes.push(BvhNode {
            bb,
            start: start as u32,
            count: (end - start) as u32,
            left: u32::MAX,
            right: u32::MAX,
        });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = bb.extent();
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            let ci = segs[i as usize].0[axis] + segs[i as usize].1[axis];
            let cj = segs[j as usize].0[axis] + segs[j as usize].1[axis];
            ci.total_cmp(&cj)
        });
        let l = Self::build_node(segs, order, start, mid, nodes);
        let r = Self::build_node(segs, order, mid, end, nodes);
        nodes[id as usize].left = l;
        nodes[id as usize].right = r;
        id
    }

    /// Exact minimum squared distance from `[a,b]` to the stored polyline,
    /// improving on `best2`.
    pub fn nearest2(&self, a: Point3, b: Point3, mut best2: f64) -> f64 {
        let qb = Aabb::from_points([&a, &b]);
        let mut stack = vec![0u32];
        while let Some(n) = stack.pop() {
            let node = self.nodes[n as usize];
            let g = node.bb.gap(&qb) * (1.0 - 1e-9);
            if g * g > best2 {
                continue;
            }
            if node.left == u32::MAX {
                for &i in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let (c, d) = self.segs[i as usize];
                    let d2 = segment_segment_distance2(a, b, c, d);
                    if d2 < best2 {
                        best2 = d2;
                    }
                }
            } else {
                let l = self.nodes[node.left as usize].bb.gap(&qb);
                let r = self.nodes[node.right as usize].bb.gap(&qb);
                if l <= r {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        best2
    }
}

/// Minimum distance between two polylines, accelerated by a BVH over `q`.
/// Equal to [`polyline_min_distance_brute`] exactly.
pub fn polyline_min_distance(p: &SampledPath, q: &SampledPath) -> f64 {
    let (small, large) = if p.segment_count() <= q.segment_count() {
        (p, q)
    } else {
        (q, p)
    };
    let bvh = SegmentBvh::build(large);
    let mut best2 = f64::INFINITY;
    for i in 0..small.segment_count() {
        let (a, b) = small.segment(i);
        best2 = bvh.nearest2(a, b, best2);
        if best2 == 0.0 {
            break;
        }
    }
    best2.sqrt()
}

/// O(n m) reference for [`polyline_min_distance`].
pub fn polyline_min_distance_brute(p: &SampledPath, q: &SampledPath) -> f64 {
    let mut best2 = f64::INFINITY;
    for i in 0..p.segment_count() {
        let (a, b) = p.segment(i);
        for j in 0..q.segment_count() {
            let (c, d) = q.segment(j);
            best2 = best2.min(segment_segment_distance2(a, b, c, d));
        }
    }
    best2.sqrt()
}

/// Distance from a point to a polyline.
pub fn point_polyline_distance(x: Point3, p: &SampledPath) -> f64 {
    let mut best2 = f64::INFINITY;
    for i in 0..p.segment_count() {
        let (a, b) = p.segment(i);
        best2 = best2.min(crate::geometry::point_segment_distance2(x, a, b));
    }
    best2.sqrt()
}
