//! Bounding volume hierarchy over one rank's local triangles.
//!
//! Construction is a recursive median split on the longest centroid axis. Nearest-hit
//! queries return the lexicographically smallest `(t, global_id)`, which makes the
//! answer independent of how primitives were ordered or distributed.

use std::cmp::Ordering;

use crate::geom::{ray_aabb_intersect, ray_triangle_intersect, Aabb, Ray, Triangle};

pub const LEAF_SIZE: usize = 4;
pub const MAX_DEPTH: usize = 64;

/// Relative widening of slab intervals during traversal so rounding in the box test
/// can never cull a triangle the exact intersection routine would report.
const SLAB_PAD: f64 = 1e-9;

/// Nearest-hit key, ordered by `(t, global_id)`. [`HitKey::MISS`] sorts after every hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitKey {
    pub t: f64,
    pub global_id: u64,
}

impl HitKey {
    pub const MISS: HitKey = HitKey {
        t: f64::INFINITY,
        global_id: u64::MAX,
    };

    pub fn new(t: f64, global_id: u64) -> HitKey {
        HitKey { t, global_id }
    }

    pub fn is_miss(&self) -> bool {
        self.global_id == u64::MAX && self.t == f64::INFINITY
    }

    pub fn is_hit(&self) -> bool {
        !self.is_miss()
    }

    /// Keeps the smaller of the two keys.
    pub fn min(self, other: HitKey) -> HitKey {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl Eq for HitKey {}

impl PartialOrd for HitKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HitKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t
            .total_cmp(&other.t)
            .then(self.global_id.cmp(&other.global_id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Interior {
        left: u32,
        right: u32,
    },
    /// Range `[first, first + count)` into [`Accel::prim_order`].
    Leaf {
        first: u32,
        count: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub kind: NodeKind,
}

/// Immutable BVH. Indices in `prim_order` refer to the slice the tree was built over.
#[derive(Debug, Clone, Default)]
pub struct Accel {
    pub nodes: Vec<BvhNode>,
    pub prim_order: Vec<u32>,
    pub root: u32,
    depth: usize,
}

struct BuildItem {
    index: u32,
    centroid: [f64; 3],
    global_id: u64,
    bounds: Aabb,
}

impl Accel {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Depth of the deepest leaf (root = 1); zero when empty.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn bounds(&self) -> Aabb {
        self.nodes
            .get(self.root as usize)
            .map(|n| n.bounds)
            .unwrap_or(Aabb::EMPTY)
    }
}

pub fn build_bvh(prims: &[Triangle]) -> Accel {
    let mut accel = Accel::default();
    if prims.is_empty() {
        return accel;
    }
    let mut items: Vec<BuildItem> = prims
        .iter()
        .enumerate()
        .map(|(i, t)| BuildItem {
            index: i as u32,
            centroid: t.centroid().to_array(),
            global_id: t.global_id,
            bounds: t.bounds(),
        })
        .collect();
    accel.nodes.reserve(2 * prims.len() / LEAF_SIZE + 1);
    accel.prim_order.reserve(prims.len());
    accel.root = build_node(&mut accel, &mut items, 1);
    assert!(
        accel.depth < MAX_DEPTH,
        "bvh depth {} exceeds traversal stack",
        accel.depth
    );
    accel
}

fn build_node(accel: &mut Accel, items: &mut [BuildItem], depth: usize) -> u32 {
    accel.depth = accel.depth.max(depth);
    let bounds = items.iter().fold(Aabb::EMPTY, |b, it| b.union(&it.bounds));
    let slot = accel.nodes.len() as u32;
    if items.len() <= LEAF_SIZE {
        let first = accel.prim_order.len() as u32;
        accel.prim_order.extend(items.iter().map(|it| it.index));
        accel.nodes.push(BvhNode {
            bounds,
            kind: NodeKind::Leaf {
                first,
                count: items.len() as u32,
            },
        });
        return slot;
    }

    let mut centroid_bounds = Aabb::EMPTY;
    for it in items.iter() {
        centroid_bounds.grow(crate::geom::Vec3::from_array(it.centroid));
    }
    let axis = centroid_bounds.extent().max_axis();
    items.sort_by(|a, b| {
        a.centroid[axis]
            .total_cmp(&b.centroid[axis])
            .then(a.global_id.cmp(&b.global_id))
    });
    let mid = items.len() / 2;

    accel.nodes.push(BvhNode {
        bounds,
        kind: NodeKind::Interior { left: 0, right: 0 },
    });
    let (lo, hi) = items.split_at_mut(mid);
    let left = build_node(accel, lo, depth + 1);
    let right = build_node(accel, hi, depth + 1);
    accel.nodes[slot as usize].kind = NodeKind::Interior { left, right };
    slot
}

/// Padded slab test. Returns the entry distance when the box overlaps `[tmin, limit]`.
#[inline]
fn node_entry(ray: &Ray, bounds: &Aabb, limit: f64) -> Option<f64> {
    let (t0, t1) = ray_aabb_intersect(ray, bounds)?;
    let pad = SLAB_PAD * t0.abs().max(t1.abs()).min(f64::MAX);
    let entry = t0 - pad;
    let exit = t1 + pad;
    if exit >= ray.tmin && entry <= limit {
        Some(entry)
    } else {
        None
    }
}

/// Nearest hit by `(t, global_id)` inside `[ray.tmin, ray.tmax]`, or [`HitKey::MISS`].
pub fn intersect_nearest(accel: &Accel, prims: &[Triangle], ray: &Ray) -> HitKey {
    let mut best = HitKey::MISS;
    if accel.is_empty() {
        return best;
    }
    let mut stack = [0u32; MAX_DEPTH + 1];
    let mut top = 0usize;
    if node_entry(ray, &accel.nodes[accel.root as usize].bounds, ray.tmax).is_none() {
        return best;
    }
    stack[top] = accel.root;
    top += 1;

    while top > 0 {
        top -= 1;
        let node = &accel.nodes[stack[top] as usize];
        // equal t may still improve the key through a smaller id, so prune strictly
        let limit = ray.tmax.min(best.t);
        if node_entry(ray, &node.bounds, limit).is_none() {
            continue;
        }
        match node.kind {
            NodeKind::Leaf { first, count } => {
                for &pi in &accel.prim_order[first as usize..(first + count) as usize] {
                    let tri = &prims[pi as usize];
                    if let Some(hit) = ray_triangle_intersect(ray, tri) {
                        best = best.min(HitKey::new(hit.t, tri.global_id));
                    }
                }
            }
            NodeKind::Interior { left, right } => {
                let l = node_entry(ray, &accel.nodes[left as usize].bounds, limit);
                let r = node_entry(ray, &accel.nodes[right as usize].bounds, limit);
                match (l, r) {
                    (Some(tl), Some(tr)) => {
                        // push the far child first so the near one pops next
                        let (near, far) = if tl <= tr {
                            (left, right)
                        } else {
                            (right, left)
                        };
                        stack[top] = far;
                        stack[top + 1] = near;
                        top += 2;
                    }
                    (Some(_), None) => {
                        stack[top] = left;
                        top += 1;
                    }
                    (None, Some(_)) => {
                        stack[top] = right;
                        top += 1;
                    }
                    (None, None) => {}
                }
            }
        }
    }
    best
}

/// True iff some triangle is hit strictly inside `(ray.tmin, ray.tmax)`.
pub fn intersect_any(accel: &Accel, prims: &[Triangle], ray: &Ray) -> bool {
    if accel.is_empty() {
        return false;
    }
    let mut stack = [0u32; MAX_DEPTH + 1];
    stack[0] = accel.root;
    let mut top = 1usize;
    while top > 0 {
        top -= 1;
        let node = &accel.nodes[stack[top] as usize];
        if node_entry(ray, &node.bounds, ray.tmax).is_none() {
            continue;
        }
        match node.kind {
            NodeKind::Leaf { first, count } => {
                for &pi in &accel.prim_order[first as usize..(first + count) as usize] {
                    if let Some(hit) = ray_triangle_intersect(ray, &prims[pi as usize]) {
                        if hit.t > ray.tmin && hit.t < ray.tmax {
                            return true;
                        }
                    }
                }
            }
            NodeKind::Interior { left, right } => {
                stack[top] = left;
                stack[top + 1] = right;
                top += 2;
            }
        }
    }
    false
}

/// Triangles plus the BVH built over them.
#[derive(Debug, Clone, Default)]
pub struct LocalGeometry {
    pub prims: Vec<Triangle>,
    pub accel: Accel,
}

impl LocalGeometry {
    pub fn new(prims: Vec<Triangle>) -> LocalGeometry {
        let accel = build_bvh(&prims);
        LocalGeometry { prims, accel }
    }

    pub fn nearest(&self, ray: &Ray) -> HitKey {
        intersect_nearest(&self.accel, &self.prims, ray)
    }

    pub fn any(&self, ray: &Ray) -> bool {
        intersect_any(&self.accel, &self.prims, ray)
    }

    pub fn bounds(&self) -> Aabb {
        self.accel.bounds()
    }
}
