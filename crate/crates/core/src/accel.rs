//! Two-level acceleration structures.
//!
//! A [`Blas`] is a binned-SAH BVH over one mesh's triangles in object space.
//! A [`Tlas`] is the same kind of BVH built over world-space bounds of
//! [`Instance`]s, each referencing a BLAS through a transform. Traversal
//! moves the ray into object space per instance so BLASes are shared.

use std::collections::HashSet;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{intersect_aabb, intersect_triangle, Aabb, Ray, Transform, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccelError {
    #[error("mesh has no triangles")]
    EmptyGeometry,
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("unknown reference: {0}")]
    UnknownReference(String),
    #[error("duplicate instance id {0}")]
    DuplicateId(u32),
}

/// Triangle mesh with single-precision storage.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Mesh {
    pub positions: Vec<[f32; 3]>,
    pub normals: Option<Vec<[f32; 3]>>,
    pub indices: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(positions: Vec<[f32; 3]>, indices: Vec<[u32; 3]>) -> Mesh {
        Mesh { positions, normals: None, indices }
    }

    pub fn with_normals(mut self, normals: Vec<[f32; 3]>) -> Mesh {
        self.normals = Some(normals);
        self
    }

    pub fn triangle_count(&self) -> usize {
        self.indices.len()
    }

    pub fn validate(&self) -> Result<(), AccelError> {
        let n = self.positions.len();
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(AccelError::InvalidMesh(format!(
                    "{} normals for {} positions",
                    normals.len(),
                    n
                )));
            }
        }
        for (i, tri) in self.indices.iter().enumerate() {
            if tri.iter().any(|&k| k as usize >= n) {
                return Err(AccelError::InvalidMesh(format!(
                    "triangle {i} indexes past {n} positions"
                )));
            }
        }
        if self.positions.iter().flatten().any(|c| !c.is_finite()) {
            return Err(AccelError::InvalidMesh("non-finite position".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, index: usize) -> [Vec3; 3] {
        let [a, b, c] = self.indices[index];
        [
            Vec3::from_f32(self.positions[a as usize]),
            Vec3::from_f32(self.positions[b as usize]),
            Vec3::from_f32(self.positions[c as usize]),
        ]
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.positions.iter().map(|&p| Vec3::from_f32(p)))
    }

    /// Object-space shading normal at barycentrics (u, v): interpolated
    /// vertex normals when present, else the face normal.
    pub fn shading_normal(&self, index: usize, u: f64, v: f64) -> Vec3 {
        let face = {
            let [a, b, c] = self.triangle(index);
            (b - a).cross(c - a).normalize()
        };
        if let Some(normals) = &self.normals {
            let [i0, i1, i2] = self.indices[index];
            let n = Vec3::from_f32(normals[i0 as usize]) * (1.0 - u - v)
                + Vec3::from_f32(normals[i1 as usize]) * u
                + Vec3::from_f32(normals[i2 as usize]) * v;
            if n.length_squared() > 1e-24 {
                return n.normalize();
            }
        }
        face
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildConfig {
    pub bins: usize,
    pub max_leaf_size: usize,
    pub traversal_cost: f64,
    pub intersection_cost: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig { bins: 16, max_leaf_size: 4, traversal_cost: 1.0, intersection_cost: 1.5 }
    }
}

/// Flat BVH node. `count == 0` marks an interior node whose children sit at
/// `first` and `first + 1`; otherwise the node is a leaf over primitive
/// slots `first..first + count` of the owning order array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BvhNode {
    pub bounds: Aabb,
    pub first: u32,
    pub count: u32,
}

impl BvhNode {
    #[inline]
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }
}

/// Node array plus the primitive permutation it indexes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bvh {
    pub nodes: Vec<BvhNode>,
    pub order: Vec<u32>,
}

#[derive(Clone, Copy)]
struct BuildPrim {
    bounds: Aabb,
    centroid: Vec3,
    index: u32,
}

#[derive(Clone, Copy)]
struct Bin {
    bounds: Aabb,
    count: usize,
}

impl Bvh {
    /// Binned-SAH build over primitive bounds. Deterministic: identical
    /// input yields identical node arrays.
    pub fn build(prim_bounds: &[Aabb], config: &BuildConfig) -> Bvh {
        if prim_bounds.is_empty() {
            return Bvh::default();
        }
        let mut prims: Vec<BuildPrim> = prim_bounds
            .iter()
            .enumerate()
            .map(|(i, b)| BuildPrim { bounds: *b, centroid: b.centroid(), index: i as u32 })
            .collect();
        let mut nodes = Vec::with_capacity(2 * prims.len() - 1);
        nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
        // (node index, begin, end)
        let mut stack = vec![(0usize, 0usize, prims.len())];
        while let Some((node, begin, end)) = stack.pop() {
            let slice = &mut prims[begin..end];
            let bounds = slice.iter().fold(Aabb::EMPTY, |b, p| b.union(&p.bounds));
            nodes[node].bounds = bounds;
            let split = choose_split(slice, &bounds, config);
            let Some(mid) = split else {
                nodes[node].first = begin as u32;
                nodes[node].count = (end - begin) as u32;
                continue;
            };
            let left = nodes.len();
            nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
            nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
            nodes[node].first = left as u32;
            nodes[node].count = 0;
            stack.push((left + 1, begin + mid, end));
            stack.push((left, begin, begin + mid));
        }
        let order = prims.iter().map(|p| p.index).collect();
        Bvh { nodes, order }
    }

    /// Re-expands bounds bottom-up from new primitive bounds, keeping the
    /// topology. Children always follow their parent in the array.
    pub fn refit(&mut self, prim_bounds: &[Aabb]) {
        for i in (0..self.nodes.len()).rev() {
            let node = self.nodes[i];
            let first = node.first as usize;
            self.nodes[i].bounds = if node.is_leaf() {
                self.order[first..first + node.count as usize]
                    .iter()
                    .fold(Aabb::EMPTY, |b, &p| b.union(&prim_bounds[p as usize]))
            } else {
                self.nodes[first].bounds.union(&self.nodes[first + 1].bounds)
            };
        }
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes.first().map(|n| n.bounds).unwrap_or(Aabb::EMPTY)
    }

    /// Checks that every node contains its children (or its primitives).
    pub fn check_containment(&self, prim_bounds: &[Aabb]) -> Result<(), String> {
        for (i, node) in self.nodes.iter().enumerate() {
            let first = node.first as usize;
            if node.is_leaf() {
                for &p in &self.order[first..first + node.count as usize] {
                    if !node.bounds.contains_box(&prim_bounds[p as usize]) {
                        return Err(format!("leaf {i} does not contain primitive {p}"));
                    }
                }
            } else {
                for c in [first, first + 1] {
                    if !node.bounds.contains_box(&self.nodes[c].bounds) {
                        return Err(format!("node {i} does not contain child {c}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        fn walk(bvh: &Bvh, i: usize) -> serde_json::Value {
            let n = &bvh.nodes[i];
            let b = serde_json::json!({
                "min": n.bounds.min.to_array(),
                "max": n.bounds.max.to_array(),
            });
            if n.is_leaf() {
                let first = n.first as usize;
                serde_json::json!({
                    "bounds": b,
                    "range": [n.first, n.first + n.count],
                    "primitives": &bvh.order[first..first + n.count as usize],
                })
            } else {
                let c = n.first as usize;
                serde_json::json!({
                    "bounds": b,
                    "children": [walk(bvh, c), walk(bvh, c + 1)],
                })
            }
        }
        if self.nodes.is_empty() {
            serde_json::Value::Null
        } else {
            walk(self, 0)
        }
    }

    /// Front-to-back traversal. `visit` is called per leaf primitive with the
    /// current closest distance limit and returns the new limit; returning a
    /// negative value stops traversal.
    #[inline]
    fn traverse<F>(&self, origin: Vec3, dir: Vec3, t_min: f64, mut t_max: f64, stats: &mut TraversalStats, mut visit: F)
    where
        F: FnMut(u32, f64) -> f64,
    {
        if self.nodes.is_empty() {
            return;
        }
        let mut stack: Vec<u32> = Vec::with_capacity(64);
        stats.node_visits += 1;
        if intersect_aabb(origin, dir, t_min, t_max, &self.nodes[0].bounds).is_none() {
            return;
        }
        stack.push(0);
        while let Some(i) = stack.pop() {
            let node = &self.nodes[i as usize];
            if node.is_leaf() {
                let first = node.first as usize;
                for &p in &self.order[first..first + node.count as usize] {
                    let next = visit(p, t_max);
                    if next < 0.0 {
                        return;
                    }
                    t_max = next;
                }
                continue;
            }
            let l = node.first;
            let r = l + 1;
            stats.node_visits += 2;
            let hl = intersect_aabb(origin, dir, t_min, t_max, &self.nodes[l as usize].bounds);
            let hr = intersect_aabb(origin, dir, t_min, t_max, &self.nodes[r as usize].bounds);
            match (hl, hr) {
                (Some((tl, _)), Some((tr, _))) => {
                    // push the farther child first so the nearer pops next
                    if tl <= tr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
                (Some(_), None) => stack.push(l),
                (None, Some(_)) => stack.push(r),
                (None, None) => {}
            }
        }
    }
}

fn choose_split(prims: &mut [BuildPrim], bounds: &Aabb, config: &BuildConfig) -> Option<usize> {
    let n = prims.len();
    if n <= 1 {
        return None;
    }
    let centroid_bounds = prims.iter().fold(Aabb::EMPTY, |b, p| b.grow(p.centroid));
    let extent = centroid_bounds.extent();
    let parent_area = bounds.surface_area();
    let leaf_cost = config.intersection_cost * n as f64;
    let bins = config.bins.max(2);

    let mut best: Option<(f64, usize, usize)> = None; // (cost, axis, split bin)
    for axis in 0..3 {
        if extent[axis] <= 0.0 {
            continue;
        }
        let lo = centroid_bounds.min[axis];
        let scale = bins as f64 / extent[axis];
        let mut table = vec![Bin { bounds: Aabb::EMPTY, count: 0 }; bins];
        for p in prims.iter() {
            let b = bin_index(p.centroid[axis], lo, scale, bins);
            table[b].count += 1;
            table[b].bounds = table[b].bounds.union(&p.bounds);
        }
        // right-to-left sweep of accumulated areas
        let mut right_area = vec![0.0; bins];
        let mut right_count = vec![0usize; bins];
        let mut acc = Aabb::EMPTY;
        let mut cnt = 0;
        for i in (1..bins).rev() {
            acc = acc.union(&table[i].bounds);
            cnt += table[i].count;
            right_area[i] = acc.surface_area();
            right_count[i] = cnt;
        }
        let mut acc = Aabb::EMPTY;
        let mut cnt = 0;
        for split in 1..bins {
            acc = acc.union(&table[split - 1].bounds);
            cnt += table[split - 1].count;
            if cnt == 0 || right_count[split] == 0 {
                continue;
            }
            let cost = if parent_area > 0.0 {
                config.traversal_cost
                    + config.intersection_cost
                        * (acc.surface_area() * cnt as f64 + right_area[split] * right_count[split] as f64)
                        / parent_area
            } else {
                config.traversal_cost + config.intersection_cost * n as f64
            };
            if best.map_or(true, |(c, _, _)| cost < c) {
                best = Some((cost, axis, split));
            }
        }
    }

    let must_split = n > config.max_leaf_size;
    match best {
        Some((cost, axis, split)) if must_split || cost < leaf_cost => {
            let lo = centroid_bounds.min[axis];
            let scale = bins as f64 / extent[axis];
            let mid = stable_partition(prims, |p| bin_index(p.centroid[axis], lo, scale, bins) < split);
            Some(mid)
        }
        None if must_split => {
            // all centroids coincide: split by position in the list
            Some(n / 2)
        }
        _ => None,
    }
}

#[inline]
fn bin_index(c: f64, lo: f64, scale: f64, bins: usize) -> usize {
    (((c - lo) * scale) as usize).min(bins - 1)
}

fn stable_partition<T: Copy, F: Fn(&T) -> bool>(items: &mut [T], pred: F) -> usize {
    let (left, right): (Vec<T>, Vec<T>) = items.iter().partition(|x| pred(x));
    let mid = left.len();
    for (slot, v) in items.iter_mut().zip(left.into_iter().chain(right)) {
        *slot = v;
    }
    mid
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraversalStats {
    /// Bounding boxes tested, BLAS and TLAS combined.
    pub node_visits: u64,
    pub triangle_tests: u64,
}

/// Bottom-level structure over one mesh. Immutable once built.
#[derive(Debug, Clone)]
pub struct Blas {
    pub mesh: Arc<Mesh>,
    pub bvh: Bvh,
    /// Triangle vertices widened to f64, indexed by mesh triangle index.
    tris: Vec<[Vec3; 3]>,
}

impl Blas {
    pub fn build(mesh: Arc<Mesh>, config: &BuildConfig) -> Result<Blas, AccelError> {
        if mesh.indices.is_empty() {
            return Err(AccelError::EmptyGeometry);
        }
        mesh.validate()?;
        let tris: Vec<[Vec3; 3]> = (0..mesh.triangle_count()).map(|i| mesh.triangle(i)).collect();
        let bounds: Vec<Aabb> = tris.iter().map(|t| Aabb::from_points(t.iter().copied())).collect();
        let bvh = Bvh::build(&bounds, config);
        Ok(Blas { mesh, bvh, tris })
    }

    pub fn bounds(&self) -> Aabb {
        self.bvh.root_bounds()
    }

    pub fn triangle_bounds(&self) -> Vec<Aabb> {
        self.tris.iter().map(|t| Aabb::from_points(t.iter().copied())).collect()
    }

    pub fn triangle(&self, index: usize) -> [Vec3; 3] {
        self.tris[index]
    }

    /// Nearest hit in object space: (t, triangle index, u, v).
    pub fn trace(&self, ray: &Ray) -> Option<(f64, u32, f64, f64)> {
        let mut best = None;
        let mut stats = TraversalStats::default();
        self.traverse(ray.origin, ray.direction, ray.t_min, ray.t_max, &mut stats, |tri, t, u, v| {
            best = Some((t, tri, u, v));
            WalkStep::Accept
        });
        best
    }

    /// Visits candidate hits front-to-back. Accepted hits shrink the
    /// interval; [`WalkStep::Stop`] ends traversal.
    fn traverse<F>(&self, origin: Vec3, dir: Vec3, t_min: f64, t_max: f64, stats: &mut TraversalStats, mut on_hit: F) -> f64
    where
        F: FnMut(u32, f64, f64, f64) -> WalkStep,
    {
        let mut limit = t_max;
        let mut tests = 0u64;
        let tris = &self.tris;
        self.bvh.traverse(origin, dir, t_min, t_max, stats, |tri, t_cur| {
            tests += 1;
            let [a, b, c] = tris[tri as usize];
            if let Some((t, u, v)) = intersect_triangle(origin, dir, t_min, t_cur, a, b, c) {
                match on_hit(tri, t, u, v) {
                    WalkStep::Accept => {
                        limit = t;
                        return t;
                    }
                    WalkStep::Reject => {}
                    WalkStep::Stop => return -1.0,
                }
            }
            t_cur
        });
        stats.triangle_tests += tests;
        limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BlasId(pub usize);

#[derive(Debug, Default, Clone)]
pub struct BlasStore {
    entries: Vec<Arc<Blas>>,
}

impl BlasStore {
    pub fn new() -> BlasStore {
        BlasStore::default()
    }

    pub fn add(&mut self, blas: Blas) -> BlasId {
        self.entries.push(Arc::new(blas));
        BlasId(self.entries.len() - 1)
    }

    pub fn add_shared(&mut self, blas: Arc<Blas>) -> BlasId {
        self.entries.push(blas);
        BlasId(self.entries.len() - 1)
    }

    pub fn get(&self, id: BlasId) -> Option<&Arc<Blas>> {
        self.entries.get(id.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mask bit carried by world geometry.
pub const MASK_WORLD: u8 = 0x01;
/// Mask bit carried by UI widget geometry.
pub const MASK_UI: u8 = 0x02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Instance {
    pub blas_id: BlasId,
    pub transform: Transform,
    pub instance_id: u32,
    pub hit_group_id: u32,
    pub mask: u8,
    pub debug_name: String,
}

#[derive(Debug, Clone)]
struct InstanceSlot {
    instance: Instance,
    blas: Arc<Blas>,
    /// `None` for singular transforms; such instances are never hit.
    inverse: Option<Transform>,
    world_bounds: Aabb,
}

impl InstanceSlot {
    fn new(instance: Instance, blas: Arc<Blas>) -> InstanceSlot {
        let inverse = instance.transform.invert().ok();
        let world_bounds = if inverse.is_some() {
            blas.bounds().transformed(&instance.transform)
        } else {
            Aabb::EMPTY
        };
        InstanceSlot { instance, blas, inverse, world_bounds }
    }
}

/// A candidate intersection offered to any-hit filters before acceptance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitCandidate {
    /// Position of the instance in the TLAS instance list.
    pub instance_index: usize,
    pub instance_id: u32,
    pub hit_group_id: u32,
    pub triangle_index: u32,
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitRecord {
    pub t: f64,
    pub instance_index: usize,
    pub instance_id: u32,
    pub triangle_index: u32,
    pub u: f64,
    pub v: f64,
    pub position: Vec3,
    /// World shading normal (interpolated when the mesh has normals).
    pub normal: Vec3,
    /// World geometric normal following the triangle winding.
    pub geometric_normal: Vec3,
    pub hit_group_id: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Tlas {
    slots: Vec<InstanceSlot>,
    bvh: Bvh,
    config: BuildConfig,
}

impl Tlas {
    pub fn build(instances: Vec<Instance>, store: &BlasStore) -> Result<Tlas, AccelError> {
        Tlas::build_with(instances, store, &BuildConfig::default())
    }

    pub fn build_with(instances: Vec<Instance>, store: &BlasStore, config: &BuildConfig) -> Result<Tlas, AccelError> {
        let mut seen = HashSet::new();
        let mut slots = Vec::with_capacity(instances.len());
        for inst in instances {
            if !seen.insert(inst.instance_id) {
                return Err(AccelError::DuplicateId(inst.instance_id));
            }
            let blas = store.get(inst.blas_id).cloned().ok_or_else(|| {
                AccelError::UnknownReference(format!(
                    "instance '{}' references missing BLAS {}",
                    inst.debug_name, inst.blas_id.0
                ))
            })?;
            slots.push(InstanceSlot::new(inst, blas));
        }
        let bounds: Vec<Aabb> = slots.iter().map(|s| s.world_bounds).collect();
        let bvh = Bvh::build(&bounds, config);
        Ok(Tlas { slots, bvh, config: *config })
    }

    /// Updates instance transforms and re-expands node bounds without
    /// changing topology. All ids are checked before anything changes.
    pub fn refit(&mut self, updates: &[(u32, Transform)]) -> Result<(), AccelError> {
        let mut targets = Vec::with_capacity(updates.len());
        for (id, t) in updates {
            let slot = self
                .slots
                .iter()
                .position(|s| s.instance.instance_id == *id)
                .ok_or_else(|| AccelError::UnknownReference(format!("instance id {id}")))?;
            targets.push((slot, *t));
        }
        for (slot, t) in targets {
            let s = &mut self.slots[slot];
            let mut inst = s.instance.clone();
            inst.transform = t;
            *s = InstanceSlot::new(inst, s.blas.clone());
        }
        let bounds = self.instance_bounds();
        self.bvh.refit(&bounds);
        Ok(())
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.slots.iter().map(|s| &s.instance)
    }

    pub fn instance(&self, index: usize) -> Option<&Instance> {
        self.slots.get(index).map(|s| &s.instance)
    }

    pub fn instance_count(&self) -> usize {
        self.slots.len()
    }

    pub fn instance_bounds(&self) -> Vec<Aabb> {
        self.slots.iter().map(|s| s.world_bounds).collect()
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn build_config(&self) -> &BuildConfig {
        &self.config
    }

    pub fn bounds(&self) -> Aabb {
        self.bvh.root_bounds()
    }

    pub fn blas_of(&self, index: usize) -> Option<&Arc<Blas>> {
        self.slots.get(index).map(|s| &s.blas)
    }

    pub fn trace_nearest(&self, ray: &Ray) -> Option<HitRecord> {
        let mut stats = TraversalStats::default();
        self.trace_nearest_filtered(ray, &mut stats, |_| true)
    }

    /// Nearest hit where `filter` accepts the candidate. Rejected candidates
    /// leave traversal untouched. Ties in `t` go to the lowest
    /// (instance index, triangle index).
    pub fn trace_nearest_filtered<F>(&self, ray: &Ray, stats: &mut TraversalStats, mut filter: F) -> Option<HitRecord>
    where
        F: FnMut(&HitCandidate) -> bool,
    {
        let mut best: Option<HitCandidate> = None;
        self.walk(ray, stats, |cand| {
            let better = match &best {
                None => true,
                Some(b) => {
                    cand.t < b.t
                        || (cand.t == b.t
                            && (cand.instance_index, cand.triangle_index) < (b.instance_index, b.triangle_index))
                }
            };
            if better && filter(cand) {
                best = Some(*cand);
                WalkStep::Accept
            } else {
                WalkStep::Reject
            }
        });
        best.map(|c| self.hit_record(ray, &c))
    }

    pub fn trace_any(&self, ray: &Ray) -> bool {
        let mut stats = TraversalStats::default();
        self.trace_any_filtered(ray, &mut stats, |_| true)
    }

    /// True iff some candidate in the interval is accepted by `filter`.
    /// Stops at the first acceptance.
    pub fn trace_any_filtered<F>(&self, ray: &Ray, stats: &mut TraversalStats, filter: F) -> bool
    where
        F: FnMut(&HitCandidate) -> bool,
    {
        self.trace_first_filtered(ray, stats, filter).is_some()
    }

    /// First accepted hit in traversal order, not necessarily the nearest.
    pub fn trace_first_filtered<F>(&self, ray: &Ray, stats: &mut TraversalStats, mut filter: F) -> Option<HitRecord>
    where
        F: FnMut(&HitCandidate) -> bool,
    {
        let mut found = None;
        self.walk(ray, stats, |cand| {
            if filter(cand) {
                found = Some(*cand);
                WalkStep::Stop
            } else {
                WalkStep::Reject
            }
        });
        found.map(|c| self.hit_record(ray, &c))
    }

    fn walk<F>(&self, ray: &Ray, stats: &mut TraversalStats, mut on_candidate: F)
    where
        F: FnMut(&HitCandidate) -> WalkStep,
    {
        let slots = &self.slots;
        let mut stopped = false;
        let mut inner = TraversalStats::default();
        self.bvh.traverse(ray.origin, ray.direction, ray.t_min, ray.t_max, stats, |slot_index, t_cur| {
            let slot = &slots[slot_index as usize];
            if slot.instance.mask & ray.mask == 0 {
                return t_cur;
            }
            let Some(inv) = &slot.inverse else {
                return t_cur;
            };
            let origin = inv.apply_point(ray.origin);
            let dir = inv.apply_dir(ray.direction);
            let mut limit = t_cur;
            slot.blas.traverse(origin, dir, ray.t_min, t_cur, &mut inner, |tri, t, u, v| {
                let cand = HitCandidate {
                    instance_index: slot_index as usize,
                    instance_id: slot.instance.instance_id,
                    hit_group_id: slot.instance.hit_group_id,
                    triangle_index: tri,
                    t,
                    u,
                    v,
                };
                let step = on_candidate(&cand);
                match step {
                    WalkStep::Accept => limit = t,
                    WalkStep::Stop => stopped = true,
                    WalkStep::Reject => {}
                }
                step
            });
            if stopped {
                -1.0
            } else {
                limit
            }
        });
        stats.node_visits += inner.node_visits;
        stats.triangle_tests += inner.triangle_tests;
    }

    fn hit_record(&self, ray: &Ray, c: &HitCandidate) -> HitRecord {
        let slot = &self.slots[c.instance_index];
        let inv = slot.inverse.as_ref().expect("hit on singular instance");
        let mesh = &slot.blas.mesh;
        let [a, b, cc] = slot.blas.triangle(c.triangle_index as usize);
        let face = (b - a).cross(cc - a);
        let shading = mesh.shading_normal(c.triangle_index as usize, c.u, c.v);
        HitRecord {
            t: c.t,
            instance_index: c.instance_index,
            instance_id: c.instance_id,
            triangle_index: c.triangle_index,
            u: c.u,
            v: c.v,
            position: ray.at(c.t),
            normal: inv.apply_dir_transposed(shading).normalize(),
            geometric_normal: inv.apply_dir_transposed(face).normalize(),
            hit_group_id: c.hit_group_id,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "instances": self.slots.iter().map(|s| serde_json::json!({
                "instance_id": s.instance.instance_id,
                "debug_name": s.instance.debug_name,
                "blas": s.instance.blas_id.0,
                "bounds": { "min": s.world_bounds.min.to_array(), "max": s.world_bounds.max.to_array() },
            })).collect::<Vec<_>>(),
            "tree": self.bvh.to_json(),
        })
    }
}

enum WalkStep {
    Accept,
    Reject,
    Stop,
}

/// Tracing through a BLAS alone, for tests and picking helpers.
pub fn trace_blas_stats(blas: &Blas, ray: &Ray, stats: &mut TraversalStats) -> Option<(f64, u32, f64, f64)> {
    let mut best = None;
    blas.traverse(ray.origin, ray.direction, ray.t_min, ray.t_max, stats, |tri, t, u, v| {
        best = Some((t, tri, u, v));
        WalkStep::Accept
    });
    best
}
