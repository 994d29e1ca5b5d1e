//! Spatial indices: a k-d tree for exact nearest-neighbour queries and a
//! bounding volume hierarchy for ray / triangle queries.

use crate::geometry::Vec3;

const KD_LEAF: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree over a point set. Queries are exact: results match a
/// brute-force scan, with ties resolved to the lowest point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= KD_LEAF {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = (self.points[i] - q).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }

    /// Squared distance from `q` to the nearest point.
    pub fn nearest_dist2(&self, q: &Vec3) -> f64 {
        self.nearest(q).map_or(f64::INFINITY, |(_, d)| d)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn merge(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    /// Slab test; returns the entry distance if the ray overlaps `[t0, t1]`.
    #[inline]
    pub fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t0: f64, t1: f64) -> Option<f64> {
        let mut tmin = t0;
        let mut tmax = t1;
        for a in 0..3 {
            let mut ta = (self.min[a] - origin[a]) * inv_dir[a];
            let mut tb = (self.max[a] - origin[a]) * inv_dir[a];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the ray lies in the slab plane: keep bounds.
            if ta.is_nan() || tb.is_nan() {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            tmin = tmin.max(ta);
            tmax = tmax.min(tb);
            if tmin > tmax {
                return None;
            }
        }
        Some(tmin)
    }
}

/// Ray / triangle intersection (Moller-Trumbore, two-sided). Returns `t`.
#[inline]
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

#[derive(Debug, Clone)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl BvhNode {
    fn bounds(&self) -> &Aabb {
        match self {
            BvhNode::Leaf { bounds, .. } | BvhNode::Inner { bounds, .. } => bounds,
        }
    }
}

/// Closest intersection along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub triangle: usize,
}

/// BVH over a triangle soup; triangle ids are positions in the input slice.
#[derive(Debug, Clone)]
pub struct Bvh {
    triangles: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

const BVH_LEAF: usize = 4;

impl Bvh {
    pub fn new(triangles: Vec<[Vec3; 3]>) -> Self {
        let mut bvh = Bvh {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        if !bvh.triangles.is_empty() {
            let centroids: Vec<Vec3> = bvh
                .triangles
                .iter()
                .map(|t| (t[0] + t[1] + t[2]) / 3.0)
                .collect();
            bvh.build(&centroids, 0, bvh.triangles.len());
        }
        bvh
    }

    pub fn triangle(&self, id: usize) -> &[Vec3; 3] {
        &self.triangles[id]
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb> {
        self.nodes.first().map(|n| *n.bounds())
    }

    fn build(&mut self, centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &i in &self.order[start..end] {
            for v in &self.triangles[i] {
                bounds.grow(v);
            }
            cbounds.grow(&centroids[i]);
        }
        let id = self.nodes.len();
        let axis = (cbounds.max - cbounds.min).imax();
        if end - start <= BVH_LEAF || cbounds.max[axis] - cbounds.min[axis] <= 0.0 {
            self.nodes.push(BvhNode::Leaf { bounds, start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis])
        });
        self.nodes.push(BvhNode::Leaf {
            bounds,
            start: 0,
            end: 0,
        });
        let left = self.build(centroids, start, mid);
        let right = self.build(centroids, mid, end);
        self.nodes[id] = BvhNode::Inner {
            bounds,
            left,
            right,
        };
        id
    }

    /// Nearest hit with `t` in `[t_min, t_max]`; ties go to the lower triangle id.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let limit = best.map_or(t_max, |b| b.t);
            if self.nodes[n].bounds().hit(origin, &inv, t_min, limit).is_none() {
                continue;
            }
            match self.nodes[n] {
                BvhNode::Leaf { start, end, .. } => {
                    for &i in &self.order[start..end] {
                        let [a, b, c] = &self.triangles[i];
                        if let Some(t) = ray_triangle(origin, dir, a, b, c) {
                            if t < t_min || t > t_max {
                                continue;
                            }
                            let better = match best {
                                None => true,
                                Some(h) => t < h.t || (t == h.t && i < h.triangle),
                            };
                            if better {
                                best = Some(RayHit { t, triangle: i });
                            }
                        }
                    }
                }
                BvhNode::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }

    /// Brute-force version of [`Bvh::intersect`], used as an oracle.
    pub fn intersect_brute_force(
        &self,
        origin: &Vec3,
        dir: &Vec3,
        t_min: f64,
        t_max: f64,
    ) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (i, [a, b, c]) in self.triangles.iter().enumerate() {
            if let Some(t) = ray_triangle(origin, dir, a, b, c) {
                if t >= t_min && t <= t_max && best.is_none_or(|h| t < h.t) {
                    best = Some(RayHit { t, triangle: i });
                }
            }
        }
        best
    }
}
