//! Nearest-neighbour search structures: a 3D k-d tree for ICP and normal
//! estimation, and voxel hashing for fixed-radius queries and downsampling.

use std::collections::{HashMap, HashSet};

use crate::geometry::Point3;

#[derive(Debug, Clone)]
struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Static k-d tree over a point set; queries return indices into the slice
/// the tree was built from.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(points, &mut indices[..], &mut nodes);
        Self { points: points.to_vec(), nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(points: &[Point3], indices: &mut [u32], nodes: &mut Vec<Node>) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        let axis = Self::widest_axis(points, indices);
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis as usize]
                .partial_cmp(&points[b as usize][axis as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        let point = indices[mid];
        let slot = nodes.len();
        nodes.push(Node { point, axis, left: -1, right: -1 });
        let (lo, rest) = indices.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(points, lo, nodes);
        let right = Self::build_rec(points, hi, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        slot as i32
    }

    fn widest_axis(points: &[Point3], indices: &[u32]) -> u8 {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in indices {
            let p = &points[i as usize];
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let mut best = 0;
        for a in 1..3 {
            if max[a] - min[a] > max[best] - min[best] {
                best = a;
            }
        }
        best as u8
    }

    /// Index and distance of the nearest point within `max_dist`, if any.
    pub fn nearest_within(&self, query: &Point3, max_dist: f64) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut best_sq = max_dist * max_dist;
        self.nearest_rec(self.root, query, &mut best, &mut best_sq);
        best.map(|(i, d_sq)| (i, d_sq.sqrt()))
    }

    fn nearest_rec(
        &self,
        node: i32,
        query: &Point3,
        best: &mut Option<(usize, f64)>,
        best_sq: &mut f64,
    ) {
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d_sq = (p - query).norm_squared();
        if d_sq <= *best_sq {
            let better = match best {
                Some((idx, cur)) => {
                    d_sq < *cur || (d_sq == *cur && (n.point as usize) < *idx)
                }
                None => true,
            };
            if better {
                *best = Some((n.point as usize, d_sq));
                *best_sq = d_sq;
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta <= 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if near >= 0 {
            self.nearest_rec(near, query, best, best_sq);
        }
        if far >= 0 && delta * delta <= *best_sq {
            self.nearest_rec(far, query, best, best_sq);
        }
    }

    /// The `k` nearest points to `query`, sorted by ascending distance with
    /// index as the tie-break. Returns fewer when the tree is smaller than `k`.
    pub fn knn(&self, query: &Point3, k: usize) -> Vec<(usize, f64)> {
        if self.root < 0 || k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d_sq, i)| (i, d_sq.sqrt())).collect()
    }

    fn knn_rec(&self, node: i32, query: &Point3, k: usize, heap: &mut Vec<(f64, usize)>) {
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d_sq = (p - query).norm_squared();
        let entry = (d_sq, n.point as usize);
        if heap.len() < k {
            heap.push(entry);
            if heap.len() == k {
                heap.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
            }
        } else if entry < heap[0] {
            heap[0] = entry;
            let mut i = 0;
            while i + 1 < heap.len() && heap[i] < heap[i + 1] {
                heap.swap(i, i + 1);
                i += 1;
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta <= 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if near >= 0 {
            self.knn_rec(near, query, k, heap);
        }
        let bound = if heap.len() < k { f64::INFINITY } else { heap[0].0 };
        if far >= 0 && delta * delta <= bound {
            self.knn_rec(far, query, k, heap);
        }
    }
}

fn voxel_key(p: &Point3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Hash grid with cell size equal to the query radius: all neighbours within
/// `radius` of a point lie in its 3x3x3 cell neighbourhood.
#[derive(Debug)]
pub struct VoxelGrid {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl VoxelGrid {
    pub fn build(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "voxel cell size must be positive");
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(voxel_key(p, cell)).or_default().push(i as u32);
        }
        Self { cell, map }
    }

    /// Indices of all points within `radius <= cell` of `query`, including
    /// the query point itself if it is in the grid.
    pub fn within(&self, points: &[Point3], query: &Point3, radius: f64) -> Vec<u32> {
        debug_assert!(radius <= self.cell + 1e-12);
        let (cx, cy, cz) = voxel_key(query, self.cell);
        let r_sq = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.map.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            if (points[i as usize] - query).norm_squared() <= r_sq {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Keeps the first point seen in each voxel; later arrivals are dropped.
pub fn voxel_downsample(points: &[Point3], voxel: f64) -> Vec<Point3> {
    if voxel <= 0.0 {
        return points.to_vec();
    }
    let mut seen = HashSet::with_capacity(points.len());
    let mut out = Vec::new();
    for p in points {
        if seen.insert(voxel_key(p, voxel)) {
            out.push(*p);
        }
    }
    out
}

/// Persistent first-wins voxel membership, used for map deduplication.
#[derive(Debug, Default)]
pub struct VoxelSet {
    cell: f64,
    occupied: HashSet<(i64, i64, i64)>,
}

impl VoxelSet {
    pub fn new(cell: f64) -> Self {
        assert!(cell > 0.0, "voxel cell size must be positive");
        Self { cell, occupied: HashSet::new() }
    }

    /// True when `p` claims a previously empty voxel.
    pub fn insert(&mut self, p: &Point3) -> bool {
        self.occupied.insert(voxel_key(p, self.cell))
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_cloud(rng: &mut StdRng, n: usize, span: f64) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                    rng.gen_range(-span..span),
                )
            })
            .collect()
    }

    fn brute_knn(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm()))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let points = random_cloud(&mut rng, 300, 10.0);
            let tree = KdTree::build(&points);
            let q = Point3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let got = tree.knn(&q, 8);
            let want = brute_knn(&points, &q, 8);
            let got_idx: Vec<usize> = got.iter().map(|x| x.0).collect();
            let want_idx: Vec<usize> = want.iter().map(|x| x.0).collect();
            assert_eq!(got_idx, want_idx);
        }
    }

    #[test]
    fn nearest_within_respects_radius() {
        let mut rng = StdRng::seed_from_u64(5);
        let points = random_cloud(&mut rng, 500, 5.0);
        let tree = KdTree::build(&points);
        for _ in 0..100 {
            let q = Point3::new(
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
            );
            let brute = brute_knn(&points, &q, 1)[0];
            match tree.nearest_within(&q, 0.8) {
                Some((i, d)) => {
                    assert_eq!(i, brute.0);
                    assert!((d - brute.1).abs() < 1e-12);
                    assert!(d <= 0.8);
                }
                None => assert!(brute.1 > 0.8, "missed neighbour at {}", brute.1),
            }
        }
    }

    #[test]
    fn knn_handles_duplicate_points() {
        let points = vec![Point3::new(1.0, 1.0, 1.0); 6];
        let tree = KdTree::build(&points);
        let got = tree.knn(&Point3::new(1.0, 1.0, 1.0), 4);
        assert_eq!(got.len(), 4);
        for (_, d) in &got {
            assert_eq!(*d, 0.0);
        }
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let tree = KdTree::build(&[]);
        assert!(tree.nearest_within(&Point3::origin(), 1.0).is_none());
        assert!(tree.knn(&Point3::origin(), 3).is_empty());
    }

    #[test]
    fn voxel_grid_radius_query_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(9);
        let points = random_cloud(&mut rng, 400, 4.0);
        let grid = VoxelGrid::build(&points, 0.5);
        for qi in (0..points.len()).step_by(17) {
            let q = points[qi];
            let mut got = grid.within(&points, &q, 0.5);
            got.sort_unstable();
            let mut want: Vec<u32> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - q).norm() <= 0.5)
                .map(|(i, _)| i as u32)
                .collect();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn downsample_keeps_first_point_per_voxel() {
        let points = vec![
            Point3::new(0.01, 0.01, 0.01),
            Point3::new(0.05, 0.05, 0.05),
            Point3::new(0.35, 0.01, 0.01),
        ];
        let kept = voxel_downsample(&points, 0.2);
        assert_eq!(kept, vec![points[0], points[2]]);
    }

    #[test]
    fn downsample_with_zero_voxel_is_a_no_op() {
        let mut rng = StdRng::seed_from_u64(21);
        let points = random_cloud(&mut rng, 50, 2.0);
        assert_eq!(voxel_downsample(&points, 0.0), points);
    }

    #[test]
    fn voxel_set_reports_first_insertions() {
        let mut set = VoxelSet::new(0.2);
        assert!(set.insert(&Point3::new(0.0, 0.0, 0.0)));
        assert!(!set.insert(&Point3::new(0.1, 0.1, 0.1)));
        assert!(set.insert(&Point3::new(0.3, 0.0, 0.0)));
        assert_eq!(set.len(), 2);
    }
}
