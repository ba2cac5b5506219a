//! PCA kd-tree over one scan.
//!
//! Each node is split at its mean along the direction of largest variance.
//! Recursion stops once a node's extent along that direction is at most
//! `b_max`. Leaves summarize their points by mean, PCA normal and bounding
//! radius; they are the measurement unit of the bundle adjustment.
//!
//! Flat nodes (two standard deviations of spread along the smallest
//! principal axis below `b_min`) hand their normal down to descendants. A
//! descendant leaf adopts that normal only if its own points are still flat
//! along it; otherwise it keeps its own PCA normal.

use nalgebra::SymmetricEigen;

use crate::cloud_io::Cloud;
use crate::exec::Execution;
use crate::geometry::{Mat3, Pose, Vec3};

/// Nodes larger than this are split on both halves concurrently.
const PARALLEL_SPLIT_MIN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdParams {
    /// Maximum leaf extent along the principal axis, meters.
    pub b_max: f64,
    /// Flatness below which a node's normal is handed to its children, meters.
    pub b_min: f64,
}

impl Default for KdParams {
    fn default() -> Self {
        KdParams { b_max: 0.2, b_min: 0.1 }
    }
}

impl KdParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.b_max > self.b_min && self.b_min > 0.0) {
            return Err(format!("need b_max > b_min > 0, got {} / {}", self.b_max, self.b_min));
        }
        Ok(())
    }
}

/// Terminal node: a small planar patch of one scan, in that scan's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub mean: Vec3,
    /// Unit normal facing the sensor origin.
    pub normal: Vec3,
    /// Largest distance of a member point from `mean`.
    pub radius: f64,
    pub point_count: usize,
    /// Range standard deviation in meters; zero until the beam model runs.
    pub sigma: f64,
    pub scan_id: usize,
    pub leaf_id: usize,
    /// True when `normal` was inherited from a flat ancestor.
    pub propagated: bool,
}

#[derive(Clone, Debug)]
enum Node {
    Split { axis: Vec3, value: f64, left: u32, right: u32 },
    Leaf(u32),
}

#[derive(Clone, Debug)]
pub struct KdTree {
    scan_id: usize,
    params: KdParams,
    nodes: Vec<Node>,
    leaves: Vec<Leaf>,
}

struct Pca {
    mean: Vec3,
    /// Eigenvalues ascending.
    values: [f64; 3],
    /// Eigenvectors matching `values`.
    vectors: [Vec3; 3],
}

fn pca(points: &[Vec3]) -> Pca {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    Pca {
        mean,
        values: order.map(|i| eig.eigenvalues[i].max(0.0)),
        vectors: order.map(|i| eig.eigenvectors.column(i).normalize()),
    }
}

/// Two standard deviations of spread along `dir`.
fn thickness(points: &[Vec3], mean: &Vec3, dir: &Vec3) -> f64 {
    let var = points.iter().map(|p| (p - mean).dot(dir).powi(2)).sum::<f64>() / points.len() as f64;
    2.0 * var.sqrt()
}

enum Built {
    Split { axis: Vec3, value: f64, children: Box<(Built, Built)> },
    Leaf(Leaf),
}

struct Inherited {
    /// Normal handed down by the nearest flat ancestor.
    flat: Option<Vec3>,
    /// Own PCA normal of the parent, fallback for tiny nodes.
    parent: Option<Vec3>,
}

impl KdTree {
    pub fn build(cloud: &Cloud, params: KdParams, exec: Execution) -> KdTree {
        assert!(!cloud.points.is_empty(), "cannot build a kd-tree from an empty cloud");
        let mut points = cloud.points.clone();
        let root = build_node(&mut points, Inherited { flat: None, parent: None }, &params, cloud.scan_id, exec);
        let mut tree = KdTree { scan_id: cloud.scan_id, params, nodes: Vec::new(), leaves: Vec::new() };
        tree.flatten(root);
        tree
    }

    fn flatten(&mut self, node: Built) -> u32 {
        match node {
            Built::Leaf(mut leaf) => {
                leaf.leaf_id = self.leaves.len();
                self.leaves.push(leaf);
                self.nodes.push(Node::Leaf((self.leaves.len() - 1) as u32));
                (self.nodes.len() - 1) as u32
            }
            Built::Split { axis, value, children } => {
                let idx = self.nodes.len();
                self.nodes.push(Node::Leaf(u32::MAX));
                let (l, r) = *children;
                let left = self.flatten(l);
                let right = self.flatten(r);
                self.nodes[idx] = Node::Split { axis, value, left, right };
                idx as u32
            }
        }
    }

    pub fn scan_id(&self) -> usize {
        self.scan_id
    }

    pub fn params(&self) -> KdParams {
        self.params
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [Leaf] {
        &mut self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Index of the leaf whose mean is closest to `query` (tree frame), and
    /// the squared distance. Ties go to the lower leaf id.
    pub fn nearest_leaf(&self, query: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        // (node, lower bound on squared distance to anything below it)
        let mut stack = vec![(0u32, 0.0f64)];
        while let Some((n, bound)) = stack.pop() {
            if bound > best.1 {
                continue;
            }
            match &self.nodes[n as usize] {
                Node::Leaf(i) => {
                    let i = *i as usize;
                    let d = (self.leaves[i].mean - query).norm_squared();
                    if d < best.1 || (d == best.1 && i < best.0) {
                        best = (i, d);
                    }
                }
                Node::Split { axis, value, left, right } => {
                    let diff = axis.dot(query) - value;
                    let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                    // Slack covers rounding of leaf means lying on the plane.
                    let gap = (diff.abs() - 1e-9 * (1.0 + value.abs())).max(0.0);
                    stack.push((far, bound.max(gap * gap)));
                    stack.push((near, bound));
                }
            }
        }
        best
    }

    pub fn view(&self, pose: Pose) -> TreeView<'_> {
        TreeView::new(self, pose)
    }
}

fn build_node(points: &mut [Vec3], inherited: Inherited, params: &KdParams, scan_id: usize, exec: Execution) -> Built {
    let n = points.len();
    let fallback =
        inherited.flat.or(inherited.parent).unwrap_or_else(|| sensor_facing(&(points.iter().sum::<Vec3>() / n as f64)));

    if n == 1 {
        return Built::Leaf(make_leaf(points, fallback, inherited.flat.is_some(), scan_id));
    }

    let stats = pca(points);
    let own_normal = if n >= 3 { stats.vectors[0] } else { fallback };
    let axis = stats.vectors[2];
    let value = axis.dot(&stats.mean);
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let s = axis.dot(p);
        (lo.min(s), hi.max(s))
    });

    let flat_here = n >= 3 && 2.0 * stats.values[0].sqrt() < params.b_min;
    let flat = inherited.flat.or(if flat_here { Some(own_normal) } else { None });

    let split_at = partition(points, &axis, value);
    if hi - lo <= params.b_max || split_at == 0 || split_at == n {
        let (normal, propagated) = match inherited.flat {
            Some(f) if thickness(points, &stats.mean, &f) < params.b_min => (f, true),
            _ => (own_normal, false),
        };
        return Built::Leaf(make_leaf(points, normal, propagated, scan_id));
    }

    let (left, right) = points.split_at_mut(split_at);
    let child_exec = if n >= PARALLEL_SPLIT_MIN { exec } else { Execution::Sequential };
    let (l, r) = child_exec.join(
        || build_node(left, Inherited { flat, parent: Some(own_normal) }, params, scan_id, exec),
        || build_node(right, Inherited { flat, parent: Some(own_normal) }, params, scan_id, exec),
    );
    Built::Split { axis, value, children: Box::new((l, r)) }
}

/// Moves points with projection below `value` to the front; returns their count.
fn partition(points: &mut [Vec3], axis: &Vec3, value: f64) -> usize {
    let mut i = 0;
    for j in 0..points.len() {
        if axis.dot(&points[j]) < value {
            points.swap(i, j);
            i += 1;
        }
    }
    i
}

fn sensor_facing(mean: &Vec3) -> Vec3 {
    let norm = mean.norm();
    if norm > 0.0 {
        -mean / norm
    } else {
        Vec3::z()
    }
}

fn make_leaf(points: &[Vec3], normal: Vec3, propagated: bool, scan_id: usize) -> Leaf {
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let radius = points.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max);
    let normal = normal.normalize();
    let normal = if normal.dot(&(-mean)) < 0.0 { -normal } else { normal };
    Leaf { mean, normal, radius, point_count: points.len(), sigma: 0.0, scan_id, leaf_id: 0, propagated }
}

/// A tree seen through a sensor-to-world pose. The tree itself is never
/// modified: queries are mapped into the tree frame, leaves out of it.
#[derive(Clone, Debug)]
pub struct TreeView<'a> {
    tree: &'a KdTree,
    pose: Pose,
    inverse: Pose,
    means: Vec<Vec3>,
    normals: Vec<Vec3>,
    lower: Vec3,
    upper: Vec3,
}

impl<'a> TreeView<'a> {
    pub fn new(tree: &'a KdTree, pose: Pose) -> Self {
        let means: Vec<Vec3> = tree.leaves.iter().map(|l| pose.apply_point(&l.mean)).collect();
        let normals = tree.leaves.iter().map(|l| pose.rotate(&l.normal)).collect();
        let (lower, upper) = means
            .iter()
            .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), m| (lo.inf(m), hi.sup(m)));
        TreeView { tree, pose, inverse: pose.inverse(), means, normals, lower, upper }
    }

    pub fn tree(&self) -> &'a KdTree {
        self.tree
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn scan_id(&self) -> usize {
        self.tree.scan_id
    }

    pub fn leaf_count(&self) -> usize {
        self.means.len()
    }

    /// Leaf mean in the world frame.
    pub fn mean(&self, leaf: usize) -> &Vec3 {
        &self.means[leaf]
    }

    /// Leaf normal in the world frame.
    pub fn normal(&self, leaf: usize) -> &Vec3 {
        &self.normals[leaf]
    }

    /// The leaf as stored (tree frame).
    pub fn local(&self, leaf: usize) -> &'a Leaf {
        &self.tree.leaves[leaf]
    }

    /// World-frame copy of a leaf.
    pub fn leaf(&self, leaf: usize) -> Leaf {
        Leaf { mean: self.means[leaf], normal: self.normals[leaf], ..self.tree.leaves[leaf].clone() }
    }

    /// Nearest leaf to a world-frame query, with squared distance.
    pub fn nearest_leaf(&self, query: &Vec3) -> (usize, f64) {
        self.tree.nearest_leaf(&self.inverse.apply_point(query))
    }

    /// Squared distance from `p` to the bounding box of the world leaf means.
    pub fn bounds_distance_squared(&self, p: &Vec3) -> f64 {
        let below = (self.lower - p).sup(&Vec3::zeros());
        let above = (p - self.upper).sup(&Vec3::zeros());
        (below + above).norm_squared()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(means: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, m) in means.iter().enumerate() {
            let d = (m - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn plane_cloud(n: usize, seed: u64) -> Cloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n).map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), -1.5)).collect();
        Cloud::new(pts, 0)
    }

    fn random_cloud(n: usize, seed: u64) -> Cloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| {
                Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-2.0..2.0))
            })
            .collect();
        Cloud::new(pts, 3)
    }

    #[test]
    fn single_point_tree() {
        let cloud = Cloud::new(vec![Vec3::new(1.0, 2.0, 3.0)], 0);
        let tree = KdTree::build(&cloud, KdParams::default(), Execution::Sequential);
        assert_eq!(tree.leaf_count(), 1);
        let leaf = &tree.leaves()[0];
        assert_eq!(leaf.mean, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(leaf.radius, 0.0);
        assert!((leaf.normal.norm() - 1.0).abs() < 1e-12);
        assert_eq!(tree.nearest_leaf(&Vec3::new(-40.0, 0.0, 0.0)).0, 0);
    }

    #[test]
    fn plane_leaves_have_plane_normal() {
        let cloud = plane_cloud(10_000, 1);
        let tree = KdTree::build(&cloud, KdParams::default(), Execution::Sequential);
        assert!(tree.leaf_count() > 100);
        for leaf in tree.leaves() {
            // Sensor above the plane: normal faces +z.
            let angle = leaf.normal.dot(&Vec3::z()).clamp(-1.0, 1.0).acos();
            assert!(angle < 1e-3, "leaf {} angle {angle}", leaf.leaf_id);
        }
        let total: usize = tree.leaves().iter().map(|l| l.point_count).sum();
        assert_eq!(total, 10_000);
    }

    #[test]
    fn leaf_invariants_on_random_cloud() {
        let cloud = random_cloud(20_000, 2);
        let params = KdParams::default();
        let tree = KdTree::build(&cloud, params, Execution::Parallel);
        let total: usize = tree.leaves().iter().map(|l| l.point_count).sum();
        assert_eq!(total, cloud.len());
        for (i, leaf) in tree.leaves().iter().enumerate() {
            assert_eq!(leaf.leaf_id, i);
            assert_eq!(leaf.scan_id, 3);
            assert!((leaf.normal.norm() - 1.0).abs() < 1e-6);
            assert!(leaf.normal.dot(&(-leaf.mean)) >= 0.0);
            assert!(leaf.radius >= 0.0 && leaf.point_count >= 1);
        }
    }

    #[test]
    fn leaf_extent_and_pca_normal() {
        // Recompute membership by replaying the build on explicit point sets.
        // Dense enough that most leaves hold several points.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts: Vec<Vec3> = (0..3000)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)))
            .collect();
        let params = KdParams::default();
        let root = build_node(&mut pts, Inherited { flat: None, parent: None }, &params, 0, Execution::Sequential);
        let mut checked = 0;
        let mut stack = vec![(root, pts.as_slice())];
        while let Some((node, slice)) = stack.pop() {
            match node {
                Built::Leaf(leaf) => {
                    assert_eq!(leaf.point_count, slice.len());
                    if slice.len() >= 2 {
                        let p = pca(slice);
                        let proj: Vec<f64> = slice.iter().map(|x| p.vectors[2].dot(x)).collect();
                        let extent = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                            - proj.iter().cloned().fold(f64::INFINITY, f64::min);
                        assert!(extent <= params.b_max + 1e-12);
                    }
                    if slice.len() >= 3 && !leaf.propagated {
                        let mut cov = Mat3::zeros();
                        for x in slice {
                            let d = x - leaf.mean;
                            cov += d * d.transpose();
                        }
                        cov /= slice.len() as f64;
                        let lambda0 = pca(slice).values[0];
                        assert!((cov * leaf.normal - leaf.normal * lambda0).norm() < 1e-6);
                        checked += 1;
                    }
                }
                Built::Split { axis, value, children } => {
                    let k = slice.iter().take_while(|p| axis.dot(p) < value).count();
                    let (l, r) = slice.split_at(k);
                    assert!(r.iter().all(|p| axis.dot(p) >= value));
                    let (a, b) = *children;
                    stack.push((a, l));
                    stack.push((b, r));
                }
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn parallel_build_matches_sequential() {
        let cloud = random_cloud(30_000, 7);
        let a = KdTree::build(&cloud, KdParams::default(), Execution::Sequential);
        let b = KdTree::build(&cloud, KdParams::default(), Execution::Parallel);
        assert_eq!(a.leaves(), b.leaves());
    }

    #[test]
    fn nearest_matches_brute_force() {
        let cloud = random_cloud(20_000, 11);
        let tree = KdTree::build(&cloud, KdParams::default(), Execution::Parallel);
        let means: Vec<Vec3> = tree.leaves().iter().map(|l| l.mean).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let q =
                Vec3::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0), rng.random_range(-3.0..3.0));
            let got = tree.nearest_leaf(&q);
            let want = brute_force(&means, &q);
            assert_eq!(got.0, want.0);
            assert_eq!(got.1, want.1);
        }
    }

    #[test]
    fn equidistant_query_picks_lower_id() {
        let cloud = Cloud::new(vec![Vec3::new(-1.0, 5.0, 0.0), Vec3::new(1.0, 5.0, 0.0)], 0);
        let tree = KdTree::build(&cloud, KdParams { b_max: 0.5, b_min: 0.1 }, Execution::Sequential);
        assert_eq!(tree.leaf_count(), 2);
        let (id, d) = tree.nearest_leaf(&Vec3::new(0.0, 5.0, 0.0));
        assert_eq!(id, 0);
        assert_eq!(d, 1.0);
    }

    #[test]
    fn identity_and_translation_views() {
        let cloud = random_cloud(2000, 13);
        let tree = KdTree::build(&cloud, KdParams::default(), Execution::Sequential);
        let view = tree.view(Pose::identity());
        for (i, l) in tree.leaves().iter().enumerate() {
            assert_eq!(view.mean(i), &l.mean);
            assert_eq!(view.normal(i), &l.normal);
        }
        let t = Vec3::new(0.5, -3.0, 2.0);
        let view = tree.view(Pose::from_translation(t));
        for (i, l) in tree.leaves().iter().enumerate() {
            assert_eq!(*view.mean(i), l.mean + t);
        }
    }

    #[test]
    fn rigid_view_matches_brute_force() {
        let cloud = random_cloud(10_000, 17);
        let tree = KdTree::build(&cloud, KdParams::default(), Execution::Sequential);
        let pose = se3_exp(&Twist::new(Vec3::new(4.0, -2.0, 1.0), Vec3::new(0.3, -0.7, 1.9)));
        let view = tree.view(pose);
        let means: Vec<Vec3> = (0..view.leaf_count()).map(|i| *view.mean(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..1000 {
            let q = pose.apply_point(&Vec3::new(
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(-3.0..3.0),
            ));
            assert_eq!(view.nearest_leaf(&q).0, brute_force(&means, &q).0);
        }
    }

    #[test]
    fn bounds_distance() {
        let cloud = Cloud::new(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 1.0, 1.0)], 0);
        let tree = KdTree::build(&cloud, KdParams { b_max: 0.5, b_min: 0.1 }, Execution::Sequential);
        let view = tree.view(Pose::identity());
        assert_eq!(view.bounds_distance_squared(&Vec3::new(0.5, 0.5, 1.0)), 0.0);
        assert_eq!(view.bounds_distance_squared(&Vec3::new(3.0, 0.5, 1.0)), 4.0);
    }
}
