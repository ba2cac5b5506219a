//! Map accuracy, completion, Chamfer-L1 and F-score.

use super::EvalError;
use crate::exec::{pairwise_sum, Execution};
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

/// Exact nearest-neighbor index over a fixed point set: a kd-tree split at
/// the median of the widest axis.
#[derive(Clone, Debug)]
pub struct PointIndex {
    points: Vec<Vec3>,
    nodes: Vec<IndexNode>,
}

#[derive(Clone, Debug)]
enum IndexNode {
    Split { axis: usize, value: f64, left: u32, right: u32 },
    Bucket { start: u32, end: u32 },
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut nodes = Vec::new();
        if !pts.is_empty() {
            let n = pts.len();
            build(&mut pts, 0, n, &mut nodes);
        }
        PointIndex { points: pts, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest indexed point; infinite when empty.
    pub fn nearest_distance_squared(&self, q: &Vec3) -> f64 {
        if self.nodes.is_empty() {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        let mut stack: Vec<(u32, f64)> = vec![(0, 0.0)];
        while let Some((id, bound)) = stack.pop() {
            if bound >= best {
                continue;
            }
            match self.nodes[id as usize] {
                IndexNode::Bucket { start, end } => {
                    for p in &self.points[start as usize..end as usize] {
                        best = best.min((p - q).norm_squared());
                    }
                }
                IndexNode::Split { axis, value, left, right } => {
                    let d = q[axis] - value;
                    let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                    stack.push((far, bound.max(d * d)));
                    stack.push((near, bound));
                }
            }
        }
        best
    }
}

fn build(pts: &mut [Vec3], start: usize, end: usize, nodes: &mut Vec<IndexNode>) -> u32 {
    let id = nodes.len() as u32;
    let slice = &mut pts[start..end];
    if slice.len() <= LEAF_SIZE {
        nodes.push(IndexNode::Bucket { start: start as u32, end: end as u32 });
        return id;
    }
    let (lo, hi) = slice
        .iter()
        .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let axis = (hi - lo).imax();
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let value = slice[mid][axis];
    nodes.push(IndexNode::Split { axis, value, left: 0, right: 0 });
    // Points left of `mid` are <= value, the rest >= value.
    let left = build(pts, start, start + mid, nodes);
    let right = build(pts, start + mid, end, nodes);
    nodes[id as usize] = IndexNode::Split { axis, value, left, right };
    id
}

/// Map metrics. Distances are in centimeters and the F-score in percent;
/// only nearest-neighbor distances within the overlap threshold count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub chamfer_l1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub matched_map: usize,
    pub matched_gt: usize,
    pub excluded_map: usize,
    pub excluded_gt: usize,
}

/// Nearest distance from every query point to `index`, in input order.
fn nearest_distances(index: &PointIndex, queries: &[Vec3], exec: Execution) -> Vec<f64> {
    exec.map(queries, |q| index.nearest_distance_squared(q).sqrt())
}

/// Mean of the kept distances and the fraction of them within `f_threshold`.
fn summarize(d: &[f64], overlap: f64, f_threshold: f64) -> (f64, f64, usize) {
    let kept: Vec<f64> = d.iter().copied().filter(|&x| x <= overlap).collect();
    if kept.is_empty() {
        return (0.0, 0.0, 0);
    }
    let n = kept.len() as f64;
    let inliers = kept.iter().filter(|&&x| x <= f_threshold).count() as f64;
    (pairwise_sum(&kept) / n, inliers / n, kept.len())
}

/// Compares a reconstructed map against reference points.
pub fn map_metrics(
    map: &[Vec3],
    gt: &[Vec3],
    overlap_threshold: f64,
    f_threshold: f64,
    exec: Execution,
) -> Result<MapMetrics, EvalError> {
    if map.is_empty() {
        return Err(EvalError::EmptyCloud("map"));
    }
    if gt.is_empty() {
        return Err(EvalError::EmptyCloud("ground-truth"));
    }
    if !(overlap_threshold > 0.0 && f_threshold > 0.0) {
        return Err(EvalError::InvalidParameter(format!(
            "thresholds must be positive, got {overlap_threshold} / {f_threshold}"
        )));
    }
    let (gt_index, map_index) = exec.join(|| PointIndex::new(gt), || PointIndex::new(map));
    let to_gt = nearest_distances(&gt_index, map, exec);
    let to_map = nearest_distances(&map_index, gt, exec);
    let (acc, precision, matched_map) = summarize(&to_gt, overlap_threshold, f_threshold);
    let (comp, recall, matched_gt) = summarize(&to_map, overlap_threshold, f_threshold);
    if matched_map == 0 || matched_gt == 0 {
        return Err(EvalError::NoOverlap);
    }
    let f = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let (accuracy, completion) = (acc * 100.0, comp * 100.0);
    Ok(MapMetrics {
        accuracy,
        completion,
        chamfer_l1: 0.5 * (accuracy + completion),
        precision: precision * 100.0,
        recall: recall * 100.0,
        f_score: f * 100.0,
        matched_map,
        matched_gt,
        excluded_map: map.len() - matched_map,
        excluded_gt: gt.len() - matched_gt,
    })
}
