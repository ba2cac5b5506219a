//! Cross-scan leaf grouping.
//!
//! Every ordered pair of trees `(i, j)` is visited with `i` and `j`
//! ascending; the leaves of tree `i` are visited in leaf-id order. Each leaf
//! of tree `i` joins (or founds) a group, queries its nearest leaf in tree
//! `j`, and that leaf is added to the group when it is unclaimed and passes
//! the match test against the group's running surfel estimate. A leaf never
//! changes group once claimed.
//!
//! Nearest-leaf queries do not depend on the grouping, so they are computed
//! in parallel ahead of the sequential grouping pass. The result is
//! identical for both execution strategies.

use crate::exec::Execution;
use crate::geometry::Vec3;
use crate::kdtree::{Leaf, TreeView};

const UNSET: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchThresholds {
    /// Maximum center-to-leaf distance, meters.
    pub d_e: f64,
    /// Maximum distance along the surfel normal, meters.
    pub d_n: f64,
    /// Maximum angle between normals, radians.
    pub d_theta: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        MatchThresholds { d_e: 0.5, d_n: 1.0, d_theta: 5f64.to_radians() }
    }
}

impl MatchThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if [self.d_e, self.d_n, self.d_theta].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(format!("match thresholds must be positive: {self:?}"))
        }
    }
}

/// A leaf addressed by scan and leaf id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LeafRef {
    pub scan: u32,
    pub leaf: u32,
}

impl LeafRef {
    pub fn new(scan: usize, leaf: usize) -> Self {
        LeafRef { scan: scan as u32, leaf: leaf as u32 }
    }
}

/// Running surfel estimate of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    mean_sum: Vec3,
    normal_sum: Vec3,
    count: usize,
    radius: f64,
}

impl Aggregate {
    pub fn new(mean: Vec3, normal: Vec3, radius: f64) -> Self {
        Aggregate { mean_sum: mean, normal_sum: normal, count: 1, radius }
    }

    pub fn center(&self) -> Vec3 {
        self.mean_sum / self.count as f64
    }

    pub fn normal(&self) -> Vec3 {
        self.normal_sum.normalize()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds a leaf, flipping its normal into the hemisphere of the current
    /// estimate first.
    pub fn add(&mut self, mean: &Vec3, normal: &Vec3, radius: f64) {
        self.mean_sum += mean;
        if normal.dot(&self.normal_sum) < 0.0 {
            self.normal_sum -= normal;
        } else {
            self.normal_sum += normal;
        }
        self.count += 1;
        self.radius = self.radius.max(radius);
    }

    pub fn accepts(&self, mean: &Vec3, normal: &Vec3, th: &MatchThresholds) -> bool {
        let center = self.center();
        let n = self.normal();
        let d = center - mean;
        d.norm() < th.d_e
            && n.dot(&d).abs() < th.d_n
            // |cos| treats antipodal normals as aligned.
            && n.dot(normal).abs() > th.d_theta.cos()
    }
}

/// Match test of a (world-frame) leaf against a group estimate.
pub fn check_match(aggregate: &Aggregate, leaf: &Leaf, th: &MatchThresholds) -> bool {
    aggregate.accepts(&leaf.mean, &leaf.normal, th)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    /// Members in insertion order; the founder comes first.
    pub members: Vec<LeafRef>,
    pub aggregate: Aggregate,
}

impl Group {
    /// Number of distinct scans observing the group.
    pub fn scan_count(&self) -> usize {
        let mut scans: Vec<u32> = self.members.iter().map(|m| m.scan).collect();
        scans.sort_unstable();
        scans.dedup();
        scans.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssociationSet {
    pub groups: Vec<Group>,
}

impl AssociationSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn member_count(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn largest_group(&self) -> usize {
        self.groups.iter().map(|g| g.members.len()).max().unwrap_or(0)
    }
}

/// Groups leaves of all trees. Views must share a common world frame and be
/// ordered by scan.
pub fn associate(views: &[TreeView<'_>], th: &MatchThresholds, exec: Execution) -> AssociationSet {
    let k = views.len();
    let mut owner: Vec<Vec<u32>> = views.iter().map(|v| vec![UNSET; v.leaf_count()]).collect();
    let mut groups: Vec<Group> = Vec::new();
    // Queries from leaves further than this from a tree's bounding box are
    // not precomputed; they are answered on demand if ever needed.
    let reach2 = (2.0 * th.d_e).powi(2);

    for i in 0..k {
        let src = &views[i];
        let targets: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let nearest: Vec<Vec<u32>> = exec.map(&targets, |&j| {
            let dst = &views[j];
            (0..src.leaf_count())
                .map(|l| {
                    let q = src.mean(l);
                    if dst.bounds_distance_squared(q) < reach2 {
                        dst.nearest_leaf(q).0 as u32
                    } else {
                        UNSET
                    }
                })
                .collect()
        });

        for (t, &j) in targets.iter().enumerate() {
            let dst = &views[j];
            for l in 0..src.leaf_count() {
                let gid = match owner[i][l] {
                    UNSET => {
                        let gid = groups.len() as u32;
                        groups.push(Group {
                            members: vec![LeafRef::new(i, l)],
                            aggregate: Aggregate::new(*src.mean(l), *src.normal(l), src.local(l).radius),
                        });
                        owner[i][l] = gid;
                        gid
                    }
                    g => g,
                } as usize;

                let agg = &groups[gid].aggregate;
                if dst.bounds_distance_squared(&agg.center()) >= th.d_e * th.d_e {
                    // No leaf of tree j can be within d_e of the center.
                    continue;
                }
                let lj = match nearest[t][l] {
                    UNSET => dst.nearest_leaf(src.mean(l)).0,
                    n => n as usize,
                };
                if owner[j][lj] != UNSET {
                    continue;
                }
                if agg.accepts(dst.mean(lj), dst.normal(lj), th) {
                    let group = &mut groups[gid];
                    group.aggregate.add(dst.mean(lj), dst.normal(lj), dst.local(lj).radius);
                    group.members.push(LeafRef::new(j, lj));
                    owner[j][lj] = gid as u32;
                }
            }
        }
    }

    // Leaves never visited as a source (single-tree input) become singletons.
    for (i, (view, owned)) in views.iter().zip(owner.iter_mut()).enumerate() {
        for (l, slot) in owned.iter_mut().enumerate() {
            if *slot == UNSET {
                *slot = groups.len() as u32;
                groups.push(Group {
                    members: vec![LeafRef::new(i, l)],
                    aggregate: Aggregate::new(*view.mean(l), *view.normal(l), view.local(l).radius),
                });
            }
        }
    }
    AssociationSet { groups }
}
