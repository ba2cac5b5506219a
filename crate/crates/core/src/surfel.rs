//! Surfels built from leaf groups.

use std::collections::HashMap;

use crate::association::{AssociationSet, Group, LeafRef};
use crate::exec::Execution;
use crate::geometry::Vec3;
use crate::kdtree::TreeView;

/// Mean normals shorter than this mark a degenerate group.
const MIN_NORMAL_NORM: f64 = 1e-6;

/// Oriented disc. The optimizer moves it along its normal through `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
    /// Pending displacement along `normal`, meters.
    pub offset: f64,
    pub members: Vec<LeafRef>,
}

impl Surfel {
    pub fn new(center: Vec3, normal: Vec3, radius: f64, members: Vec<LeafRef>) -> Self {
        Surfel { center, normal, radius, offset: 0.0, members }
    }

    /// Center including the pending offset.
    pub fn position(&self) -> Vec3 {
        self.center + self.normal * self.offset
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SurfelSet {
    pub surfels: Vec<Surfel>,
    /// Groups skipped because their normals cancel out.
    pub dropped: usize,
}

impl SurfelSet {
    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }
}

fn world<'v>(views: &'v [TreeView<'_>], m: &LeafRef) -> (&'v Vec3, &'v Vec3, f64) {
    let v = &views[m.scan as usize];
    let l = m.leaf as usize;
    (v.mean(l), v.normal(l), v.local(l).radius)
}

/// Mean of sign-aligned normals, normalized; `None` if they cancel.
fn mean_normal<'a>(normals: impl Iterator<Item = &'a Vec3>) -> Option<Vec3> {
    let mut sum = Vec3::zeros();
    let mut count = 0usize;
    for n in normals {
        if n.dot(&sum) < 0.0 {
            sum -= n;
        } else {
            sum += n;
        }
        count += 1;
    }
    let mean = sum / count.max(1) as f64;
    (count > 0 && mean.norm() >= MIN_NORMAL_NORM).then(|| mean.normalize())
}

fn surfel_from_group(group: &Group, views: &[TreeView<'_>]) -> Option<Surfel> {
    let n = group.members.len() as f64;
    let mut center = Vec3::zeros();
    let mut radius = 0.0f64;
    for m in &group.members {
        let (mean, _, r) = world(views, m);
        center += mean;
        radius = radius.max(r);
    }
    let normal = mean_normal(group.members.iter().map(|m| world(views, m).1))?;
    Some(Surfel::new(center / n, normal, radius, group.members.clone()))
}

/// One surfel per group: center is the mean of member means, normal the
/// normalized mean of sign-aligned member normals, radius the largest
/// member radius. Views supply the current world frame of every leaf.
pub fn create_surfels(groups: &AssociationSet, views: &[TreeView<'_>], exec: Execution) -> SurfelSet {
    let built = exec.map(&groups.groups, |g| surfel_from_group(g, views));
    let total = built.len();
    let surfels: Vec<Surfel> = built.into_iter().flatten().collect();
    let dropped = total - surfels.len();
    if dropped > 0 {
        log::debug!("dropped {dropped} surfels with degenerate normals");
    }
    SurfelSet { surfels, dropped }
}

/// Like [`create_surfels`], but a group whose member set equals that of a
/// surfel in `previous` keeps that surfel's center (committed offsets
/// included) and only gets its normal refreshed. Other groups start fresh.
/// Returns the set and the number of carried-over surfels.
pub fn update_surfels(
    previous: &SurfelSet,
    groups: &AssociationSet,
    views: &[TreeView<'_>],
    exec: Execution,
) -> (SurfelSet, usize) {
    let key = |members: &[LeafRef]| {
        let mut k = members.to_vec();
        k.sort_unstable();
        k
    };
    let known: HashMap<Vec<LeafRef>, usize> =
        previous.surfels.iter().enumerate().map(|(i, s)| (key(&s.members), i)).collect();
    let built = exec.map(&groups.groups, |g| match known.get(&key(&g.members)) {
        Some(&i) => {
            let old = &previous.surfels[i];
            mean_normal(g.members.iter().map(|m| world(views, m).1)).map(|normal| {
                (
                    Surfel {
                        center: old.position(),
                        normal,
                        radius: old.radius,
                        offset: 0.0,
                        members: g.members.clone(),
                    },
                    true,
                )
            })
        }
        None => surfel_from_group(g, views).map(|s| (s, false)),
    });
    let total = built.len();
    let mut carried = 0;
    let surfels: Vec<Surfel> = built
        .into_iter()
        .flatten()
        .map(|(s, kept)| {
            carried += kept as usize;
            s
        })
        .collect();
    let dropped = total - surfels.len();
    (SurfelSet { surfels, dropped }, carried)
}

/// Recomputes every normal from the current world normals of its backing
/// leaves. Centers are untouched. Degenerate surfels are removed and
/// counted in `dropped`.
pub fn refresh_normals(set: &mut SurfelSet, views: &[TreeView<'_>]) {
    let before = set.surfels.len();
    set.surfels.retain_mut(|s| match mean_normal(s.members.iter().map(|m| world(views, m).1)) {
        Some(n) => {
            s.normal = n;
            true
        }
        None => false,
    });
    set.dropped += before - set.surfels.len();
}

/// Moves each center by its offset along the normal and clears the offset.
pub fn commit_offsets(set: &mut SurfelSet) {
    for s in &mut set.surfels {
        s.center += s.normal * s.offset;
        s.offset = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::Aggregate;
    use crate::cloud_io::Cloud;
    use crate::geometry::{se3_exp, Pose, Twist};
    use crate::kdtree::{KdParams, KdTree};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn group(members: &[(usize, usize)], views: &[TreeView<'_>]) -> Group {
        let (s, l) = members[0];
        let mut agg = Aggregate::new(*views[s].mean(l), *views[s].normal(l), 0.0);
        for &(s, l) in &members[1..] {
            agg.add(views[s].mean(l), views[s].normal(l), 0.0);
        }
        Group { members: members.iter().map(|&(s, l)| LeafRef::new(s, l)).collect(), aggregate: agg }
    }

    fn two_point_trees(a: [Vec3; 2], b: [Vec3; 2]) -> (KdTree, KdTree) {
        let params = KdParams { b_max: 0.5, b_min: 0.1 };
        let ta = KdTree::build(&Cloud::new(a.to_vec(), 0), params, Execution::Sequential);
        let tb = KdTree::build(&Cloud::new(b.to_vec(), 1), params, Execution::Sequential);
        (ta, tb)
    }

    #[test]
    fn singleton_is_leaf_verbatim() {
        let (ta, tb) = two_point_trees(
            [Vec3::new(-5.0, 0.0, -1.0), Vec3::new(5.0, 0.0, -1.0)],
            [Vec3::new(-5.0, 0.0, -1.0), Vec3::new(5.0, 0.0, -1.0)],
        );
        let views = vec![ta.view(Pose::identity()), tb.view(Pose::identity())];
        let set = AssociationSet { groups: vec![group(&[(0, 1)], &views)] };
        let out = create_surfels(&set, &views, Execution::Sequential);
        let s = &out.surfels[0];
        let leaf = views[0].leaf(1);
        assert_eq!(s.center, leaf.mean);
        assert_eq!(s.normal, leaf.normal);
        assert_eq!(s.radius, leaf.radius);
        assert_eq!(s.offset, 0.0);
    }

    #[test]
    fn two_leaf_average() {
        // Leaves are built from single points; radii are then patched in.
        let (mut ta, mut tb) = two_point_trees(
            [Vec3::new(0.0, 0.0, 0.0), Vec3::new(9.0, 0.0, 0.0)],
            [Vec3::new(0.0, 0.0, 0.2), Vec3::new(9.0, 0.0, 0.0)],
        );
        for (t, r) in [(&mut ta, 0.1), (&mut tb, 0.15)] {
            for leaf in t.leaves_mut() {
                leaf.normal = Vec3::z();
                leaf.radius = r;
            }
        }
        let views = vec![ta.view(Pose::identity()), tb.view(Pose::identity())];
        let la = (0..2).find(|&l| views[0].mean(l).norm() < 1.0).unwrap();
        let lb = (0..2).find(|&l| views[1].mean(l).norm() < 1.0).unwrap();
        let set = AssociationSet { groups: vec![group(&[(0, la), (1, lb)], &views)] };
        let s = &create_surfels(&set, &views, Execution::Sequential).surfels[0];
        assert_relative_eq!(s.center, Vec3::new(0.0, 0.0, 0.1), epsilon = 1e-15);
        assert_eq!(s.normal, Vec3::z());
        assert_eq!(s.radius, 0.15);

        // Antipodal normals align instead of cancelling.
        for leaf in tb.leaves_mut() {
            leaf.normal = -Vec3::z();
        }
        let views = vec![ta.view(Pose::identity()), tb.view(Pose::identity())];
        let out = create_surfels(&set, &views, Execution::Sequential);
        assert_eq!(out.dropped, 0);
        assert_eq!(out.surfels[0].normal.z.abs(), 1.0);
    }

    #[test]
    fn unchanged_groups_keep_their_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> =
            (0..1500).map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), -1.0)).collect();
        let tree = KdTree::build(&Cloud::new(pts, 0), KdParams::default(), Execution::Sequential);
        let views = vec![tree.view(Pose::identity())];
        let all = AssociationSet { groups: (0..tree.leaf_count()).map(|l| group(&[(0, l)], &views)).collect() };
        let mut first = create_surfels(&all, &views, Execution::Sequential);
        first.surfels[0].offset = 0.25;
        commit_offsets(&mut first);

        // Drop one group; the others keep their surfels.
        let mut next = all.clone();
        next.groups.remove(1);
        let pose = se3_exp(&Twist::new(Vec3::zeros(), Vec3::new(0.05, 0.0, 0.0)));
        let moved = vec![tree.view(pose)];
        let (set, carried) = update_surfels(&first, &next, &moved, Execution::Parallel);
        assert_eq!(carried, next.len());
        assert_eq!(set.surfels[0].center, first.surfels[0].center);
        assert_relative_eq!(set.surfels[0].normal, *moved[0].normal(0), epsilon = 1e-15);
        assert_eq!(set.surfels[1].center, first.surfels[2].center);

        // A group with a new member set is built from scratch.
        let merged = AssociationSet { groups: vec![group(&[(0, 0), (0, 1)], &views)] };
        let (set, carried) = update_surfels(&first, &merged, &views, Execution::Sequential);
        assert_eq!(carried, 0);
        assert_eq!(set.surfels[0], create_surfels(&merged, &views, Execution::Sequential).surfels[0]);
    }

    #[test]
    fn degenerate_normals_are_dropped() {
        assert!(mean_normal([Vec3::zeros()].iter()).is_none());
        assert!(mean_normal([Vec3::x(), Vec3::y(), -Vec3::x() - Vec3::y()].iter()).is_some());
    }

    #[test]
    fn refresh_and_commit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> =
            (0..2000).map(|_| Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), -1.0)).collect();
        let tree = KdTree::build(&Cloud::new(pts, 0), KdParams::default(), Execution::Sequential);
        let views = vec![tree.view(Pose::identity())];
        let groups = AssociationSet { groups: (0..tree.leaf_count()).map(|l| group(&[(0, l)], &views)).collect() };
        let mut set = create_surfels(&groups, &views, Execution::Parallel);
        let before = set.clone();
        refresh_normals(&mut set, &views);
        assert_eq!(set, before);

        // Rotate the scan: refreshed normals follow, centers stay.
        let pose = se3_exp(&Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.4, 0.0)));
        let rotated = vec![tree.view(pose)];
        refresh_normals(&mut set, &rotated);
        for (s, b) in set.surfels.iter().zip(&before.surfels) {
            assert_eq!(s.center, b.center);
            let want = mean_normal(s.members.iter().map(|m| rotated[0].normal(m.leaf as usize)));
            assert_relative_eq!(s.normal, want.unwrap(), epsilon = 1e-15);
        }

        let mut set =
            SurfelSet { surfels: vec![Surfel::new(Vec3::new(1.0, 1.0, 1.0), Vec3::z(), 0.1, vec![])], dropped: 0 };
        commit_offsets(&mut set);
        assert_eq!(set.surfels[0].center, Vec3::new(1.0, 1.0, 1.0));
        set.surfels[0].offset = 0.05;
        commit_offsets(&mut set);
        assert_relative_eq!(set.surfels[0].center, Vec3::new(1.0, 1.0, 1.05), epsilon = 1e-15);
        assert_eq!(set.surfels[0].offset, 0.0);
        let once = set.clone();
        commit_offsets(&mut set);
        assert_eq!(set, once);
    }
}
