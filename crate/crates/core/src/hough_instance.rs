//! Instance segmentation from centroid votes.
//!
//! Every instance-class pixel `c` casts a vote `c + x̂` where `x̂` is its
//! predicted offset to the instance centroid. Votes are ordered with OPTICS,
//! clusters are cut from the reachability plot at a flat threshold, and every
//! masked pixel is assigned to the cluster centre nearest to its vote.

use ordered_float::OrderedFloat;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use thiserror::Error;

use crate::textio::fmt_sig9;

/// Marker for undefined core and reachability distances.
pub const UNDEFINED: f64 = f64::INFINITY;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HoughError {
    #[error("min_pts must be at least 2, got {0}")]
    MinPts(usize),
    #[error("eps must be positive, got {0}")]
    Eps(f64),
    #[error("eps_prime {eps_prime} must be positive and at most eps {eps}")]
    EpsPrime { eps_prime: f64, eps: f64 },
    #[error("vote set is empty")]
    NoVotes,
    #[error("field length {got} does not match {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoteSet {
    /// `(row, col)` vote positions.
    pub points: Vec<[f64; 2]>,
    /// Pixel that cast each vote.
    pub source_pixels: Vec<(usize, usize)>,
}

impl VoteSet {
    /// Votes `pixel + vector` for every masked pixel of a row-major field.
    pub fn from_field(vectors: &[[f64; 2]], mask: &[bool], width: usize) -> Self {
        let mut votes = VoteSet::default();
        for (p, (v, _)) in vectors.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
            let (r, c) = (p / width, p % width);
            votes.points.push([r as f64 + v[0], c as f64 + v[1]]);
            votes.source_pixels.push((r, c));
        }
        votes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachabilityOrdering {
    /// Point indices in processing order.
    pub order: Vec<usize>,
    /// Reachability per position in `order`.
    pub reachability: Vec<f64>,
    /// Core distance per point index.
    pub core_distance: Vec<f64>,
    pub min_pts: usize,
    pub eps: f64,
}

impl ReachabilityOrdering {
    /// `reachability.csv` debug dump with `inf` for undefined distances.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,point_index,reachability,core_distance\n");
        for (pos, &i) in self.order.iter().enumerate() {
            let _ = writeln!(
                out,
                "{pos},{i},{},{}",
                fmt_sig9(self.reachability[pos]),
                fmt_sig9(self.core_distance[i])
            );
        }
        out
    }
}

/// OPTICS ordering with Euclidean distance. Neighbourhoods include the
/// point itself; the seed queue pops the smallest reachability, ties to the
/// lowest point index.
pub fn optics_order(votes: &VoteSet, min_pts: usize, eps: f64) -> Result<ReachabilityOrdering, HoughError> {
    if min_pts < 2 {
        return Err(HoughError::MinPts(min_pts));
    }
    if !(eps > 0.0) {
        return Err(HoughError::Eps(eps));
    }
    if votes.is_empty() {
        return Err(HoughError::NoVotes);
    }
    let pts = &votes.points;
    let n = pts.len();
    let neighbors = |i: usize| -> Vec<(usize, f64)> {
        (0..n)
            .filter_map(|j| {
                let d = dist(pts[i], pts[j]);
                (d <= eps).then_some((j, d))
            })
            .collect()
    };
    let core_of = |nb: &[(usize, f64)]| -> f64 {
        if nb.len() < min_pts {
            return UNDEFINED;
        }
        let mut ds: Vec<f64> = nb.iter().map(|&(_, d)| d).collect();
        ds.select_nth_unstable_by(min_pts - 1, f64::total_cmp);
        ds[min_pts - 1]
    };

    let mut processed = vec![false; n];
    let mut reach = vec![UNDEFINED; n];
    let mut core_distance = vec![UNDEFINED; n];
    let mut order = Vec::with_capacity(n);
    let mut reachability = Vec::with_capacity(n);

    let update = |nb: &[(usize, f64)],
                      core: f64,
                      processed: &[bool],
                      reach: &mut [f64],
                      seeds: &mut BTreeSet<(OrderedFloat<f64>, usize)>| {
        for &(o, d) in nb {
            if processed[o] {
                continue;
            }
            let new_reach = core.max(d);
            if reach[o] == UNDEFINED {
                reach[o] = new_reach;
                seeds.insert((OrderedFloat(new_reach), o));
            } else if new_reach < reach[o] {
                seeds.remove(&(OrderedFloat(reach[o]), o));
                reach[o] = new_reach;
                seeds.insert((OrderedFloat(new_reach), o));
            }
        }
    };

    for start in 0..n {
        if processed[start] {
            continue;
        }
        let nb = neighbors(start);
        processed[start] = true;
        core_distance[start] = core_of(&nb);
        order.push(start);
        reachability.push(UNDEFINED);
        if core_distance[start] == UNDEFINED {
            continue;
        }
        let mut seeds = BTreeSet::new();
        update(&nb, core_distance[start], &processed, &mut reach, &mut seeds);
        while let Some((r, q)) = seeds.pop_first() {
            let nb = neighbors(q);
            processed[q] = true;
            core_distance[q] = core_of(&nb);
            order.push(q);
            reachability.push(r.0);
            if core_distance[q] != UNDEFINED {
                update(&nb, core_distance[q], &processed, &mut reach, &mut seeds);
            }
        }
    }

    Ok(ReachabilityOrdering {
        order,
        reachability,
        core_distance,
        min_pts,
        eps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabeling {
    /// Cluster id per point; 0 is noise.
    pub labels: Vec<u32>,
    /// Mean vote of cluster `k` at index `k - 1`.
    pub centers: Vec<[f64; 2]>,
}

impl InstanceLabeling {
    pub fn num_clusters(&self) -> usize {
        self.centers.len()
    }
}

/// Flat-threshold cluster extraction at `eps_prime`.
///
/// Walking the ordering, a point whose reachability exceeds `eps_prime`
/// opens a new cluster when its own core distance is within `eps_prime`,
/// otherwise it is noise; every other point joins the current cluster.
/// Clusters with fewer than `min_pts` members become noise, where members
/// count every point within `eps_prime` of one of the cluster's core points
/// (border points claimed by an earlier cluster still count).
pub fn extract_clusters(
    ordering: &ReachabilityOrdering,
    votes: &VoteSet,
    eps_prime: f64,
) -> Result<InstanceLabeling, HoughError> {
    if !(eps_prime > 0.0 && eps_prime <= ordering.eps) {
        return Err(HoughError::EpsPrime {
            eps_prime,
            eps: ordering.eps,
        });
    }
    let n = ordering.core_distance.len();
    if votes.len() != n {
        return Err(HoughError::Shape {
            expected: n,
            got: votes.len(),
        });
    }
    let mut raw = vec![0u32; n];
    let mut current = 0u32;
    let mut next = 0u32;
    for (pos, &i) in ordering.order.iter().enumerate() {
        if ordering.reachability[pos] > eps_prime {
            if ordering.core_distance[i] <= eps_prime {
                next += 1;
                current = next;
                raw[i] = current;
            } else {
                current = 0;
                raw[i] = 0;
            }
        } else {
            raw[i] = current;
        }
    }
    let core: Vec<usize> = (0..n)
        .filter(|&i| raw[i] != 0 && ordering.core_distance[i] <= eps_prime)
        .collect();
    let mut sizes = vec![0usize; next as usize + 1];
    let mut counted = vec![u32::MAX; n];
    for k in 1..=next {
        for &i in core.iter().filter(|&&i| raw[i] == k) {
            for (c, &q) in counted.iter_mut().zip(&votes.points) {
                if *c != k && dist(votes.points[i], q) <= eps_prime {
                    *c = k;
                    sizes[k as usize] += 1;
                }
            }
        }
    }
    // Renumber surviving clusters consecutively in order of appearance.
    let mut remap = vec![0u32; next as usize + 1];
    let mut kept = 0u32;
    for k in 1..=next as usize {
        if sizes[k] >= ordering.min_pts {
            kept += 1;
            remap[k] = kept;
        }
    }
    let labels: Vec<u32> = raw.iter().map(|&l| remap[l as usize]).collect();
    let mut sums = vec![([0.0f64, 0.0f64], 0usize); kept as usize];
    for (p, &l) in labels.iter().enumerate() {
        if l > 0 {
            let e = &mut sums[l as usize - 1];
            e.0[0] += votes.points[p][0];
            e.0[1] += votes.points[p][1];
            e.1 += 1;
        }
    }
    let centers = sums
        .into_iter()
        .map(|(s, k)| [s[0] / k as f64, s[1] / k as f64])
        .collect();
    Ok(InstanceLabeling { labels, centers })
}

/// Index (1-based) of the centre nearest to `vote`; ties go to the lower id.
pub fn nearest_center(vote: [f64; 2], centers: &[[f64; 2]]) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (k, &c) in centers.iter().enumerate() {
        let d = dist(vote, c);
        if d < best.0 {
            best = (d, k as u32 + 1);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub min_pts: usize,
    pub eps: f64,
    pub eps_prime: f64,
}

impl SegmentParams {
    /// `eps` defaults to the image diagonal so the ordering is unrestricted.
    pub fn for_image(width: usize, height: usize, min_pts: usize, eps_prime: f64) -> Self {
        Self {
            min_pts,
            eps: ((width * width + height * height) as f64).sqrt(),
            eps_prime,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Instance id per pixel, 0 outside the mask.
    pub ids: Vec<u32>,
    pub votes: VoteSet,
    pub ordering: Option<ReachabilityOrdering>,
    pub labeling: Option<InstanceLabeling>,
}

impl Segmentation {
    pub fn num_instances(&self) -> usize {
        self.labeling.as_ref().map_or(0, InstanceLabeling::num_clusters)
    }
}

/// Full pipeline; also returns the intermediate ordering and labeling.
pub fn segment_detailed(
    vectors: &[[f64; 2]],
    mask: &[bool],
    width: usize,
    params: SegmentParams,
) -> Result<Segmentation, HoughError> {
    if vectors.len() != mask.len() {
        return Err(HoughError::Shape {
            expected: mask.len(),
            got: vectors.len(),
        });
    }
    let votes = VoteSet::from_field(vectors, mask, width);
    let mut ids = vec![0u32; mask.len()];
    if votes.is_empty() {
        return Ok(Segmentation {
            ids,
            votes,
            ordering: None,
            labeling: None,
        });
    }
    let ordering = optics_order(&votes, params.min_pts, params.eps)?;
    let labeling = extract_clusters(&ordering, &votes, params.eps_prime)?;
    if labeling.num_clusters() > 0 {
        for (v, &(r, c)) in votes.points.iter().zip(&votes.source_pixels) {
            ids[r * width + c] = nearest_center(*v, &labeling.centers);
        }
    }
    Ok(Segmentation {
        ids,
        votes,
        ordering: Some(ordering),
        labeling: Some(labeling),
    })
}

/// Instance id map from predicted centroid offsets. Every masked pixel gets
/// the id of the cluster centre nearest its vote (noise votes included);
/// with no clusters every pixel stays 0.
pub fn segment_instances(
    vectors: &[[f64; 2]],
    mask: &[bool],
    width: usize,
    params: SegmentParams,
) -> Result<Vec<u32>, HoughError> {
    segment_detailed(vectors, mask, width, params).map(|s| s.ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn votes(points: &[[f64; 2]]) -> VoteSet {
        VoteSet {
            points: points.to_vec(),
            source_pixels: (0..points.len()).map(|i| (0, i)).collect(),
        }
    }

    #[test]
    fn too_few_points_are_all_undefined() {
        let o = optics_order(&votes(&[[0.0, 0.0], [1.0, 0.0]]), 3, 10.0).unwrap();
        assert!(o.core_distance.iter().all(|&d| d == UNDEFINED));
        assert!(o.reachability.iter().all(|&d| d == UNDEFINED));
        assert_eq!(o.order, vec![0, 1]);
    }

    #[test]
    fn two_points_hand_trace() {
        let d = 2.5;
        let o = optics_order(&votes(&[[0.0, 0.0], [0.0, d]]), 2, 10.0).unwrap();
        assert_eq!(o.core_distance, vec![d, d]);
        assert_eq!(o.order, vec![0, 1]);
        assert_eq!(o.reachability[0], UNDEFINED);
        assert_eq!(o.reachability[1], d);
    }

    #[test]
    fn ordering_is_a_permutation_and_deterministic() {
        let pts: Vec<[f64; 2]> = (0..30).map(|i| [(i * 7 % 11) as f64, (i * 3 % 5) as f64]).collect();
        let a = optics_order(&votes(&pts), 3, 2.0).unwrap();
        let mut sorted = a.order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..30).collect::<Vec<_>>());
        assert_eq!(a, optics_order(&votes(&pts), 3, 2.0).unwrap());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        // Point 0 at the origin, points 1..=3 all at distance 1.
        let pts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let o = optics_order(&votes(&pts), 2, 5.0).unwrap();
        assert_eq!(o.order[..2], [0, 1]);
    }

    #[test]
    fn one_cluster_when_everything_is_close() {
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [0.1 * i as f64, 0.0]).collect();
        let v = votes(&pts);
        let o = optics_order(&v, 3, 10.0).unwrap();
        let l = extract_clusters(&o, &v, 1.0).unwrap();
        assert_eq!(l.labels, vec![1; 6]);
        assert_eq!(l.num_clusters(), 1);
        assert!((l.centers[0][0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn isolated_point_is_noise() {
        let mut pts: Vec<[f64; 2]> = (0..5).map(|i| [0.0, 0.2 * i as f64]).collect();
        pts.push([50.0, 50.0]);
        let v = votes(&pts);
        let o = optics_order(&v, 3, 100.0).unwrap();
        let l = extract_clusters(&o, &v, 1.0).unwrap();
        assert_eq!(l.labels[5], 0);
        assert!(l.labels[..5].iter().all(|&x| x == 1));
    }

    #[test]
    fn two_blobs_give_two_clusters() {
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push([0.3 * (i % 3) as f64, 0.3 * (i / 3) as f64]);
            pts.push([20.0 + 0.3 * (i % 3) as f64, 5.0 + 0.3 * (i / 3) as f64]);
        }
        let v = votes(&pts);
        let o = optics_order(&v, 4, 100.0).unwrap();
        // A spike larger than the gap separates the valleys.
        let spike = o.reachability[1..].iter().cloned().fold(0.0, f64::max);
        assert!(spike > 19.0);
        let l = extract_clusters(&o, &v, 2.0).unwrap();
        assert_eq!(l.num_clusters(), 2);
        assert!(l.labels.iter().all(|&x| x > 0));
        assert_ne!(l.labels[0], l.labels[1]);
    }

    #[test]
    fn argument_validation() {
        let v = votes(&[[0.0, 0.0]]);
        assert_eq!(optics_order(&v, 1, 1.0), Err(HoughError::MinPts(1)));
        assert!(optics_order(&v, 2, 0.0).is_err());
        assert_eq!(optics_order(&votes(&[]), 2, 1.0), Err(HoughError::NoVotes));
        let o = optics_order(&v, 2, 1.0).unwrap();
        assert!(extract_clusters(&o, &v, 2.0).is_err());
    }

    #[test]
    fn empty_mask_gives_zero_map() {
        let ids = segment_instances(&[[0.0, 0.0]; 9], &[false; 9], 3, SegmentParams::for_image(3, 3, 5, 1.0)).unwrap();
        assert_eq!(ids, vec![0; 9]);
    }

    #[test]
    fn no_clusters_leaves_pixels_unlabeled() {
        let mask = [true, true, false, false];
        let ids = segment_instances(&[[0.0, 0.0]; 4], &mask, 2, SegmentParams::for_image(2, 2, 5, 1.0)).unwrap();
        assert_eq!(ids, vec![0; 4]);
    }

    #[test]
    fn noise_votes_join_the_nearest_cluster() {
        // A 3x3 block voting for its centre plus one stray vote.
        let w = 5;
        let mut vectors = vec![[0.0, 0.0]; 25];
        let mut mask = vec![false; 25];
        for r in 0..3 {
            for c in 0..3 {
                vectors[r * w + c] = [1.0 - r as f64, 1.0 - c as f64];
                mask[r * w + c] = true;
            }
        }
        mask[24] = true;
        vectors[24] = [-1.0, -1.0];
        let ids = segment_instances(&vectors, &mask, w, SegmentParams::for_image(5, 5, 4, 0.5)).unwrap();
        assert!(mask.iter().zip(&ids).all(|(&m, &id)| m == (id == 1)));
    }

    #[test]
    fn reachability_dump_uses_inf() {
        let v = votes(&[[0.0, 0.0], [3.0, 4.0]]);
        let o = optics_order(&v, 2, 10.0).unwrap();
        assert_eq!(
            o.to_csv(),
            "position,point_index,reachability,core_distance\n0,0,inf,5\n1,1,5,5\n"
        );
    }
}
