//! Per-class bin generation by k-means clustering.
//!
//! Every sample of a class ends up in the bin whose centroid is nearest in
//! squared Euclidean distance, ties going to the lowest bin index. Seeding is
//! k-means++ driven by [`SplitMix64`], so a partition is a pure function of
//! the ordered input rows and the seed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::FeatureMatrix;
use crate::rng::SplitMix64;

pub const DEFAULT_BINS: usize = 10;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("cannot cluster an empty set of samples")]
    EmptyInput,
    #[error("dimension mismatch: point has {point} components, centroids have {centroid}")]
    DimensionMismatch { point: usize, centroid: usize },
    #[error("invalid k-means parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub bins: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// The bins of one class.
///
/// `members[i]` is the dataset-level index of the i-th clustered row and
/// `assignment[i]` its bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPartition {
    pub class_label: String,
    /// Effective bin count after clamping to the class size.
    pub bins: usize,
    pub members: Vec<usize>,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub seed: u64,
}

impl BinPartition {
    /// Attaches the class label and dataset-level indices to a partition
    /// computed over a class-local matrix.
    pub fn labelled(mut self, class_label: &str, members: Vec<usize>) -> Self {
        assert_eq!(members.len(), self.assignment.len(), "member count must match rows");
        self.class_label = class_label.to_string();
        self.members = members;
        self
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.bins];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    /// Local row positions (into the clustered matrix) of bin `j`, ascending.
    pub fn bin_rows(&self, j: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == j)
            .map(|(i, _)| i)
            .collect()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Index of the centroid nearest to `point`; the smallest index wins ties.
pub fn assign(point: &[f64], centroids: &[Vec<f64>]) -> Result<usize, QuantizeError> {
    if centroids.is_empty() {
        return Err(QuantizeError::EmptyInput);
    }
    if let Some(c) = centroids.iter().find(|c| c.len() != point.len()) {
        return Err(QuantizeError::DimensionMismatch { point: point.len(), centroid: c.len() });
    }
    Ok(nearest(point, centroids).0)
}

pub(crate) fn to_points(features: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..features.count())
        .map(|i| features.row(i).iter().map(|&v| v as f64).collect())
        .collect()
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.below(n);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    last_positive = i;
                    acc += d;
                    if acc > target {
                        pick = Some(i);
                        break;
                    }
                }
            }
            pick.unwrap_or(last_positive)
        } else {
            // only duplicates of chosen points remain
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

fn inertia(points: &[Vec<f64>], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

/// Moves the point farthest from its centroid into each empty bin. Donor bins
/// must keep at least one member; a bin stays empty if every candidate sits
/// exactly on its centroid (duplicate-only data).
fn repair_empty(points: &[Vec<f64>], assignment: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let mut sizes = vec![0usize; centroids.len()];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    let mut repaired = false;
    for j in 0..centroids.len() {
        if sizes[j] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > best.map_or(0.0, |b| b.1) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            sizes[assignment[i]] -= 1;
            sizes[j] += 1;
            assignment[i] = j;
            centroids[j] = points[i].clone();
            repaired = true;
        }
    }
    repaired
}

fn means(points: &[Vec<f64>], assignment: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; previous.len()];
    let mut counts = vec![0usize; previous.len()];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, c), prev)| {
            if c == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|v| v / c as f64).collect()
            }
        })
        .collect()
}

/// Partitions the rows of `features` into `params.bins` bins.
///
/// The bin count is clamped to the number of rows. The returned assignment
/// always equals `assign(row, centroids)` for every row, and
/// `inertia_history` (one entry per assignment pass) is non-increasing.
pub fn kmeans_partition(
    features: &FeatureMatrix,
    params: &KMeansParams,
) -> Result<BinPartition, QuantizeError> {
    if params.bins == 0 {
        return Err(QuantizeError::InvalidParams("bins must be positive".into()));
    }
    if params.max_iters == 0 {
        return Err(QuantizeError::InvalidParams("max_iters must be positive".into()));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(QuantizeError::InvalidParams("tol must be nonnegative".into()));
    }
    let points = to_points(features);
    let n = points.len();
    if n == 0 {
        return Err(QuantizeError::EmptyInput);
    }
    let k = params.bins.min(n);
    let mut rng = SplitMix64::new(params.seed);
    let mut centroids = kmeans_plus_plus(&points, k, &mut rng);

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let assignment = loop {
        let mut assignment = assign_all(&points, &centroids);
        let repaired = repair_empty(&points, &mut assignment, &mut centroids);
        history.push(inertia(&points, &assignment, &centroids));
        if converged && !repaired {
            break assignment;
        }
        if iterations == params.max_iters {
            if repaired {
                // out of budget right after a repair: keep the nearest-centroid rule exact
                assignment = assign_all(&points, &centroids);
                history.push(inertia(&points, &assignment, &centroids));
            }
            break assignment;
        }
        let updated = means(&points, &assignment, &centroids);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        iterations += 1;
        converged = shift < params.tol || shift == 0.0;
    };

    Ok(BinPartition {
        class_label: String::new(),
        bins: k,
        members: (0..n).collect(),
        inertia: *history.last().expect("at least one pass"),
        assignment,
        centroids,
        inertia_history: history,
        iterations,
        seed: params.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f32]) -> FeatureMatrix {
        FeatureMatrix::from_rows(&values.iter().map(|&v| [v]).collect::<Vec<_>>()).unwrap()
    }

    fn params(bins: usize, seed: u64) -> KMeansParams {
        KMeansParams { bins, seed, ..KMeansParams::default() }
    }

    /// Exhaustive search over every labelling of `points` into two nonempty
    /// groups; returns the labelling with least within-group squared error.
    fn best_two_partition(points: &[f64]) -> (Vec<usize>, f64) {
        let n = points.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for g in 0..2 {
                let members: Vec<f64> =
                    (0..n).filter(|&i| labels[i] == g).map(|i| points[i]).collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        best
    }

    #[test]
    fn two_well_separated_groups() {
        let values = [0.0f32, 0.1, 10.0, 10.1];
        let oracle_points: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let (labels, cost) = best_two_partition(&oracle_points);
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
        assert_ne!(labels[0], labels[2]);

        for seed in 0..20 {
            let p = kmeans_partition(&column(&values), &params(2, seed)).unwrap();
            assert_eq!(p.assignment[0], p.assignment[1]);
            assert_eq!(p.assignment[2], p.assignment[3]);
            assert_ne!(p.assignment[0], p.assignment[2]);
            let mut cs: Vec<f64> = p.centroids.iter().map(|c| c[0]).collect();
            cs.sort_by(f64::total_cmp);
            assert!((cs[0] - 0.05).abs() < 1e-6, "{cs:?}");
            assert!((cs[1] - 10.05).abs() < 1e-6, "{cs:?}");
            assert!((p.inertia - cost).abs() < 1e-9);
        }
    }

    #[test]
    fn single_bin_is_the_mean() {
        let p = kmeans_partition(&column(&[1.0, 2.0, 6.0]), &params(1, 9)).unwrap();
        assert_eq!(p.assignment, vec![0, 0, 0]);
        assert!((p.centroids[0][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn bins_clamped_to_class_size() {
        let p = kmeans_partition(&column(&[1.0, 5.0, 9.0]), &params(5, 1)).unwrap();
        assert_eq!(p.bins, 3);
        let mut sizes = p.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 1]);
    }

    #[test]
    fn assign_ties_go_low() {
        let cs = vec![vec![0.0], vec![10.0], vec![3.0]];
        assert_eq!(assign(&[5.0], &cs[..2]).unwrap(), 0);
        assert_eq!(assign(&[3.0], &cs).unwrap(), 2);
        assert_eq!(assign(&[4.0], &cs[..2]).unwrap(), 0);
        assert_eq!(
            assign(&[1.0, 2.0], &cs),
            Err(QuantizeError::DimensionMismatch { point: 2, centroid: 1 })
        );
    }

    #[test]
    fn duplicates_do_not_loop_forever() {
        let p = kmeans_partition(&column(&[2.0; 6]), &params(3, 4)).unwrap();
        for (i, &a) in p.assignment.iter().enumerate() {
            assert_eq!(assign(&[2.0], &p.centroids).unwrap(), a, "row {i}");
        }
    }

    #[test]
    fn empty_input_rejected() {
        let points: Vec<Vec<f64>> = vec![];
        assert!(assign(&[1.0], &points).is_err());
        assert_eq!(
            kmeans_partition(&column(&[1.0]), &KMeansParams { bins: 0, ..params(1, 0) }),
            Err(QuantizeError::InvalidParams("bins must be positive".into()))
        );
    }

    proptest! {
        #[test]
        fn nearest_centroid_rule_and_monotone_inertia(
            seed in any::<u64>(),
            n in 1usize..40,
            bins in 1usize..8,
        ) {
            let mut rng = SplitMix64::new(seed);
            let rows: Vec<[f32; 3]> = (0..n)
                .map(|_| [rng.next_gaussian() as f32, rng.next_gaussian() as f32, rng.next_gaussian() as f32])
                .collect();
            let m = FeatureMatrix::from_rows(&rows).unwrap();
            let p = kmeans_partition(&m, &params(bins, seed)).unwrap();
            let points = to_points(&m);
            for (pt, &a) in points.iter().zip(&p.assignment) {
                prop_assert_eq!(assign(pt, &p.centroids).unwrap(), a);
            }
            for w in p.inertia_history.windows(2) {
                prop_assert!(w[1] - w[0] <= 1e-9, "{:?}", p.inertia_history);
            }
            prop_assert!(p.sizes().iter().all(|&s| s > 0));
            prop_assert_eq!(p.sizes().iter().sum::<usize>(), n);
            let again = kmeans_partition(&m, &params(bins, seed)).unwrap();
            prop_assert_eq!(p, again);
        }
    }
}
