//! GraphCut submodular gains and per-bin sample selection.
//!
//! For a candidate `x`, a reference set `D` and an already selected subset
//! `S ⊆ D`, the gain is
//!
//! ```text
//! G(x) = Σ_{p ∈ S} ‖f(p) − f(x)‖² − Σ_{p ∈ D∖S, p ≠ x} ‖f(p) − f(x)‖²
//! ```
//!
//! With `S = ∅` the gain is minus the total squared distance from `x` to the
//! rest of `D`, so the highest-gain members are the most central ones. The
//! default [`SelectionMode::Static`] computes these gains once per bin and
//! takes a prefix of the descending order; [`SelectionMode::Greedy`] grows
//! `S` one argmax at a time.
//!
//! Sums always run over `D` in ascending row order so that two evaluations of
//! the same gain agree bit for bit. Ties are broken by ascending sample index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::FeatureMatrix;
use crate::quantizer::{sq_dist, to_points, BinPartition};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("cannot compute gains over an empty set")]
    EmptyInput,
    #[error("candidate {0} is already selected")]
    CandidateAlreadySelected(usize),
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("partition has {members} members but feature view has {rows} rows")]
    ShapeMismatch { members: usize, rows: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Static,
    Greedy,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Static => "static",
            SelectionMode::Greedy => "greedy",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(SelectionMode::Static),
            "greedy" => Ok(SelectionMode::Greedy),
            other => Err(format!("unknown selection mode {other:?} (expected static|greedy)")),
        }
    }
}

/// Which reference set `D` a gain table was computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainScope {
    Bin,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub scope: GainScope,
    pub gains: Vec<f64>,
}

/// Symmetric matrix of squared distances, row-major.
struct Distances {
    n: usize,
    d: Vec<f64>,
}

impl Distances {
    fn new(points: &[Vec<f64>]) -> Self {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = sq_dist(&points[i], &points[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn gain(&self, x: usize, in_selected: &[bool]) -> f64 {
        let mut to_selected = 0.0;
        let mut to_rest = 0.0;
        for p in 0..self.n {
            if in_selected[p] {
                to_selected += self.get(p, x);
            } else if p != x {
                to_rest += self.get(p, x);
            }
        }
        to_selected - to_rest
    }
}

/// Gains of every row of `features` with nothing selected yet.
pub fn static_gains(features: &FeatureMatrix, scope: GainScope) -> Result<GainTable, SampleError> {
    let points = to_points(features);
    if points.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    let dist = Distances::new(&points);
    let none = vec![false; points.len()];
    let gains = (0..points.len()).map(|x| dist.gain(x, &none)).collect();
    Ok(GainTable { scope, gains })
}

/// Gain of adding row `candidate` given the rows in `selected`.
pub fn incremental_gain(
    features: &FeatureMatrix,
    candidate: usize,
    selected: &[usize],
) -> Result<f64, SampleError> {
    let n = features.count();
    for &i in selected.iter().chain(std::iter::once(&candidate)) {
        if i >= n {
            return Err(SampleError::IndexOutOfRange { index: i, len: n });
        }
    }
    if selected.contains(&candidate) {
        return Err(SampleError::CandidateAlreadySelected(candidate));
    }
    let x: Vec<f64> = features.row(candidate).iter().map(|&v| v as f64).collect();
    let mut in_selected = vec![false; n];
    for &s in selected {
        in_selected[s] = true;
    }
    let mut to_selected = 0.0;
    let mut to_rest = 0.0;
    for p in 0..n {
        let fp: Vec<f64> = features.row(p).iter().map(|&v| v as f64).collect();
        if in_selected[p] {
            to_selected += sq_dist(&fp, &x);
        } else if p != candidate {
            to_rest += sq_dist(&fp, &x);
        }
    }
    Ok(to_selected - to_rest)
}

/// Splits a budget of `budget` samples over bins of the given sizes.
///
/// Every bin gets `⌊budget/M⌋`; the remainder goes one each to the largest
/// bins (lowest index first among equals). Quota a bin cannot fill moves
/// round-robin to the next-largest bins with spare members. The budget is
/// capped at the total number of members.
pub fn bin_quotas(sizes: &[usize], budget: usize) -> Vec<usize> {
    let m = sizes.len();
    if m == 0 {
        return vec![];
    }
    let target = budget.min(sizes.iter().sum());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));

    let mut quota = vec![target / m; m];
    for &j in order.iter().take(target % m) {
        quota[j] += 1;
    }
    let mut shortfall = 0;
    for j in 0..m {
        if quota[j] > sizes[j] {
            shortfall += quota[j] - sizes[j];
            quota[j] = sizes[j];
        }
    }
    while shortfall > 0 {
        for &j in &order {
            if shortfall == 0 {
                break;
            }
            if quota[j] < sizes[j] {
                quota[j] += 1;
                shortfall -= 1;
            }
        }
    }
    quota
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSample {
    /// Dataset-level sample index.
    pub sample: usize,
    pub bin: usize,
    /// Static gain, or the marginal gain at the time of the pick in greedy mode.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub class_label: String,
    pub mode: SelectionMode,
    pub per_bin_quota: Vec<usize>,
    /// Bin 0's picks first, each bin in pick order.
    pub selected: Vec<SelectedSample>,
}

impl SelectionResult {
    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.sample).collect()
    }
}

fn rank_static(gains: &[f64], ids: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| match gains[b].partial_cmp(&gains[a]) {
        Some(Ordering::Equal) | None => ids[a].cmp(&ids[b]),
        Some(o) => o,
    });
    order
}

fn pick_greedy(dist: &Distances, quota: usize) -> Vec<(usize, f64)> {
    let mut in_selected = vec![false; dist.n];
    let mut picks = Vec::with_capacity(quota);
    for _ in 0..quota {
        let mut best: Option<(usize, f64)> = None;
        for x in 0..dist.n {
            if in_selected[x] {
                continue;
            }
            let g = dist.gain(x, &in_selected);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((x, g));
            }
        }
        let (x, g) = best.expect("quota never exceeds bin size");
        in_selected[x] = true;
        picks.push((x, g));
    }
    picks
}

/// Selects up to `budget` samples of one class across its bins.
///
/// `features` holds the class's rows in the same order as
/// `partition.members`. Gains are computed with each bin as the reference set.
pub fn select_per_class(
    features: &FeatureMatrix,
    partition: &BinPartition,
    budget: usize,
    mode: SelectionMode,
) -> Result<SelectionResult, SampleError> {
    if budget == 0 {
        return Err(SampleError::ZeroBudget);
    }
    if features.count() != partition.members.len() {
        return Err(SampleError::ShapeMismatch {
            members: partition.members.len(),
            rows: features.count(),
        });
    }
    let quotas = bin_quotas(&partition.sizes(), budget);
    let points = to_points(features);
    let mut selected = Vec::new();

    for (bin, &quota) in quotas.iter().enumerate() {
        if quota == 0 {
            continue;
        }
        let mut rows = partition.bin_rows(bin);
        rows.sort_by_key(|&r| partition.members[r]);
        let ids: Vec<usize> = rows.iter().map(|&r| partition.members[r]).collect();
        let bin_points: Vec<Vec<f64>> = rows.iter().map(|&r| points[r].clone()).collect();
        let dist = Distances::new(&bin_points);

        let picks: Vec<(usize, f64)> = match mode {
            SelectionMode::Static => {
                let none = vec![false; rows.len()];
                let gains: Vec<f64> = (0..rows.len()).map(|x| dist.gain(x, &none)).collect();
                rank_static(&gains, &ids)
                    .into_iter()
                    .take(quota)
                    .map(|x| (x, gains[x]))
                    .collect()
            }
            SelectionMode::Greedy => pick_greedy(&dist, quota),
        };
        selected.extend(picks.into_iter().map(|(x, gain)| SelectedSample {
            sample: ids[x],
            bin,
            gain,
        }));
    }

    Ok(SelectionResult {
        class_label: partition.class_label.clone(),
        mode,
        per_bin_quota: quotas,
        selected,
    })
}
