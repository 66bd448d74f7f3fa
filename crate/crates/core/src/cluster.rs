//! DBSCAN over unit-norm embeddings with cosine distance.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-per-item feature vectors, every row unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f64>);

const UNIT_TOLERANCE: f64 = 1e-6;

impl EmbeddingMatrix {
    /// Wraps rows that are already unit-norm (within 1e-6).
    pub fn from_unit_rows(rows: Array2<f64>) -> Result<Self> {
        for (i, r) in rows.outer_iter().enumerate() {
            let n = r.dot(&r).sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { row: i });
            }
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::NotUnitNorm { row: i, norm: n });
            }
        }
        Ok(EmbeddingMatrix(rows))
    }

    /// Normalizes every row; a zero row is an error.
    pub fn normalized(mut rows: Array2<f64>) -> Result<Self> {
        for (i, mut r) in rows.outer_iter_mut().enumerate() {
            let n = r.dot(&r).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { row: i });
            }
            r /= n;
        }
        Ok(EmbeddingMatrix(rows))
    }

    pub fn from_f32_rows<'a>(
        rows: impl IntoIterator<Item = &'a [f32]>,
        dim: usize,
    ) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding of dimension {} (expected {dim})",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| f64::from(v)));
            n += 1;
        }
        let a = Array2::from_shape_vec((n, dim), data).expect("shape checked");
        Self::normalized(a)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> EmbeddingMatrix {
        EmbeddingMatrix(self.0.select(Axis(0), idx))
    }
}

/// `d_ij = 1 − ⟨x_i, x_j⟩`, exactly symmetric with a zero diagonal.
/// Rounding noise from normalisation makes identical rows land a few ulps
/// away from zero distance.
const ROUNDING: f64 = 1e-12;

fn snap(d: f64) -> f64 {
    if d < ROUNDING {
        0.0
    } else {
        d
    }
}

pub fn pairwise_cosine_distance(x: &EmbeddingMatrix) -> Array2<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            ((i + 1)..n)
                .map(|j| snap(1.0 - xi.dot(&x.row(j))))
                .collect()
        })
        .collect();
    let mut d = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            let j = i + 1 + k;
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// How the DBSCAN radius is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EpsPolicy {
    Fixed(f64),
    /// The given percentile (in percent) of all pairwise distances.
    Percentile(f64),
}

impl FromStr for EpsPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad eps policy `{s}` (expected pN or fixed:V)"));
        let policy = if let Some(v) = s.strip_prefix("fixed:") {
            EpsPolicy::Fixed(v.parse().map_err(|_| bad())?)
        } else if let Some(v) = s.strip_prefix('p') {
            EpsPolicy::Percentile(v.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        policy.validate()?;
        Ok(policy)
    }
}

impl TryFrom<String> for EpsPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EpsPolicy> for String {
    fn from(p: EpsPolicy) -> String {
        p.to_string()
    }
}

impl fmt::Display for EpsPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpsPolicy::Fixed(v) => write!(f, "fixed:{v}"),
            EpsPolicy::Percentile(p) => write!(f, "p{p}"),
        }
    }
}

impl EpsPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EpsPolicy::Fixed(e) if !(e > 0.0 && e <= 2.0) => {
                Err(Error::Config(format!("eps must lie in (0, 2], got {e}")))
            }
            EpsPolicy::Percentile(p) if !(p > 0.0 && p < 100.0) => Err(Error::Config(format!(
                "eps percentile must lie in (0, 100), got {p}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub eps_policy: EpsPolicy,
    pub min_pts: usize,
}

pub const DEFAULT_MIN_PTS: usize = 4;
pub const DEFAULT_EPS_INTRA: f64 = 0.6;
pub const DEFAULT_EPS_PERCENTILE: f64 = 0.1;

impl ClusterConfig {
    pub fn fixed(eps: f64, min_pts: usize) -> Self {
        ClusterConfig {
            eps_policy: EpsPolicy::Fixed(eps),
            min_pts,
        }
    }

    /// Defaults for clustering frames inside one tracklet.
    pub fn intra() -> Self {
        Self::fixed(DEFAULT_EPS_INTRA, DEFAULT_MIN_PTS)
    }

    /// Defaults for clustering pooled tracklet features.
    pub fn inter() -> Self {
        ClusterConfig {
            eps_policy: EpsPolicy::Percentile(DEFAULT_EPS_PERCENTILE),
            min_pts: DEFAULT_MIN_PTS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_pts == 0 {
            return Err(Error::Config("min_pts must be >= 1".into()));
        }
        self.eps_policy.validate()
    }

    pub fn resolve_eps(&self, dist: ArrayView2<'_, f64>) -> Result<f64> {
        self.validate()?;
        match self.eps_policy {
            EpsPolicy::Fixed(e) => Ok(e),
            EpsPolicy::Percentile(p) => eps_from_distances(dist, p),
        }
    }
}

/// Per-point cluster index, `None` for noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }
}

pub fn dbscan(x: &EmbeddingMatrix, eps: f64, min_pts: usize) -> ClusterAssignment {
    dbscan_precomputed(pairwise_cosine_distance(x).view(), eps, min_pts)
}

/// DBSCAN on a precomputed symmetric distance matrix.
///
/// A point's neighborhood is every point (itself included) at distance
/// `<= eps`; it is a core point when the neighborhood has at least `min_pts`
/// members. Points are visited in input order, each cluster is fully expanded
/// before the next one starts, and a border point stays with the first
/// cluster that reaches it.
pub fn dbscan_precomputed(
    dist: ArrayView2<'_, f64>,
    eps: f64,
    min_pts: usize,
) -> ClusterAssignment {
    let n = dist.nrows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            dist.row(i)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d <= eps)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut n_clusters = 0;
    let mut queue = std::collections::VecDeque::new();

    for p in 0..n {
        if visited[p] {
            continue;
        }
        visited[p] = true;
        if neighbors[p].len() < min_pts {
            continue;
        }
        let c = n_clusters;
        n_clusters += 1;
        labels[p] = Some(c);
        queue.extend(neighbors[p].iter().copied());
        while let Some(q) = queue.pop_front() {
            if labels[q].is_none() {
                labels[q] = Some(c);
            }
            if !visited[q] {
                visited[q] = true;
                if neighbors[q].len() >= min_pts {
                    queue.extend(neighbors[q].iter().copied());
                }
            }
        }
    }
    ClusterAssignment { labels, n_clusters }
}

/// Linear-interpolated percentile (`p` in percent) of the off-diagonal
/// pairwise cosine distances.
pub fn compute_eps(x: &EmbeddingMatrix, percentile: f64) -> Result<f64> {
    eps_from_distances(pairwise_cosine_distance(x).view(), percentile)
}

/// Same as [`compute_eps`] on a precomputed matrix. When the percentile
/// lands on a zero distance while some points differ, the smallest positive
/// distance is returned instead so the radius stays usable.
pub fn eps_from_distances(dist: ArrayView2<'_, f64>, percentile: f64) -> Result<f64> {
    let n = dist.nrows();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 points to derive eps, got {n}"
        )));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::Config(format!(
            "eps percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let mut values: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            values.push(dist[[i, j]]);
        }
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let v = interpolated_percentile(&mut values, percentile);
    if v > 0.0 {
        Ok(v)
    } else {
        Ok(values
            .iter()
            .copied()
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min))
    }
}

/// Percentile with linear interpolation between closest ranks
/// (rank = p/100·(n−1)). Reorders `values`.
pub fn interpolated_percentile(values: &mut [f64], percentile: f64) -> f64 {
    let rank = percentile / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_v, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return lo_v;
    }
    let hi_v = rest.iter().copied().fold(f64::INFINITY, f64::min);
    lo_v + frac * (hi_v - lo_v)
}
