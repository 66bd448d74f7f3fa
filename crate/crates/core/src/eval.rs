//! Retrieval metrics and pseudo-label quality.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::PseudoLabeling;
use crate::cluster::EmbeddingMatrix;
use crate::dataset::{CameraId, Dataset, PersonId};
use crate::error::{Error, Result};

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ hits/k` as a reduced fraction, or `None` once it overflows.
fn exact_precision_sum(ranked_relevance: &[bool]) -> Option<(u128, u128)> {
    let (mut num, mut den, mut hits) = (0u128, 1u128, 0u128);
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            let k = k as u128 + 1;
            let g = gcd(den, k);
            let l = den.checked_mul(k / g)?;
            num = num
                .checked_mul(l / den)?
                .checked_add(hits.checked_mul(l / k)?)?;
            den = l;
            let g = gcd(num, den);
            (num, den) = (num / g, den / g);
        }
    }
    let den = den.checked_mul(hits)?;
    let g = gcd(num, den);
    Some((num / g, den / g))
}

/// Mean over relevant positions k of precision@k. Computed as an exact
/// fraction while it fits, so small cases round correctly.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let hits = ranked_relevance.iter().filter(|&&r| r).count();
    if hits == 0 {
        return Err(Error::NoRelevant);
    }
    if let Some((num, den)) = exact_precision_sum(ranked_relevance) {
        return Ok(num as f64 / den as f64);
    }
    let mut seen = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            seen += 1;
            sum += seen as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

/// Features with identity and camera labels, one row per tracklet.
#[derive(Debug, Clone)]
pub struct RetrievalSet {
    pub features: EmbeddingMatrix,
    pub labels: Vec<PersonId>,
    pub cameras: Vec<CameraId>,
}

impl RetrievalSet {
    pub fn new(
        features: EmbeddingMatrix,
        labels: Vec<PersonId>,
        cameras: Vec<CameraId>,
    ) -> Result<Self> {
        if labels.len() != features.nrows() || cameras.len() != features.nrows() {
            return Err(Error::Integrity(format!(
                "{} features, {} labels, {} cameras",
                features.nrows(),
                labels.len(),
                cameras.len()
            )));
        }
        Ok(RetrievalSet {
            features,
            labels,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Rank → fraction of evaluated queries with a match in the top `rank`.
    pub cmc: BTreeMap<usize, f64>,
    pub n_queries: usize,
    /// Queries without any valid gallery match.
    pub skipped: usize,
}

/// Gallery order for one query: same-ID same-camera items removed, the rest
/// by descending cosine similarity with ties to the lower gallery index.
fn ranked_relevance(q: &RetrievalSet, i: usize, g: &RetrievalSet) -> Vec<bool> {
    let qf = q.features.row(i);
    let mut items: Vec<(f64, usize)> = (0..g.len())
        .filter(|&j| !(g.labels[j] == q.labels[i] && g.cameras[j] == q.cameras[i]))
        .map(|j| (qf.dot(&g.features.row(j)), j))
        .collect();
    items.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    items
        .into_iter()
        .map(|(_, j)| g.labels[j] == q.labels[i])
        .collect()
}

pub fn evaluate_retrieval(
    query: &RetrievalSet,
    gallery: &RetrievalSet,
    ranks: &[usize],
) -> Result<RetrievalReport> {
    if query.features.dim() != gallery.features.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} vs gallery dimension {}",
            query.features.dim(),
            gallery.features.dim()
        )));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::Config(format!("CMC ranks start at 1, got {r}")));
    }
    // (AP, rank of the first match) per evaluated query.
    let per_query: Vec<Option<(f64, usize)>> = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let rel = ranked_relevance(query, i, gallery);
            let first = rel.iter().position(|&r| r)?;
            Some((average_precision(&rel).expect("has a match"), first + 1))
        })
        .collect();
    let done: Vec<(f64, usize)> = per_query.iter().flatten().copied().collect();
    if done.is_empty() {
        return Err(Error::NoRelevant);
    }
    let n = done.len() as f64;
    Ok(RetrievalReport {
        map: done.iter().map(|d| d.0).sum::<f64>() / n,
        cmc: ranks
            .iter()
            .map(|&r| (r, done.iter().filter(|d| d.1 <= r).count() as f64 / n))
            .collect(),
        n_queries: query.len(),
        skipped: query.len() - done.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    /// Fraction of clustered tracklets whose identity is their cluster's
    /// majority identity. A tracklet holding several identities matches none.
    pub purity: f64,
    /// Fraction of clustered frames carrying their cluster's majority
    /// frame-level identity.
    pub frame_purity: f64,
    /// Fraction of frames that sit in clustered (non-noise) tracklets.
    pub coverage: f64,
    pub n_clusters: usize,
    /// Fraction of tracklets labelled noise.
    pub noise_fraction: f64,
    pub n_noise: usize,
}

#[derive(Default)]
struct ClusterCounts {
    members: usize,
    /// Pure members per identity.
    pure: HashMap<PersonId, usize>,
    frames: HashMap<PersonId, usize>,
}

fn majority(m: &HashMap<PersonId, usize>) -> usize {
    m.values().copied().max().unwrap_or(0)
}

/// Purity of a pseudo labeling against the dataset's ground truth.
pub fn cluster_quality(pseudo: &PseudoLabeling, ds: &Dataset) -> Result<ClusterQuality> {
    let mut clusters: BTreeMap<u32, ClusterCounts> = BTreeMap::new();
    let mut total_frames = 0usize;
    let mut n_noise = 0usize;
    for t in &ds.tracklets {
        let label = pseudo
            .labels
            .get(&t.id)
            .ok_or_else(|| Error::Integrity(format!("tracklet `{}` has no pseudo label", t.id)))?;
        let gt = t.labels()?;
        total_frames += gt.len();
        let Some(c) = label else {
            n_noise += 1;
            continue;
        };
        let cc = clusters.entry(*c).or_default();
        cc.members += 1;
        if gt.iter().all(|&p| p == gt[0]) {
            *cc.pure.entry(gt[0]).or_default() += 1;
        }
        for p in gt {
            *cc.frames.entry(p).or_default() += 1;
        }
    }
    if clusters.is_empty() {
        return Err(Error::EmptyLabeling { n_noise });
    }
    let members: usize = clusters.values().map(|c| c.members).sum();
    let frames: usize = clusters.values().flat_map(|c| c.frames.values()).sum();
    let pure_major: usize = clusters.values().map(|c| majority(&c.pure)).sum();
    let frame_major: usize = clusters.values().map(|c| majority(&c.frames)).sum();
    Ok(ClusterQuality {
        purity: pure_major as f64 / members as f64,
        frame_purity: frame_major as f64 / frames as f64,
        coverage: frames as f64 / total_frames as f64,
        n_clusters: clusters.len(),
        noise_fraction: n_noise as f64 / ds.n_tracklets() as f64,
        n_noise,
    })
}
