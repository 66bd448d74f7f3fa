//! Splitting tracklets into per-identity pieces by clustering their frames.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    dbscan_precomputed, pairwise_cosine_distance, ClusterConfig, EmbeddingMatrix, EpsPolicy,
};
use crate::dataset::{Dataset, FrameRecord, Tracklet};
use crate::error::{Error, Result};
use crate::noise::{noise_profiles, noise_ratio_pct};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationReport {
    pub eps: f64,
    pub min_pts: usize,
    pub n_input: usize,
    pub n_output: usize,
    /// Input tracklets that produced more than one output.
    pub n_split: usize,
    /// Total intra-tracklet clusters (a bypassed or all-noise tracklet counts as one).
    pub n_clusters: usize,
    /// Frames DBSCAN marked as noise, later attached to a cluster.
    pub n_noise_frames: usize,
    /// Tracklets too short to cluster, passed through whole.
    pub bypassed: Vec<String>,
    /// Noise ratio of the output, when ground truth is present.
    pub noise_pct: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IsolationOutput {
    pub dataset: Dataset,
    pub report: IsolationReport,
}

struct Split {
    groups: Vec<Vec<usize>>,
    clustered: bool,
    noise_frames: usize,
}

/// Groups frame positions by cluster; noise frames join the cluster whose
/// position span is nearest (ties to the lower cluster index).
fn attach_noise(labels: &[Option<usize>], n_clusters: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            groups[*c].push(i);
        }
    }
    let spans: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| (g[0], *g.last().expect("clusters are non-empty")))
        .collect();
    for (i, l) in labels.iter().enumerate() {
        if l.is_none() {
            let best = spans
                .iter()
                .enumerate()
                .min_by_key(|(c, &(lo, hi))| {
                    let d = if i < lo { lo - i } else { i.saturating_sub(hi) };
                    (d, *c)
                })
                .map(|(c, _)| c)
                .expect("at least one cluster");
            groups[best].push(i);
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    groups
}

fn split_one(feats: &EmbeddingMatrix, eps: f64, min_pts: usize) -> Split {
    let n = feats.nrows();
    let whole = |clustered, noise_frames| Split {
        groups: vec![(0..n).collect()],
        clustered,
        noise_frames,
    };
    if n < min_pts {
        return whole(false, 0);
    }
    let dist = pairwise_cosine_distance(feats);
    let a = dbscan_precomputed(dist.view(), eps, min_pts);
    if a.n_clusters == 0 {
        return whole(true, n);
    }
    Split {
        groups: attach_noise(&a.labels, a.n_clusters),
        clustered: true,
        noise_frames: a.n_noise(),
    }
}

/// Splits every tracklet into one output per intra-tracklet cluster.
/// `features` has one unit-norm row per frame, in dataset frame order.
pub fn isolate_tracklets(
    ds: &Dataset,
    features: &EmbeddingMatrix,
    cfg: &ClusterConfig,
) -> Result<IsolationOutput> {
    cfg.validate()?;
    let EpsPolicy::Fixed(eps) = cfg.eps_policy else {
        return Err(Error::Config(format!(
            "isolation needs a fixed eps, got `{}`",
            cfg.eps_policy
        )));
    };
    if features.nrows() != ds.n_frames() {
        return Err(Error::Integrity(format!(
            "{} feature rows for {} frames",
            features.nrows(),
            ds.n_frames()
        )));
    }
    let mut offsets = Vec::with_capacity(ds.n_tracklets());
    let mut off = 0;
    for t in &ds.tracklets {
        offsets.push(off);
        off += t.len();
    }
    let splits: Vec<Split> = ds
        .tracklets
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(t, &o)| {
            let idx: Vec<usize> = (o..o + t.len()).collect();
            split_one(&features.select(&idx), eps, cfg.min_pts)
        })
        .collect();

    let mut out = Vec::new();
    let mut report = IsolationReport {
        eps,
        min_pts: cfg.min_pts,
        n_input: ds.n_tracklets(),
        n_output: 0,
        n_split: 0,
        n_clusters: 0,
        n_noise_frames: 0,
        bypassed: Vec::new(),
        noise_pct: None,
    };
    for (t, s) in ds.tracklets.iter().zip(splits) {
        if !s.clustered {
            report.bypassed.push(t.id.clone());
        }
        report.n_clusters += s.groups.len();
        report.n_noise_frames += s.noise_frames;
        if s.groups.len() == 1 {
            out.push(t.clone());
            continue;
        }
        report.n_split += 1;
        for (k, g) in s.groups.iter().enumerate() {
            let frames: Vec<FrameRecord> = g.iter().map(|&i| t.frames[i].clone()).collect();
            out.push(Tracklet::from_ordered_frames(
                format!("{}.{k}", t.id),
                frames,
            )?);
        }
    }
    report.n_output = out.len();
    let dataset = Dataset::new(out)?;
    if dataset.is_labeled() {
        report.noise_pct = Some(noise_ratio_pct(&noise_profiles(&dataset)?));
    }
    Ok(IsolationOutput { dataset, report })
}
