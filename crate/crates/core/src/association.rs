//! Tracklet-level features and clustering into hard pseudo labels.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{
    dbscan_precomputed, pairwise_cosine_distance, ClusterConfig, EmbeddingMatrix,
};
use crate::dataset::{Dataset, Tracklet};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::rng;

/// Default window length for tracklet features.
pub const DEFAULT_WINDOW: usize = 32;

/// Maps raw per-frame features to unit-norm embeddings.
pub trait FrameEncoder: Sync {
    fn encode(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Uses the stored embeddings as they are (renormalised).
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl FrameEncoder for IdentityEncoder {
    fn encode(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(EmbeddingMatrix::normalized(raw.to_owned())?.into_inner())
    }
}

impl FrameEncoder for ModelState {
    fn encode(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.embed(raw)
    }
}

/// Raw embeddings of the selected frames, one row each.
pub fn raw_rows(t: &Tracklet, idx: &[usize]) -> Result<Array2<f64>> {
    let dim = t
        .frames
        .iter()
        .find_map(|f| f.embedding.as_ref().map(Vec::len))
        .ok_or_else(|| Error::Integrity(format!("tracklet `{}` has no embeddings", t.id)))?;
    let mut out = Array2::zeros((idx.len(), dim));
    for (r, &i) in idx.iter().enumerate() {
        let f = &t.frames[i];
        let e = f.embedding.as_ref().ok_or_else(|| {
            Error::Integrity(format!(
                "tracklet `{}` seq {} has no embedding",
                t.id, f.seq
            ))
        })?;
        out.row_mut(r)
            .iter_mut()
            .zip(e)
            .for_each(|(o, &v)| *o = f64::from(v));
    }
    Ok(out)
}

/// `n` consecutive frame indices from a random start, or the whole tracklet
/// repeated cyclically when it is shorter than `n`.
pub fn sample_consecutive(len: usize, n: usize, r: &mut impl Rng) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Integrity(
            "cannot sample from an empty tracklet".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Config("window length must be >= 1".into()));
    }
    if len >= n {
        let s = r.random_range(0..=len - n);
        Ok((s..s + n).collect())
    } else {
        Ok((0..n).map(|i| i % len).collect())
    }
}

/// Seeded form of [`sample_consecutive`].
pub fn sample_consecutive_seeded(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    sample_consecutive(len, n, &mut rng::stream(seed, &[rng::SAMPLE]))
}

/// Mean of the rows, renormalised.
pub fn tracklet_feature(frames: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let mean = frames
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Degenerate("tracklet feature of zero frames".into()))?;
    let n = mean.dot(&mean).sqrt();
    if !(n > 1e-12) {
        return Err(Error::Degenerate(
            "frame embeddings cancel out in the tracklet mean".into(),
        ));
    }
    Ok(mean / n)
}

/// One pooled feature per tracklet from a window resampled per epoch.
pub fn tracklet_features(
    ds: &Dataset,
    enc: &dyn FrameEncoder,
    window: usize,
    seed: u64,
    epoch: u32,
) -> Result<EmbeddingMatrix> {
    let rows: Vec<Array1<f64>> = ds
        .tracklets
        .par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::SAMPLE, u64::from(epoch), rng::hash_str(&t.id)]);
            let idx = sample_consecutive(t.len(), window, &mut r)?;
            tracklet_feature(enc.encode(raw_rows(t, &idx)?.view())?.view())
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    EmbeddingMatrix::from_unit_rows(m)
}

/// Hard pseudo labels for one epoch. `None` is DBSCAN noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub epoch: u32,
    pub n_classes: usize,
    pub eps: f64,
    pub labels: IndexMap<String, Option<u32>>,
}

impl PseudoLabeling {
    pub fn n_noise(&self) -> usize {
        self.labels.values().filter(|l| l.is_none()).count()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.len() - self.n_noise()
    }
}

pub fn associate(
    ds: &Dataset,
    enc: &dyn FrameEncoder,
    cfg: &ClusterConfig,
    window: usize,
    seed: u64,
    epoch: u32,
) -> Result<PseudoLabeling> {
    cfg.validate()?;
    if ds.n_tracklets() == 0 {
        return Err(Error::Degenerate("no tracklets to associate".into()));
    }
    let feats = tracklet_features(ds, enc, window, seed, epoch)?;
    label_features(ds, &feats, cfg, epoch)
}

/// Clusters precomputed tracklet features (rows in dataset order).
pub fn label_features(
    ds: &Dataset,
    feats: &EmbeddingMatrix,
    cfg: &ClusterConfig,
    epoch: u32,
) -> Result<PseudoLabeling> {
    if feats.nrows() != ds.n_tracklets() {
        return Err(Error::Integrity(format!(
            "{} features for {} tracklets",
            feats.nrows(),
            ds.n_tracklets()
        )));
    }
    let dist = pairwise_cosine_distance(feats);
    let eps = cfg.resolve_eps(dist.view())?;
    let a = dbscan_precomputed(dist.view(), eps, cfg.min_pts);
    Ok(PseudoLabeling {
        epoch,
        n_classes: a.n_clusters,
        eps,
        labels: ds
            .tracklets
            .iter()
            .zip(&a.labels)
            .map(|(t, l)| (t.id.clone(), l.map(|c| c as u32)))
            .collect(),
    })
}
