//! Synthetic stand-ins for real footage: clean labeled tracklet sets and
//! per-frame embeddings drawn around per-identity centers on the unit sphere.
//!
//! A frame's embedding is `normalize(center[pid] + offset[camera] + walk_j +
//! noise_j)` where `walk_j` is a within-tracklet random walk. Noise and walk
//! steps are isotropic Gaussians scaled by `1/sqrt(dim)`, so `sigma_intra` is
//! roughly the Euclidean length of the per-frame noise. The separation ratio
//! is the smallest distance between two identity centers divided by
//! `sigma_intra`.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cluster::EmbeddingMatrix;
use crate::dataset::{CameraId, Dataset, FrameRecord, PersonId, Tracklet};
use crate::error::{Error, Result};
use crate::rng;

/// Shape of a synthetic clean dataset: every identity walks past
/// `cameras_per_id` distinct cameras and leaves one clean tracklet in each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_ids: usize,
    pub n_cameras: usize,
    pub cameras_per_id: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// First person ID; lets train and test sets use disjoint identities.
    pub first_pid: PersonId,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_ids: 200,
            n_cameras: 4,
            cameras_per_id: 4,
            min_len: 40,
            max_len: 120,
            first_pid: 0,
        }
    }
}

pub fn synthetic_clean(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.n_cameras == 0 || spec.cameras_per_id == 0 || spec.cameras_per_id > spec.n_cameras {
        return Err(Error::Config(format!(
            "cameras_per_id must lie in 1..={} (got {})",
            spec.n_cameras, spec.cameras_per_id
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "bad tracklet length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let mut tracklets = Vec::with_capacity(spec.n_ids * spec.cameras_per_id);
    for k in 0..spec.n_ids {
        let pid = spec.first_pid + k as PersonId;
        let mut r = rng::stream(seed, &[rng::SYNTH, u64::from(pid)]);
        let mut cams: Vec<usize> = sample(&mut r, spec.n_cameras, spec.cameras_per_id).into_vec();
        cams.sort_unstable();
        for cam in cams {
            let cam = cam as CameraId;
            let len = r.random_range(spec.min_len..=spec.max_len);
            let id = format!("p{pid:05}c{cam}");
            let frames = (0..len)
                .map(|j| FrameRecord {
                    tracklet_id: id.clone(),
                    seq: j as u32,
                    gt_pid: Some(pid),
                    camera_id: cam,
                    embedding: None,
                    image_ref: Some(format!("p{pid:05}/c{cam}/{j:04}.jpg")),
                })
                .collect();
            tracklets.push(Tracklet::new(id, frames)?);
        }
    }
    Dataset::new(tracklets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub dim: usize,
    pub sigma_intra: f64,
    /// When set, `sigma_intra` is derived from it and the generated centers.
    pub separation_ratio: Option<f64>,
    pub sigma_camera: f64,
    pub drift: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            dim: 64,
            sigma_intra: 0.15,
            separation_ratio: None,
            sigma_camera: 0.05,
            drift: 0.01,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "oracle dimension must be >= 2, got {}",
                self.dim
            )));
        }
        for (name, v) in [
            ("sigma_intra", self.sigma_intra),
            ("sigma_camera", self.sigma_camera),
            ("drift", self.drift),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if let Some(r) = self.separation_ratio {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config(format!(
                    "separation ratio must be > 0, got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub dim: usize,
    pub n_ids: usize,
    pub sigma_intra: f64,
    pub min_center_distance: Option<f64>,
    pub separation_ratio: Option<f64>,
}

pub struct OracleOutput {
    /// One row per frame, in dataset frame order.
    pub embeddings: EmbeddingMatrix,
    pub report: OracleReport,
}

fn gaussian(r: &mut impl Rng, dim: usize, scale: f64) -> Array1<f64> {
    let s = scale / (dim as f64).sqrt();
    Array1::from_shape_fn(dim, |_| {
        let z: f64 = StandardNormal.sample(r);
        s * z
    })
}

pub fn identity_center(pid: PersonId, cfg: &OracleConfig) -> Array1<f64> {
    let mut r = rng::stream(cfg.seed, &[rng::ORACLE_CENTER, u64::from(pid)]);
    loop {
        let v = gaussian(&mut r, cfg.dim, 1.0);
        let n = v.dot(&v).sqrt();
        if n > 0.0 {
            return v / n;
        }
    }
}

fn camera_offset(cam: CameraId, cfg: &OracleConfig) -> Array1<f64> {
    let mut r = rng::stream(cfg.seed, &[rng::ORACLE_CAMERA, u64::from(cam)]);
    gaussian(&mut r, cfg.dim, cfg.sigma_camera)
}

fn min_center_distance(centers: &BTreeMap<PersonId, Array1<f64>>) -> Option<f64> {
    let cs: Vec<&Array1<f64>> = centers.values().collect();
    let mut best: Option<f64> = None;
    for i in 0..cs.len() {
        for j in (i + 1)..cs.len() {
            let diff = cs[i] - cs[j];
            let d = diff.dot(&diff).sqrt();
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

pub fn generate_embeddings(ds: &Dataset, cfg: &OracleConfig) -> Result<OracleOutput> {
    cfg.validate()?;
    ds.require_labels()?;
    let d = cfg.dim;
    let pids: BTreeSet<PersonId> = ds.ids();
    let centers: BTreeMap<PersonId, Array1<f64>> =
        pids.iter().map(|&p| (p, identity_center(p, cfg))).collect();
    let min_dist = min_center_distance(&centers);
    let sigma = match (cfg.separation_ratio, min_dist) {
        (Some(ratio), Some(md)) => md / ratio,
        (Some(_), None) => {
            return Err(Error::Config(
                "a separation ratio needs at least two identities".into(),
            ))
        }
        (None, _) => cfg.sigma_intra,
    };
    let offsets: BTreeMap<CameraId, Array1<f64>> = ds
        .cameras()
        .into_iter()
        .map(|c| (c, camera_offset(c, cfg)))
        .collect();

    let mut rows = Array2::zeros((ds.n_frames(), d));
    let mut row = 0;
    for t in &ds.tracklets {
        let mut r = rng::stream(cfg.seed, &[rng::ORACLE_TRACKLET, rng::hash_str(&t.id)]);
        let mut walk = Array1::<f64>::zeros(d);
        for (j, f) in t.frames.iter().enumerate() {
            if j > 0 {
                walk += &gaussian(&mut r, d, cfg.drift);
            }
            let noise = gaussian(&mut r, d, sigma);
            let pid = f.gt_pid.expect("labels checked");
            let v = &centers[&pid] + &offsets[&t.camera_id] + &walk + &noise;
            rows.row_mut(row).assign(&v);
            row += 1;
        }
    }
    Ok(OracleOutput {
        embeddings: EmbeddingMatrix::normalized(rows)?,
        report: OracleReport {
            dim: d,
            n_ids: pids.len(),
            sigma_intra: sigma,
            min_center_distance: min_dist,
            separation_ratio: min_dist.filter(|_| sigma > 0.0).map(|md| md / sigma),
        },
    })
}

/// Copies per-frame rows (in dataset frame order) into the frame records.
pub fn attach_embeddings(ds: &Dataset, emb: &EmbeddingMatrix) -> Result<Dataset> {
    if emb.nrows() != ds.n_frames() {
        return Err(Error::Integrity(format!(
            "{} embedding rows for {} frames",
            emb.nrows(),
            ds.n_frames()
        )));
    }
    let mut out = ds.clone();
    let mut row = 0;
    for t in &mut out.tracklets {
        for f in &mut t.frames {
            f.embedding = Some(emb.row(row).iter().map(|&v| v as f32).collect());
            row += 1;
        }
    }
    Ok(out)
}

/// Generates embeddings and returns the dataset with them attached.
pub fn embed_dataset(ds: &Dataset, cfg: &OracleConfig) -> Result<(Dataset, OracleReport)> {
    let out = generate_embeddings(ds, cfg)?;
    Ok((attach_embeddings(ds, &out.embeddings)?, out.report))
}
