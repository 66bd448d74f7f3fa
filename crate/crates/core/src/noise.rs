//! Fragmentation / switch rates and per-tracklet noise profiles.
//!
//! With `Q_i` the set of ground-truth IDs seen in tracklet `i`, `N` tracklets
//! and `M` identities:
//!
//! * `r_fm = (1/M) Σ_k Σ_i 1{k ∈ Q_i}`, the mean number of tracklets an
//!   identity appears in;
//! * `r_sw = (1/N) Σ_i |Q_i|`, the mean number of identities per tracklet.
//!
//! Both numerators count the same (identity, tracklet) incidence pairs, so
//! `N·r_sw == M·r_fm`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{CameraId, Dataset, PersonId, Tracklet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    pub r_fm: f64,
    pub r_sw: f64,
}

impl NoiseRates {
    pub const CLEAN: NoiseRates = NoiseRates {
        r_fm: 1.0,
        r_sw: 1.0,
    };

    pub fn new(r_fm: f64, r_sw: f64) -> Result<Self> {
        if !(r_fm.is_finite() && r_sw.is_finite() && r_fm >= 1.0 && r_sw >= 1.0) {
            return Err(Error::Config(format!(
                "noise rates must be finite and >= 1 (got r_fm={r_fm}, r_sw={r_sw})"
            )));
        }
        Ok(NoiseRates { r_fm, r_sw })
    }
}

/// What counts as one ground-truth identity when computing `M`.
///
/// Per-camera counting treats every (person, camera) pair as its own unit,
/// which is what the tracklet counts of the reference simulated datasets
/// imply; global counting uses distinct person IDs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdCounting {
    #[default]
    PerCamera,
    Global,
}

impl std::str::FromStr for IdCounting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-camera" => Ok(IdCounting::PerCamera),
            "global" => Ok(IdCounting::Global),
            other => Err(Error::Config(format!(
                "unknown id counting `{other}` (expected per-camera or global)"
            ))),
        }
    }
}

/// Rates plus the counts they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMeasurement {
    pub r_fm: f64,
    pub r_sw: f64,
    pub n_tracklets: usize,
    pub n_ids: usize,
    pub incidence_pairs: usize,
    pub counting: IdCounting,
}

impl RateMeasurement {
    pub fn rates(&self) -> NoiseRates {
        NoiseRates {
            r_fm: self.r_fm,
            r_sw: self.r_sw,
        }
    }
}

type UnitKey = (PersonId, Option<CameraId>);

fn unit_key(pid: PersonId, cam: CameraId, counting: IdCounting) -> UnitKey {
    match counting {
        IdCounting::PerCamera => (pid, Some(cam)),
        IdCounting::Global => (pid, None),
    }
}

pub fn measure_rates(ds: &Dataset, counting: IdCounting) -> Result<RateMeasurement> {
    ds.require_labels()?;
    if ds.n_tracklets() == 0 {
        return Err(Error::Degenerate(
            "cannot measure rates of an empty dataset".into(),
        ));
    }
    let mut units: BTreeSet<UnitKey> = BTreeSet::new();
    let mut incidence = 0usize;
    for t in &ds.tracklets {
        let q = t.distinct_ids()?;
        incidence += q.len();
        units.extend(q.into_iter().map(|p| unit_key(p, t.camera_id, counting)));
    }
    let n = ds.n_tracklets();
    let m = units.len();
    Ok(RateMeasurement {
        r_fm: incidence as f64 / m as f64,
        r_sw: incidence as f64 / n as f64,
        n_tracklets: n,
        n_ids: m,
        incidence_pairs: incidence,
        counting,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackletNoiseProfile {
    pub tracklet_id: String,
    pub distinct_ids: usize,
    pub majority_id: PersonId,
    pub majority_fraction: f64,
    /// `seq` values at which the ground-truth ID differs from the previous frame.
    pub switch_points: Vec<u32>,
}

pub fn tracklet_profile(t: &Tracklet) -> Result<TrackletNoiseProfile> {
    let labels = t.labels()?;
    let mut counts: BTreeMap<PersonId, usize> = BTreeMap::new();
    for &p in &labels {
        *counts.entry(p).or_default() += 1;
    }
    // Ascending IDs, replaced only on a strictly larger count: ties keep the
    // smallest ID.
    let (majority_id, majority_count) = counts
        .iter()
        .fold(
            None,
            |best: Option<(PersonId, usize)>, (&p, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            },
        )
        .expect("tracklets are non-empty");
    let switch_points = t
        .frames
        .windows(2)
        .zip(labels.windows(2))
        .filter(|(_, l)| l[0] != l[1])
        .map(|(f, _)| f[1].seq)
        .collect();
    Ok(TrackletNoiseProfile {
        tracklet_id: t.id.clone(),
        distinct_ids: counts.len(),
        majority_id,
        majority_fraction: majority_count as f64 / labels.len() as f64,
        switch_points,
    })
}

pub fn noise_profiles(ds: &Dataset) -> Result<Vec<TrackletNoiseProfile>> {
    ds.tracklets.iter().map(tracklet_profile).collect()
}

/// Dataset noise ratio in percent: `100·(1 − mean majority_fraction)`.
pub fn noise_ratio_pct(profiles: &[TrackletNoiseProfile]) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    let mean = profiles.iter().map(|p| p.majority_fraction).sum::<f64>() / profiles.len() as f64;
    100.0 * (1.0 - mean)
}

/// The JSON document emitted by `measure` and `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub r_fm: f64,
    pub r_sw: f64,
    pub n_tracklets: usize,
    pub n_ids: usize,
    pub noise_pct: f64,
    pub incidence_pairs: usize,
    pub counting: IdCounting,
}

pub fn noise_report(ds: &Dataset, counting: IdCounting) -> Result<NoiseReport> {
    let m = measure_rates(ds, counting)?;
    let noise_pct = noise_ratio_pct(&noise_profiles(ds)?);
    Ok(NoiseReport {
        r_fm: m.r_fm,
        r_sw: m.r_sw,
        n_tracklets: m.n_tracklets,
        n_ids: m.n_ids,
        noise_pct,
        incidence_pairs: m.incidence_pairs,
        counting,
    })
}
