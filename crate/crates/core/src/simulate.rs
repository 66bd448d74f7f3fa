//! Turns a clean labeled dataset into a noisy one at target `(r_fm, r_sw)`.
//!
//! A ground-truth unit is one (person, camera) pair; its clean frames are
//! concatenated in tracklet order. With `M` units the plan fixes
//!
//! * the incidence budget `P = round(M·r_fm)`, i.e. the total number of
//!   segments units are cut into;
//! * the output tracklet count `N = round(M·r_fm / r_sw)`;
//! * the ID counts of the noisy tracklets, drawn from the configured
//!   distribution until `Σ(|Q_i| − 1) = P − N` (the last draw is trimmed to
//!   land exactly).
//!
//! Generation cuts each unit into its planned number of consecutive segments
//! (at least 2 frames each), fills every noisy tracklet with segments of
//! distinct same-camera units, shuffles segment order inside noisy tracklets,
//! and emits every leftover segment as a pure tracklet. Each (unit, tracklet)
//! incidence is exactly one segment, so the output measures `r_fm = P/M` and
//! `r_sw = P/N` under per-camera counting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CameraId, Dataset, FrameRecord, PersonId, Tracklet};
use crate::error::{Error, Result};
use crate::noise::NoiseRates;
use crate::rng;

pub const MIN_SEGMENT_LEN: usize = 2;

/// Distribution of the number of identities inside a noisy tracklet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<usize, f64>", into = "BTreeMap<usize, f64>")]
pub struct IdsPerNoisyDist {
    weights: BTreeMap<usize, f64>,
}

impl Default for IdsPerNoisyDist {
    fn default() -> Self {
        IdsPerNoisyDist {
            weights: [(2, 0.80), (3, 0.15), (4, 0.05)].into_iter().collect(),
        }
    }
}

impl TryFrom<BTreeMap<usize, f64>> for IdsPerNoisyDist {
    type Error = Error;

    fn try_from(weights: BTreeMap<usize, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("empty ids-per-tracklet distribution".into()));
        }
        for (&k, &p) in &weights {
            if k < 2 {
                return Err(Error::Config(format!(
                    "noisy tracklets hold at least 2 IDs (got support value {k})"
                )));
            }
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Config(format!("bad probability {p} for {k} IDs")));
            }
        }
        let total: f64 = weights.values().sum();
        if total <= 0.0 {
            return Err(Error::Config("distribution has zero total mass".into()));
        }
        Ok(IdsPerNoisyDist {
            weights: weights.into_iter().map(|(k, p)| (k, p / total)).collect(),
        })
    }
}

impl From<IdsPerNoisyDist> for BTreeMap<usize, f64> {
    fn from(d: IdsPerNoisyDist) -> Self {
        d.weights
    }
}

impl FromStr for IdsPerNoisyDist {
    type Err = Error;

    /// Parses `k:p,k:p,...`.
    fn from_str(s: &str) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, p) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("bad distribution entry `{part}`")))?;
            let k: usize = k
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad ID count `{k}`")))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad probability `{p}`")))?;
            weights.insert(k, p);
        }
        weights.try_into()
    }
}

impl fmt::Display for IdsPerNoisyDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .weights
            .iter()
            .map(|(k, p)| format!("{k}:{p}"))
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl IdsPerNoisyDist {
    pub fn max_ids(&self) -> usize {
        self.weights
            .iter()
            .rev()
            .find(|(_, &p)| p > 0.0)
            .map_or(2, |(&k, _)| k)
    }

    fn sample(&self, r: &mut impl Rng) -> usize {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (&k, &p) in &self.weights {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.max_ids()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub target: NoiseRates,
    pub m_units: usize,
    /// `P`: total (unit, tracklet) incidence pairs, equal to the segment count.
    pub incidence_budget: usize,
    pub n_total: usize,
    pub n_noisy: usize,
    /// Number of IDs in each noisy tracklet.
    pub noisy_sizes: Vec<usize>,
    /// Segment count per unit, in unit order.
    pub segments_per_unit: Vec<usize>,
    pub ids_per_noisy_dist: IdsPerNoisyDist,
    pub seed: u64,
}

#[derive(Debug)]
struct Unit {
    camera: CameraId,
    frames: Vec<FrameRecord>,
}

impl Unit {
    fn capacity(&self) -> usize {
        (self.frames.len() / MIN_SEGMENT_LEN).max(1)
    }
}

fn build_units(ds: &Dataset) -> Result<Vec<Unit>> {
    ds.require_labels()?;
    let mut units: IndexMap<(PersonId, CameraId), Unit> = IndexMap::new();
    for t in &ds.tracklets {
        let ids = t.distinct_ids()?;
        if ids.len() != 1 {
            return Err(Error::Integrity(format!(
                "input tracklet `{}` holds {} identities; simulation needs clean tracklets",
                t.id,
                ids.len()
            )));
        }
        let pid = *ids.iter().next().expect("one id");
        units
            .entry((pid, t.camera_id))
            .or_insert_with(|| Unit {
                camera: t.camera_id,
                frames: Vec::new(),
            })
            .frames
            .extend(t.frames.iter().cloned());
    }
    Ok(units.into_values().collect())
}

pub fn plan_simulation(
    ds: &Dataset,
    target: NoiseRates,
    dist: &IdsPerNoisyDist,
    seed: u64,
) -> Result<SimulationPlan> {
    NoiseRates::new(target.r_fm, target.r_sw)?;
    let units = build_units(ds)?;
    let m = units.len();
    if m == 0 {
        return Err(Error::Infeasible(
            "the input dataset has no tracklets".into(),
        ));
    }
    let p = (m as f64 * target.r_fm).round() as usize;
    let n = (m as f64 * target.r_fm / target.r_sw).round() as usize;
    if n == 0 {
        return Err(Error::Infeasible(format!(
            "r_sw={} leaves no output tracklets for {m} units",
            target.r_sw
        )));
    }

    let capacity: usize = units.iter().map(Unit::capacity).sum();
    if p > capacity {
        return Err(Error::Infeasible(format!(
            "r_fm={} needs {p} segments but units only allow {capacity} of >= {MIN_SEGMENT_LEN} frames",
            target.r_fm
        )));
    }

    let mut r = rng::stream(seed, &[rng::SIMULATE, 0]);

    let mut segments_per_unit = vec![1usize; m];
    let mut open: Vec<usize> = (0..m).filter(|&k| units[k].capacity() > 1).collect();
    for _ in m..p {
        let slot = r.random_range(0..open.len());
        let k = open[slot];
        segments_per_unit[k] += 1;
        if segments_per_unit[k] == units[k].capacity() {
            open.swap_remove(slot);
        }
    }

    let mut per_camera: BTreeMap<CameraId, usize> = BTreeMap::new();
    for u in &units {
        *per_camera.entry(u.camera).or_default() += 1;
    }
    let widest_camera = per_camera.values().copied().max().unwrap_or(0);

    let excess = p - n;
    let mut noisy_sizes = Vec::new();
    let mut remaining = excess;
    while remaining > 0 {
        let q = dist.sample(&mut r).min(remaining + 1);
        noisy_sizes.push(q);
        remaining -= q - 1;
    }
    if let Some(&q) = noisy_sizes.iter().max() {
        if q > widest_camera {
            return Err(Error::Infeasible(format!(
                "a noisy tracklet needs {q} same-camera identities but the widest camera has {widest_camera} units"
            )));
        }
    }
    if noisy_sizes.len() > n {
        return Err(Error::Infeasible(format!(
            "r_sw={} needs {} noisy tracklets but only {n} tracklets are produced",
            target.r_sw,
            noisy_sizes.len()
        )));
    }

    Ok(SimulationPlan {
        target,
        m_units: m,
        incidence_budget: p,
        n_total: n,
        n_noisy: noisy_sizes.len(),
        noisy_sizes,
        segments_per_unit,
        ids_per_noisy_dist: dist.clone(),
        seed,
    })
}

/// Cuts `len` frames into `parts` consecutive runs of at least
/// `MIN_SEGMENT_LEN`, uniformly over all such compositions. Returns run
/// boundaries `[0, c_1, ..., len]`.
fn random_cuts(len: usize, parts: usize, r: &mut impl Rng) -> Vec<usize> {
    if parts <= 1 {
        return vec![0, len];
    }
    let slack = len - MIN_SEGMENT_LEN * parts;
    // Stars and bars: parts-1 bars among slack + parts - 1 positions.
    let mut bars = sample(r, slack + parts - 1, parts - 1).into_vec();
    bars.sort_unstable();
    let mut bounds = vec![0];
    for (j, b) in bars.into_iter().enumerate() {
        let extra = b - j;
        bounds.push(MIN_SEGMENT_LEN * (j + 1) + extra);
    }
    bounds.push(len);
    bounds
}

/// Picks `q` distinct indices with probability proportional to `weights`.
fn weighted_distinct(weights: &[usize], q: usize, r: &mut impl Rng) -> Option<Vec<usize>> {
    let mut w: Vec<usize> = weights.to_vec();
    let mut out = Vec::with_capacity(q);
    for _ in 0..q {
        let total: usize = w.iter().sum();
        if total == 0 {
            return None;
        }
        let mut x = r.random_range(0..total);
        let i = w
            .iter()
            .position(|&wi| {
                if x < wi {
                    true
                } else {
                    x -= wi;
                    false
                }
            })
            .expect("x < total");
        out.push(i);
        w[i] = 0;
    }
    Some(out)
}

/// Assigns units to noisy tracklets. Returns, per noisy tracklet, the unit
/// indices it draws a segment from.
fn assign_slots(
    units: &[Unit],
    plan: &SimulationPlan,
    r: &mut ChaCha8Rng,
) -> Option<Vec<Vec<usize>>> {
    let mut remaining = plan.segments_per_unit.clone();
    let mut by_camera: BTreeMap<CameraId, Vec<usize>> = BTreeMap::new();
    for (k, u) in units.iter().enumerate() {
        by_camera.entry(u.camera).or_default().push(k);
    }
    let cameras: Vec<CameraId> = by_camera.keys().copied().collect();

    let mut order: Vec<usize> = (0..plan.noisy_sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(plan.noisy_sizes[i]));

    let mut slots = vec![Vec::new(); plan.noisy_sizes.len()];
    for i in order {
        let q = plan.noisy_sizes[i];
        let cam_weights: Vec<usize> = cameras
            .iter()
            .map(|c| {
                let members = &by_camera[c];
                let live = members.iter().filter(|&&k| remaining[k] > 0).count();
                if live >= q {
                    members.iter().map(|&k| remaining[k]).sum()
                } else {
                    0
                }
            })
            .collect();
        let cam = cameras[weighted_distinct(&cam_weights, 1, r)?[0]];
        let members = &by_camera[&cam];
        let w: Vec<usize> = members.iter().map(|&k| remaining[k]).collect();
        let picked: Vec<usize> = weighted_distinct(&w, q, r)?
            .into_iter()
            .map(|j| members[j])
            .collect();
        for &k in &picked {
            remaining[k] -= 1;
        }
        slots[i] = picked;
    }
    Some(slots)
}

const SLOT_ATTEMPTS: u64 = 16;

pub fn generate_noisy_dataset(ds: &Dataset, plan: &SimulationPlan) -> Result<Dataset> {
    let units = build_units(ds)?;
    if units.len() != plan.m_units || plan.segments_per_unit.len() != units.len() {
        return Err(Error::Integrity(format!(
            "plan was made for {} units, dataset has {}",
            plan.m_units,
            units.len()
        )));
    }
    for (k, (u, &c)) in units.iter().zip(&plan.segments_per_unit).enumerate() {
        if c == 0 || c > u.capacity() {
            return Err(Error::Integrity(format!(
                "plan cuts unit {k} ({} frames) into {c} segments",
                u.frames.len()
            )));
        }
    }
    if plan.noisy_sizes.len() != plan.n_noisy
        || plan.segments_per_unit.iter().sum::<usize>() != plan.incidence_budget
        || plan.incidence_budget - plan.noisy_sizes.iter().map(|q| q - 1).sum::<usize>()
            != plan.n_total
    {
        return Err(Error::Integrity(
            "simulation plan is internally inconsistent".into(),
        ));
    }

    let mut r = rng::stream(plan.seed, &[rng::SIMULATE, 1]);

    // Consecutive segments per unit, in a random order for slot draws.
    let mut segments: Vec<Vec<(usize, Vec<FrameRecord>)>> = units
        .iter()
        .zip(&plan.segments_per_unit)
        .map(|(u, &c)| {
            let b = random_cuts(u.frames.len(), c, &mut r);
            let mut segs: Vec<(usize, Vec<FrameRecord>)> = b
                .windows(2)
                .enumerate()
                .map(|(j, w)| (j, u.frames[w[0]..w[1]].to_vec()))
                .collect();
            segs.shuffle(&mut r);
            segs
        })
        .collect();

    let slots = (0..SLOT_ATTEMPTS)
        .find_map(|attempt| {
            let mut ar = rng::stream(plan.seed, &[rng::SIMULATE, 2, attempt]);
            assign_slots(&units, plan, &mut ar)
        })
        .ok_or_else(|| {
            Error::Infeasible(
                "could not fill noisy tracklets with distinct same-camera identities".into(),
            )
        })?;

    // (sort key, segments) per output tracklet.
    let mut out: Vec<((usize, usize), Vec<Vec<FrameRecord>>)> = Vec::with_capacity(plan.n_total);
    for units_in_slot in slots {
        let mut parts: Vec<((usize, usize), Vec<FrameRecord>)> = units_in_slot
            .into_iter()
            .map(|k| {
                let (j, f) = segments[k].pop().expect("slot counts match plan");
                ((k, j), f)
            })
            .collect();
        parts.shuffle(&mut r);
        let key = parts.iter().map(|(key, _)| *key).min().expect("non-empty");
        out.push((key, parts.into_iter().map(|(_, f)| f).collect()));
    }
    for (k, segs) in segments.into_iter().enumerate() {
        for (j, f) in segs {
            out.push(((k, j), vec![f]));
        }
    }
    out.sort_by_key(|(key, _)| *key);
    debug_assert_eq!(out.len(), plan.n_total);

    let tracklets = out
        .into_iter()
        .enumerate()
        .map(|(i, (_, parts))| {
            Tracklet::from_ordered_frames(format!("s{i:06}"), parts.into_iter().flatten().collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(tracklets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{measure_rates, IdCounting};
    use crate::oracle::{synthetic_clean, SyntheticSpec};

    fn clean(n_ids: usize, cams: usize, seed: u64) -> Dataset {
        synthetic_clean(
            &SyntheticSpec {
                n_ids,
                n_cameras: cams,
                cameras_per_id: cams,
                min_len: 20,
                max_len: 60,
                first_pid: 0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn clean_target_is_passthrough() {
        let ds = clean(30, 2, 1);
        let plan = plan_simulation(&ds, NoiseRates::CLEAN, &IdsPerNoisyDist::default(), 5).unwrap();
        assert_eq!(plan.n_total, plan.m_units);
        assert_eq!(plan.n_noisy, 0);
        let out = generate_noisy_dataset(&ds, &plan).unwrap();
        assert_eq!(out.n_tracklets(), ds.n_tracklets());
        for (a, b) in ds.tracklets.iter().zip(&out.tracklets) {
            let strip = |t: &Tracklet| -> Vec<_> {
                t.frames
                    .iter()
                    .map(|f| (f.seq, f.gt_pid, f.camera_id, f.image_ref.clone()))
                    .collect()
            };
            assert_eq!(strip(a), strip(b));
        }
    }

    #[test]
    fn tracklet_count_from_budget() {
        // 500 ids x 4 cameras = 2000 units.
        let ds = clean(500, 4, 2);
        let plan = plan_simulation(
            &ds,
            NoiseRates::new(2.5, 1.2).unwrap(),
            &IdsPerNoisyDist::default(),
            1,
        )
        .unwrap();
        assert_eq!(plan.m_units, 2000);
        assert_eq!(plan.n_total, 4167);
        assert_eq!(plan.incidence_budget, 5000);
        let excess: usize = plan.noisy_sizes.iter().map(|q| q - 1).sum();
        assert_eq!(excess, plan.incidence_budget - plan.n_total);
    }

    #[test]
    fn output_rates_are_exact() {
        let ds = clean(100, 4, 3);
        let target = NoiseRates::new(2.5, 1.5).unwrap();
        let plan = plan_simulation(&ds, target, &IdsPerNoisyDist::default(), 7).unwrap();
        let out = generate_noisy_dataset(&ds, &plan).unwrap();
        let m = measure_rates(&out, IdCounting::PerCamera).unwrap();
        assert_eq!(m.n_tracklets, plan.n_total);
        assert_eq!(m.n_ids, plan.m_units);
        assert_eq!(m.incidence_pairs, plan.incidence_budget);
        assert!((m.r_fm - 2.5).abs() < 0.05 && (m.r_sw - 1.5).abs() < 0.05);
    }

    #[test]
    fn segments_keep_order_and_camera() {
        let ds = clean(60, 3, 4);
        let plan = plan_simulation(
            &ds,
            NoiseRates::new(2.5, 1.5).unwrap(),
            &IdsPerNoisyDist::default(),
            3,
        )
        .unwrap();
        let out = generate_noisy_dataset(&ds, &plan).unwrap();
        // Origin of each frame: (pid, cam, original seq).
        let origin: std::collections::HashMap<String, u32> = ds
            .frames()
            .map(|f| (f.image_ref.clone().unwrap(), f.seq))
            .collect();
        for t in &out.tracklets {
            assert!(t.frames.iter().all(|f| f.camera_id == t.camera_id));
            for w in t.frames.windows(2) {
                if w[0].gt_pid == w[1].gt_pid {
                    let a = origin[w[0].image_ref.as_ref().unwrap()];
                    let b = origin[w[1].image_ref.as_ref().unwrap()];
                    assert_eq!(b, a + 1, "segment lost chronological order in {}", t.id);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = clean(40, 2, 5);
        let target = NoiseRates::new(1.7, 1.2).unwrap();
        let p1 = plan_simulation(&ds, target, &IdsPerNoisyDist::default(), 11).unwrap();
        let p2 = plan_simulation(&ds, target, &IdsPerNoisyDist::default(), 11).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            generate_noisy_dataset(&ds, &p1).unwrap(),
            generate_noisy_dataset(&ds, &p2).unwrap()
        );
        let p3 = plan_simulation(&ds, target, &IdsPerNoisyDist::default(), 12).unwrap();
        assert_ne!(
            generate_noisy_dataset(&ds, &p1).unwrap(),
            generate_noisy_dataset(&ds, &p3).unwrap()
        );
    }

    #[test]
    fn infeasible_targets_name_the_constraint() {
        let ds = clean(50, 2, 6);
        let pairs: IdsPerNoisyDist = "2:1".parse().unwrap();
        let err = plan_simulation(&ds, NoiseRates::new(2.5, 3.0).unwrap(), &pairs, 1).unwrap_err();
        assert!(
            matches!(err, Error::Infeasible(ref m) if m.contains("noisy tracklets")),
            "{err}"
        );

        let err =
            plan_simulation(&ds, NoiseRates::new(1000.0, 1.0).unwrap(), &pairs, 1).unwrap_err();
        assert!(
            matches!(err, Error::Infeasible(ref m) if m.contains("segments")),
            "{err}"
        );

        // One unit per camera cannot host a 2-ID tracklet.
        let lonely = clean(1, 3, 7);
        let err =
            plan_simulation(&lonely, NoiseRates::new(1.0, 1.5).unwrap(), &pairs, 1).unwrap_err();
        assert!(
            matches!(err, Error::Infeasible(ref m) if m.contains("widest camera")),
            "{err}"
        );
    }

    #[test]
    fn rejects_noisy_input_and_bad_rates() {
        let ds = clean(5, 1, 8);
        let plan = plan_simulation(
            &ds,
            NoiseRates::new(1.0, 2.0).unwrap(),
            &"2:1".parse().unwrap(),
            1,
        )
        .unwrap();
        let noisy = generate_noisy_dataset(&ds, &plan).unwrap();
        assert!(
            plan_simulation(&noisy, NoiseRates::CLEAN, &IdsPerNoisyDist::default(), 1).is_err()
        );
        assert!(NoiseRates::new(0.5, 1.0).is_err());
    }

    #[test]
    fn plan_dataset_mismatch() {
        let ds = clean(20, 2, 9);
        let plan = plan_simulation(
            &ds,
            NoiseRates::new(2.0, 1.2).unwrap(),
            &IdsPerNoisyDist::default(),
            1,
        )
        .unwrap();
        let other = clean(21, 2, 9);
        assert!(matches!(
            generate_noisy_dataset(&other, &plan),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn cuts_are_valid_compositions() {
        let mut r = rng::stream(1, &[]);
        for len in 2..40 {
            for parts in 1..=(len / 2) {
                let b = random_cuts(len, parts, &mut r);
                assert_eq!(b.len(), parts + 1);
                assert_eq!(*b.last().unwrap(), len);
                assert!(b.windows(2).all(|w| w[1] - w[0] >= MIN_SEGMENT_LEN));
            }
        }
    }

    #[test]
    fn dist_parsing() {
        let d: IdsPerNoisyDist = "2:0.8, 3:0.15,4:0.05".parse().unwrap();
        assert_eq!(d, IdsPerNoisyDist::default());
        assert_eq!(d.max_ids(), 4);
        assert!("1:1".parse::<IdsPerNoisyDist>().is_err());
        assert!("2".parse::<IdsPerNoisyDist>().is_err());
        let json = serde_json::to_string(&d).unwrap();
        let back: IdsPerNoisyDist = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }
}
