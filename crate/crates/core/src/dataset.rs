//! Frames, tracklets and datasets.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PersonId = u32;
pub type CameraId = u32;

/// One detected frame of a tracklet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub tracklet_id: String,
    /// Chronological position inside the tracklet, dense from 0.
    pub seq: u32,
    pub gt_pid: Option<PersonId>,
    pub camera_id: CameraId,
    pub embedding: Option<Vec<f32>>,
    pub image_ref: Option<String>,
}

/// A per-camera sequence of frames, sorted by `seq`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: String,
    pub camera_id: CameraId,
    pub frames: Vec<FrameRecord>,
}

impl Tracklet {
    /// Builds a tracklet from frames that already carry their final `seq`
    /// values; frames are sorted and checked.
    pub fn new(id: impl Into<String>, mut frames: Vec<FrameRecord>) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::Integrity(format!("tracklet `{id}` has no frames")));
        }
        frames.sort_by_key(|f| f.seq);
        let camera_id = frames[0].camera_id;
        for (i, f) in frames.iter().enumerate() {
            if f.tracklet_id != id {
                return Err(Error::Integrity(format!(
                    "frame of `{}` filed under tracklet `{id}`",
                    f.tracklet_id
                )));
            }
            if f.seq as usize != i {
                let what = if i > 0 && f.seq == frames[i - 1].seq {
                    "duplicate"
                } else {
                    "missing"
                };
                return Err(Error::Integrity(format!(
                    "tracklet `{id}`: {what} seq near {i} (seq values must be dense from 0)"
                )));
            }
            if f.camera_id != camera_id {
                return Err(Error::Integrity(format!(
                    "tracklet `{id}` spans cameras {camera_id} and {}",
                    f.camera_id
                )));
            }
            if f.embedding.is_none() && f.image_ref.is_none() {
                return Err(Error::Integrity(format!(
                    "tracklet `{id}` seq {}: frame has neither embedding nor image reference",
                    f.seq
                )));
            }
        }
        Ok(Tracklet {
            id,
            camera_id,
            frames,
        })
    }

    /// Renames the frames to `id` and renumbers them 0.. in the given order.
    pub fn from_ordered_frames(id: impl Into<String>, frames: Vec<FrameRecord>) -> Result<Self> {
        let id = id.into();
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(i, mut f)| {
                f.tracklet_id.clone_from(&id);
                f.seq = i as u32;
                f
            })
            .collect();
        Tracklet::new(id, frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Ground-truth IDs in frame order; errors if any frame is unlabeled.
    pub fn labels(&self) -> Result<Vec<PersonId>> {
        self.frames
            .iter()
            .map(|f| {
                f.gt_pid.ok_or_else(|| {
                    Error::LabelsRequired(format!("tracklet `{}` seq {}", self.id, f.seq))
                })
            })
            .collect()
    }

    /// The set of distinct ground-truth IDs in the tracklet.
    pub fn distinct_ids(&self) -> Result<BTreeSet<PersonId>> {
        Ok(self.labels()?.into_iter().collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tracklets: Vec<Tracklet>,
}

impl Dataset {
    pub fn new(tracklets: Vec<Tracklet>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut dim = None;
        for t in &tracklets {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::Integrity(format!(
                    "duplicate tracklet id `{}`",
                    t.id
                )));
            }
            for f in &t.frames {
                if let Some(e) = &f.embedding {
                    match dim {
                        None => dim = Some(e.len()),
                        Some(d) if d != e.len() => {
                            return Err(Error::Integrity(format!(
                                "tracklet `{}` seq {}: embedding dimension {} differs from {d}",
                                t.id,
                                f.seq,
                                e.len()
                            )))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(Dataset { tracklets })
    }

    pub fn n_tracklets(&self) -> usize {
        self.tracklets.len()
    }

    pub fn n_frames(&self) -> usize {
        self.tracklets.iter().map(Tracklet::len).sum()
    }

    /// Distinct ground-truth person IDs present (unlabeled frames ignored).
    pub fn ids(&self) -> BTreeSet<PersonId> {
        self.frames().filter_map(|f| f.gt_pid).collect()
    }

    pub fn cameras(&self) -> BTreeSet<CameraId> {
        self.tracklets.iter().map(|t| t.camera_id).collect()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.frames()
            .find_map(|f| f.embedding.as_ref())
            .map(Vec::len)
    }

    pub fn is_labeled(&self) -> bool {
        self.frames().all(|f| f.gt_pid.is_some())
    }

    pub fn require_labels(&self) -> Result<()> {
        match self.frames().find(|f| f.gt_pid.is_none()) {
            None => Ok(()),
            Some(f) => Err(Error::LabelsRequired(format!(
                "tracklet `{}` seq {} has no gt_pid",
                f.tracklet_id, f.seq
            ))),
        }
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.tracklets.iter().flat_map(|t| t.frames.iter())
    }
}
