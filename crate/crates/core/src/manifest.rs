//! Line-oriented JSON dataset manifests.
//!
//! The first line is a header object (`{"trackmill":1}`); every following
//! line is one frame:
//!
//! ```text
//! {"t":"trk-0001","s":0,"pid":7,"cam":2,"emb":[0.1,...],"img":"a/0001.jpg"}
//! ```
//!
//! Large embedding sets can go to a binary sidecar instead of inline arrays.
//! The header then names the sidecar file (`"sidecar":"x.emb"`, relative to
//! the manifest) and every frame line carries `"emb":null`. The sidecar is an
//! 8-byte magic, `u32` row count, `u32` dimension, then row-major `f32`, all
//! little-endian, one row per frame line in file order.
//!
//! A header-less file is accepted on load, and an empty file is an empty
//! dataset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FrameRecord, Tracklet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const SIDECAR_MAGIC: [u8; 8] = *b"TRKEMB\0\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    trackmill: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    t: String,
    s: u32,
    #[serde(default)]
    pid: Option<u32>,
    cam: u32,
    #[serde(default)]
    emb: Option<Vec<f32>>,
    #[serde(default)]
    img: Option<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut sidecar: Option<Vec<Vec<f32>>> = None;
    let mut groups: IndexMap<String, Vec<FrameRecord>> = IndexMap::new();
    let mut seen = std::collections::HashSet::new();
    let mut n_frame_lines = 0usize;
    let mut first = true;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if first {
            first = false;
            let is_header = serde_json::from_str::<serde_json::Value>(trimmed)
                .ok()
                .is_some_and(|v| v.get("trackmill").is_some());
            if is_header {
                let header: Header = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad header: {e}"),
                })?;
                if header.trackmill != FORMAT_VERSION {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("unsupported manifest version {}", header.trackmill),
                    });
                }
                if let Some(name) = header.sidecar {
                    let side = sidecar_path_for(path, &name);
                    sidecar = Some(read_sidecar(&side)?);
                }
                continue;
            }
        }
        let rec: Line = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert((rec.t.clone(), rec.s)) {
            return Err(Error::Integrity(format!(
                "line {lineno}: duplicate frame (tracklet `{}`, seq {})",
                rec.t, rec.s
            )));
        }
        let embedding = match (&sidecar, rec.emb) {
            (Some(rows), None) => Some(rows.get(n_frame_lines).cloned().ok_or_else(|| {
                Error::Integrity(format!(
                    "line {lineno}: sidecar has only {} rows",
                    rows.len()
                ))
            })?),
            (Some(_), Some(_)) => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "inline embedding in a manifest backed by a sidecar".into(),
                })
            }
            (None, emb) => emb,
        };
        n_frame_lines += 1;
        groups.entry(rec.t.clone()).or_default().push(FrameRecord {
            tracklet_id: rec.t,
            seq: rec.s,
            gt_pid: rec.pid,
            camera_id: rec.cam,
            embedding,
            image_ref: rec.img,
        });
    }
    if let Some(rows) = &sidecar {
        if rows.len() != n_frame_lines {
            return Err(Error::Integrity(format!(
                "sidecar has {} rows for {n_frame_lines} frames",
                rows.len()
            )));
        }
    }

    let tracklets = groups
        .into_iter()
        .map(|(id, frames)| Tracklet::new(id, frames))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(tracklets)
}

pub fn save_manifest(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_manifest(ds, path.as_ref(), false)
}

/// Writes the manifest with embeddings in a binary sidecar next to it
/// (`<path>.emb`). Every frame must carry an embedding.
pub fn save_manifest_with_sidecar(ds: &Dataset, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    write_manifest(ds, path, true)?;
    Ok(default_sidecar_path(path))
}

fn default_sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".emb");
    path.with_file_name(name)
}

fn sidecar_path_for(manifest: &Path, name: &str) -> PathBuf {
    manifest
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}

fn write_manifest(ds: &Dataset, path: &Path, use_sidecar: bool) -> Result<()> {
    for f in ds.frames() {
        if let Some(e) = &f.embedding {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "tracklet `{}` seq {}: non-finite embedding value",
                    f.tracklet_id, f.seq
                )));
            }
        }
    }

    let header = if use_sidecar {
        let side = default_sidecar_path(path);
        let rows: Vec<&[f32]> = ds
            .frames()
            .map(|f| {
                f.embedding.as_deref().ok_or_else(|| {
                    Error::Integrity(format!(
                        "tracklet `{}` seq {}: sidecar output needs an embedding on every frame",
                        f.tracklet_id, f.seq
                    ))
                })
            })
            .collect::<Result<_>>()?;
        write_sidecar(&side, &rows, ds.embedding_dim().unwrap_or(0))?;
        Header {
            trackmill: FORMAT_VERSION,
            sidecar: Some(
                side.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
            ),
        }
    } else {
        Header {
            trackmill: FORMAT_VERSION,
            sidecar: None,
        }
    };

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for f in ds.frames() {
        let line = Line {
            t: f.tracklet_id.clone(),
            s: f.seq,
            pid: f.gt_pid,
            cam: f.camera_id,
            emb: if use_sidecar {
                None
            } else {
                f.embedding.clone()
            },
            img: f.image_ref.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_sidecar(path: &Path, rows: &[&[f32]], dim: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&SIDECAR_MAGIC).map_err(io)?;
    w.write_all(&(rows.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for row in rows {
        if row.len() != dim {
            return Err(Error::Integrity(format!(
                "sidecar row of dimension {} (expected {dim})",
                row.len()
            )));
        }
        for v in *row {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..8] != SIDECAR_MAGIC {
        return Err(Error::Integrity(format!(
            "{}: not an embedding sidecar",
            path.display()
        )));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * dim * 4 {
        return Err(Error::Integrity(format!(
            "{}: expected {rows}x{dim} floats, found {} bytes",
            path.display(),
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .chunks(dim.max(1))
        .take(rows)
        .map(<[f32]>::to_vec)
        .collect())
}
