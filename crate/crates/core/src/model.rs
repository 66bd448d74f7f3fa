//! The trainable feature model, its EMA teacher, and the model file format.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Linear projection followed by row normalisation, then a linear classifier
/// on the normalised tracklet mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// d_raw × d.
    pub projection: Array2<f64>,
    /// d × K.
    pub classifier: Array2<f64>,
    pub bias: Array1<f64>,
    pub step: u64,
}

const CLASSIFIER_INIT_STD: f64 = 0.01;

impl ModelState {
    /// Identity projection when `d == d_raw`, otherwise Gaussian with
    /// variance 1/d_raw.
    pub fn new(d_raw: usize, d: usize, k: usize, seed: u64) -> Self {
        let projection = if d == d_raw {
            Array2::eye(d)
        } else {
            let mut r = rng::stream(seed, &[rng::MODEL_INIT]);
            let s = 1.0 / (d_raw as f64).sqrt();
            Array2::from_shape_fn((d_raw, d), |_| {
                let z: f64 = StandardNormal.sample(&mut r);
                s * z
            })
        };
        let mut m = ModelState {
            projection,
            classifier: Array2::zeros((d, 0)),
            bias: Array1::zeros(0),
            step: 0,
        };
        m.reset_classifier(k, &mut rng::stream(seed, &[rng::MODEL_INIT, 1]));
        m
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.ncols()
    }

    /// Replaces the classifier with small random weights for `k` classes.
    pub fn reset_classifier(&mut self, k: usize, r: &mut impl Rng) {
        self.classifier = Array2::from_shape_fn((self.dim(), k), |_| {
            let z: f64 = StandardNormal.sample(r);
            CLASSIFIER_INIT_STD * z
        });
        self.bias = Array1::zeros(k);
    }

    pub fn is_finite(&self) -> bool {
        self.projection.iter().all(|v| v.is_finite())
            && self.classifier.iter().all(|v| v.is_finite())
            && self.bias.iter().all(|v| v.is_finite())
    }

    /// Unit-norm frame embeddings for the given raw rows.
    pub fn embed(&self, raw: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_raw(raw)?;
        let mut y = raw.dot(&self.projection);
        for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::ZeroNorm { row: i });
            }
            row /= n;
        }
        Ok(y)
    }

    fn check_raw(&self, raw: ArrayView2<'_, f64>) -> Result<()> {
        if raw.ncols() != self.raw_dim() {
            return Err(Error::Shape(format!(
                "raw features have dimension {}, model expects {}",
                raw.ncols(),
                self.raw_dim()
            )));
        }
        if raw.nrows() == 0 {
            return Err(Error::Shape("no frames to encode".into()));
        }
        Ok(())
    }

    /// Forward pass for one tracklet window.
    pub fn forward(&self, raw: ArrayView2<'_, f64>) -> Result<Forward> {
        self.check_raw(raw)?;
        let y = raw.dot(&self.projection);
        let norms: Array1<f64> = y.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if let Some(i) = norms.iter().position(|&n| !(n > 0.0)) {
            return Err(Error::ZeroNorm { row: i });
        }
        let e = &y / &norms.view().insert_axis(Axis(1));
        let mean = e.mean_axis(Axis(0)).expect("non-empty");
        let mean_norm = mean.dot(&mean).sqrt();
        if !(mean_norm > 1e-12) {
            return Err(Error::Degenerate(
                "frame embeddings cancel out in the tracklet mean".into(),
            ));
        }
        let feature = &mean / mean_norm;
        let logits = feature.dot(&self.classifier) + &self.bias;
        Ok(Forward {
            e,
            norms,
            mean_norm,
            feature,
            logits,
        })
    }

    /// Accumulates parameter gradients for one tracklet given the gradients
    /// of the loss with respect to its feature and logits.
    pub fn backward(
        &self,
        raw: ArrayView2<'_, f64>,
        fwd: &Forward,
        g_feature: ArrayView1<'_, f64>,
        g_logits: ArrayView1<'_, f64>,
        grads: &mut Gradients,
    ) {
        let f = &fwd.feature;
        grads.classifier += &outer(f.view(), g_logits);
        grads.bias += &g_logits;
        let g_f = &g_feature + &self.classifier.dot(&g_logits);
        let g_mean = (&g_f - &(f * f.dot(&g_f))) / fwd.mean_norm;
        let n = fwd.e.nrows() as f64;
        let g_e = &g_mean / n;
        // ∂(y/|y|) = (I − e eᵀ)/|y|, applied row by row.
        let proj = fwd.e.dot(&g_e);
        let mut g_y = Array2::zeros(fwd.e.dim());
        for (i, mut row) in g_y.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&((&g_e - &(&fwd.e.row(i) * proj[i])) / fwd.norms[i]));
        }
        grads.projection += &raw.t().dot(&g_y);
    }
}

fn outer(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Intermediate values of one tracklet's forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub e: Array2<f64>,
    pub norms: Array1<f64>,
    pub mean_norm: f64,
    /// Unit-norm tracklet feature.
    pub feature: Array1<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub projection: Array2<f64>,
    pub classifier: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(m: &ModelState) -> Self {
        Gradients {
            projection: Array2::zeros(m.projection.dim()),
            classifier: Array2::zeros(m.classifier.dim()),
            bias: Array1::zeros(m.bias.len()),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        self.projection += &other.projection;
        self.classifier += &other.classifier;
        self.bias += &other.bias;
    }
}

/// Temporal average of a [`ModelState`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub model: ModelState,
    pub alpha: f64,
}

impl EmaState {
    pub fn new(net: &ModelState, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in [0, 1), got {alpha}"
            )));
        }
        Ok(EmaState {
            model: net.clone(),
            alpha,
        })
    }
}

fn blend<D: ndarray::Dimension>(
    e: &mut ndarray::Array<f64, D>,
    t: &ndarray::Array<f64, D>,
    w: f64,
) {
    ndarray::Zip::from(e)
        .and(t)
        .for_each(|e, &t| *e += w * (t - *e));
}

/// `E ← αE + (1−α)θ`, written as `E + (1−α)(θ − E)` so that `E == θ` stays
/// exact. A classifier whose shape no longer matches is copied from `net`.
pub fn ema_update(mut ema: EmaState, net: &ModelState) -> Result<EmaState> {
    if ema.model.projection.dim() != net.projection.dim() {
        return Err(Error::Shape(format!(
            "EMA projection {:?} vs net projection {:?}",
            ema.model.projection.dim(),
            net.projection.dim()
        )));
    }
    let w = 1.0 - ema.alpha;
    blend(&mut ema.model.projection, &net.projection, w);
    if ema.model.classifier.dim() == net.classifier.dim() {
        blend(&mut ema.model.classifier, &net.classifier, w);
        blend(&mut ema.model.bias, &net.bias, w);
    } else {
        ema.model.classifier = net.classifier.clone();
        ema.model.bias = net.bias.clone();
    }
    ema.model.step = net.step;
    Ok(ema)
}

pub const MODEL_MAGIC: [u8; 8] = *b"TRKMODEL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    alpha: f64,
    step: u64,
    tensors: Vec<TensorHeader>,
}

/// Writes both networks: magic, version, header length, JSON header, then
/// every tensor as little-endian f32 in header order.
pub fn save_model(path: &Path, net: &ModelState, ema: &EmaState) -> Result<()> {
    let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = [("net", net), ("ema", &ema.model)]
        .into_iter()
        .flat_map(|(prefix, m)| {
            [
                (
                    format!("{prefix}.projection"),
                    m.projection.shape().to_vec(),
                    m.projection.iter().copied().collect::<Vec<_>>(),
                ),
                (
                    format!("{prefix}.classifier"),
                    m.classifier.shape().to_vec(),
                    m.classifier.iter().copied().collect(),
                ),
                (
                    format!("{prefix}.bias"),
                    m.bias.shape().to_vec(),
                    m.bias.to_vec(),
                ),
            ]
        })
        .collect();
    let header = ModelHeader {
        alpha: ema.alpha,
        step: net.step,
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorHeader {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(&MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for &v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(ModelState, EmaState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Integrity(format!("{}: {m}", path.display()));
    if bytes.len() < 16 || bytes[..8] != MODEL_MAGIC {
        return Err(bad("not a model file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported model version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader =
        serde_json::from_slice(json).map_err(|e| bad(&format!("bad header: {e}")))?;
    let mut off = 16 + hlen;
    let mut take = |t: &TensorHeader| -> Result<Vec<f64>> {
        let n: usize = t.shape.iter().product();
        let end = off + 4 * n;
        let raw = bytes
            .get(off..end)
            .ok_or_else(|| bad(&format!("truncated tensor {}", t.name)))?;
        off = end;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    };
    let mut parts = std::collections::HashMap::new();
    for t in &header.tensors {
        parts.insert(t.name.clone(), (t.shape.clone(), take(t)?));
    }
    let mut get_model = |prefix: &str| -> Result<ModelState> {
        let mut mat = |name: &str| -> Result<Array2<f64>> {
            let key = format!("{prefix}.{name}");
            let (shape, data) = parts
                .remove(&key)
                .ok_or_else(|| bad(&format!("missing tensor {key}")))?;
            if shape.len() != 2 {
                return Err(bad(&format!("tensor {key} is not a matrix")));
            }
            Array2::from_shape_vec((shape[0], shape[1]), data).map_err(|e| bad(&e.to_string()))
        };
        let projection = mat("projection")?;
        let classifier = mat("classifier")?;
        let key = format!("{prefix}.bias");
        let (_, bias) = parts
            .remove(&key)
            .ok_or_else(|| bad(&format!("missing tensor {key}")))?;
        if bias.len() != classifier.ncols() || classifier.nrows() != projection.ncols() {
            return Err(bad("inconsistent tensor shapes"));
        }
        Ok(ModelState {
            projection,
            classifier,
            bias: Array1::from(bias),
            step: header.step,
        })
    };
    let net = get_model("net")?;
    let ema = get_model("ema")?;
    Ok((
        net,
        EmaState {
            model: ema,
            alpha: header.alpha,
        },
    ))
}
