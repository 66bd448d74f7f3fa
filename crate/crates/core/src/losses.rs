//! Hard and soft identity / triplet losses with analytic gradients.
//!
//! All functions are pure. Gradients are with respect to the student ("net")
//! logits or features; teacher ("mean net") inputs are constants.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One mini-batch of forward outputs from both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// N×d student features.
    pub features_net: Array2<f64>,
    /// N×K student logits (pre-softmax).
    pub logits_net: Array2<f64>,
    /// N×d teacher features.
    pub features_mean: Array2<f64>,
    /// N×K teacher logits.
    pub logits_mean: Array2<f64>,
    /// Hard pseudo label per row.
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda_id: f64,
    pub lambda_tri: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.5,
            lambda_id: 0.5,
            lambda_tri: 0.8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be >= 0, got {}",
                self.margin
            )));
        }
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_tri", self.lambda_tri),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn log_softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn softmax(row: ArrayView1<'_, f64>) -> Array1<f64> {
    log_softmax(row).mapv(f64::exp)
}

fn check_rows(b: &Batch) -> Result<usize> {
    let n = b.labels.len();
    if b.logits_net.nrows() != n || b.features_net.nrows() != n {
        return Err(Error::Shape(format!(
            "{n} labels for {} logit rows and {} feature rows",
            b.logits_net.nrows(),
            b.features_net.nrows()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(n)
}

/// Mean cross-entropy of `softmax(logits_net)` against the hard labels.
pub fn hard_id_loss(b: &Batch) -> Result<LossTerm> {
    let n = check_rows(b)?;
    let k = b.logits_net.ncols();
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, k));
    for (i, &y) in b.labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let ls = log_softmax(b.logits_net.row(i));
        value -= ls[y];
        let mut g = ls.mapv(f64::exp);
        g[y] -= 1.0;
        grad.row_mut(i).assign(&(g / n as f64));
    }
    Ok(LossTerm {
        value: value / n as f64,
        grad,
    })
}

/// Cross-entropy against the teacher's softmax distribution.
pub fn soft_id_loss(b: &Batch) -> Result<LossTerm> {
    let n = check_rows(b)?;
    if b.logits_mean.dim() != b.logits_net.dim() {
        return Err(Error::Shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            b.logits_mean.dim(),
            b.logits_net.dim()
        )));
    }
    let mut value = 0.0;
    let mut grad = Array2::zeros(b.logits_net.dim());
    for i in 0..n {
        let target = softmax(b.logits_mean.row(i));
        let ls = log_softmax(b.logits_net.row(i));
        value -= target.dot(&ls);
        grad.row_mut(i)
            .assign(&((ls.mapv(f64::exp) - &target) / n as f64));
    }
    Ok(LossTerm {
        value: value / n as f64,
        grad,
    })
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

fn distance_matrix(f: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = f.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean(f.row(i), f.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Hardest positive (farthest same-label row other than the anchor) and
/// hardest negative (nearest other-label row) per anchor. Ties go to the
/// lowest index.
pub fn mine_hardest(
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let d = distance_matrix(features);
    let n = labels.len();
    (0..n)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    if pos.is_none_or(|p| d[[i, j]] > d[[i, p]]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|q| d[[i, j]] < d[[i, q]]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => Ok((p, q)),
                (None, _) => Err(Error::Mining {
                    anchor: i,
                    missing: "positive",
                }),
                (_, None) => Err(Error::Mining {
                    anchor: i,
                    missing: "negative",
                }),
            }
        })
        .collect()
}

/// Adds `scale · ∂‖f_a − f_b‖/∂f` into `grad` (zero when the points coincide).
fn add_distance_grad(
    grad: &mut Array2<f64>,
    f: ArrayView2<'_, f64>,
    a: usize,
    b: usize,
    scale: f64,
) {
    let diff = &f.row(a) - &f.row(b);
    let norm = diff.dot(&diff).sqrt();
    if norm == 0.0 {
        return;
    }
    let g = diff * (scale / norm);
    {
        let mut ra = grad.row_mut(a);
        ra += &g;
    }
    let mut rb = grad.row_mut(b);
    rb -= &g;
}

/// Batch-hard triplet loss with hinge at `margin`.
pub fn hard_triplet_loss(b: &Batch, margin: f64) -> Result<LossTerm> {
    let n = check_rows(b)?;
    let pairs = mine_hardest(b.features_net.view(), &b.labels)?;
    triplet_with_pairs(b.features_net.view(), &pairs, margin, n)
}

fn triplet_with_pairs(
    f: ArrayView2<'_, f64>,
    pairs: &[(usize, usize)],
    margin: f64,
    n: usize,
) -> Result<LossTerm> {
    let mut value = 0.0;
    let mut grad = Array2::zeros(f.dim());
    let scale = 1.0 / n as f64;
    for (i, &(p, q)) in pairs.iter().enumerate() {
        let dp = euclidean(f.row(i), f.row(p));
        let dn = euclidean(f.row(i), f.row(q));
        let h = dp + margin - dn;
        if h > 0.0 {
            value += h;
            add_distance_grad(&mut grad, f, i, p, scale);
            add_distance_grad(&mut grad, f, i, q, -scale);
        }
    }
    Ok(LossTerm {
        value: value * scale,
        grad,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Soft triplet label `exp(d_n) / (exp(d_p) + exp(d_n))` for each anchor,
/// using the given mining pairs.
pub fn soft_triplet_labels(f: ArrayView2<'_, f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(p, q))| sigmoid(euclidean(f.row(i), f.row(q)) - euclidean(f.row(i), f.row(p))))
        .collect()
}

/// Binary cross-entropy between the student's and the teacher's soft triplet
/// labels. Pairs are mined once on the student features and reused for the
/// teacher.
pub fn soft_triplet_loss(b: &Batch) -> Result<LossTerm> {
    let n = check_rows(b)?;
    if b.features_mean.dim() != b.features_net.dim() {
        return Err(Error::Shape(format!(
            "teacher features {:?} vs student features {:?}",
            b.features_mean.dim(),
            b.features_net.dim()
        )));
    }
    let pairs = mine_hardest(b.features_net.view(), &b.labels)?;
    let targets = soft_triplet_labels(b.features_mean.view(), &pairs);
    let f = b.features_net.view();
    let mut value = 0.0;
    let mut grad = Array2::zeros(f.dim());
    let scale = 1.0 / n as f64;
    for (i, (&(p, q), &t)) in pairs.iter().zip(&targets).enumerate() {
        let z = euclidean(f.row(i), f.row(q)) - euclidean(f.row(i), f.row(p));
        // BCE(σ(z), t) = t·softplus(−z) + (1−t)·softplus(z); d/dz = σ(z) − t.
        value += t * softplus(-z) + (1.0 - t) * softplus(z);
        let dz = (sigmoid(z) - t) * scale;
        add_distance_grad(&mut grad, f, i, q, dz);
        add_distance_grad(&mut grad, f, i, p, -dz);
    }
    Ok(LossTerm {
        value: value * scale,
        grad,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub id: f64,
    pub soft_id: f64,
    pub triplet: f64,
    pub soft_triplet: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub values: LossValues,
    pub grad_logits: Array2<f64>,
    pub grad_features: Array2<f64>,
}

/// `(1−λ_id)·L_id + λ_id·L_sid + (1−λ_tri)·L_tri + λ_tri·L_stri`.
pub fn total_loss(b: &Batch, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let id = hard_id_loss(b)?;
    let sid = soft_id_loss(b)?;
    let tri = hard_triplet_loss(b, cfg.margin)?;
    let stri = soft_triplet_loss(b)?;
    let (wi, wt) = (cfg.lambda_id, cfg.lambda_tri);
    let total = (1.0 - wi) * id.value + wi * sid.value + (1.0 - wt) * tri.value + wt * stri.value;
    Ok(TotalLoss {
        values: LossValues {
            id: id.value,
            soft_id: sid.value,
            triplet: tri.value,
            soft_triplet: stri.value,
            total,
        },
        grad_logits: id.grad * (1.0 - wi) + sid.grad * wi,
        grad_features: tri.grad * (1.0 - wt) + stri.grad * wt,
    })
}
