//! The epoch loop: regenerate pseudo labels, then optimise the student on
//! identity-balanced batches while the teacher tracks it by EMA.

use ndarray::{Array1, Array2, Dimension, Zip};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::association::{associate, raw_rows, sample_consecutive, PseudoLabeling, DEFAULT_WINDOW};
use crate::cluster::ClusterConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{cluster_quality, ClusterQuality};
use crate::losses::{total_loss, Batch, LossConfig, LossValues};
use crate::model::{ema_update, EmaState, Gradients, ModelState};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    /// Pseudo classes per batch (P).
    pub classes_per_batch: usize,
    /// Tracklets per class in a batch (S).
    pub instances_per_class: usize,
    /// Consecutive frames per tracklet sample.
    pub window: usize,
    /// Embedding size; defaults to the raw feature size.
    pub embed_dim: Option<usize>,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr: 0.00035,
            weight_decay: 0.0005,
            alpha: 0.999,
            classes_per_batch: 8,
            instances_per_class: 4,
            window: DEFAULT_WINDOW,
            embed_dim: None,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1), got {}", self.alpha));
        }
        if self.classes_per_batch < 2 || self.instances_per_class < 2 {
            return bad(format!(
                "batches need >= 2 classes and >= 2 instances each, got {}x{}",
                self.classes_per_batch, self.instances_per_class
            ));
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.embed_dim == Some(0) {
            return bad("embed_dim must be >= 1".into());
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u32,
    pub n_classes: usize,
    pub n_noise: usize,
    pub eps: f64,
    pub iterations: usize,
    /// Mean over the epoch's iterations; absent when the epoch was skipped.
    pub loss: Option<LossValues>,
    /// Against ground truth, when the dataset is labeled.
    pub quality: Option<ClusterQuality>,
    /// Fewer than two pseudo classes: nothing to contrast, no update.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: ModelState,
    pub ema: EmaState,
    pub report: TrainReport,
    /// Labels of the last epoch.
    pub labels: PseudoLabeling,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone)]
struct Moments<D: Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
    t: i32,
}

impl<D: Dimension> Moments<D> {
    fn zeros(shape: D) -> Self {
        Moments {
            m: ndarray::Array::zeros(shape.clone()),
            v: ndarray::Array::zeros(shape),
            t: 0,
        }
    }

    /// One AdamW step with decoupled weight decay.
    fn step(
        &mut self,
        p: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        lr: f64,
        wd: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        Zip::from(p)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + ADAM_EPS) + wd * *p);
            });
    }
}

struct Optimizer {
    projection: Moments<ndarray::Ix2>,
    classifier: Moments<ndarray::Ix2>,
    bias: Moments<ndarray::Ix1>,
}

impl Optimizer {
    fn new(m: &ModelState) -> Self {
        Optimizer {
            projection: Moments::zeros(m.projection.raw_dim()),
            classifier: Moments::zeros(m.classifier.raw_dim()),
            bias: Moments::zeros(m.bias.raw_dim()),
        }
    }

    fn reset_classifier(&mut self, m: &ModelState) {
        self.classifier = Moments::zeros(m.classifier.raw_dim());
        self.bias = Moments::zeros(m.bias.raw_dim());
    }

    fn step(&mut self, m: &mut ModelState, g: &Gradients, lr: f64, wd: f64) {
        self.projection
            .step(&mut m.projection, &g.projection, lr, wd);
        self.classifier
            .step(&mut m.classifier, &g.classifier, lr, wd);
        self.bias.step(&mut m.bias, &g.bias, lr, wd);
        m.step += 1;
    }
}

/// One batch item: tracklet index and its sampled frame window.
struct Item {
    tracklet: usize,
    label: usize,
    window: Vec<usize>,
}

fn sample_batch(
    classes: &[Vec<usize>],
    cfg: &TrainConfig,
    ds: &Dataset,
    r: &mut impl Rng,
) -> Result<Vec<Item>> {
    let p = cfg.classes_per_batch.min(classes.len());
    let s = cfg.instances_per_class;
    let mut items = Vec::with_capacity(p * s);
    for c in sample(r, classes.len(), p) {
        let members = &classes[c];
        let picks: Vec<usize> = if members.len() >= s {
            sample(r, members.len(), s)
                .into_iter()
                .map(|i| members[i])
                .collect()
        } else {
            (0..s)
                .map(|_| members[r.random_range(0..members.len())])
                .collect()
        };
        for t in picks {
            let window = sample_consecutive(ds.tracklets[t].len(), cfg.window, r)?;
            items.push(Item {
                tracklet: t,
                label: c,
                window,
            });
        }
    }
    Ok(items)
}

fn stack(rows: &[&Array1<f64>]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), rows.first().map_or(0, |r| r.len())));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(*r);
    }
    out
}

fn train_step(
    net: &mut ModelState,
    ema: &EmaState,
    opt: &mut Optimizer,
    ds: &Dataset,
    items: &[Item],
    cfg: &TrainConfig,
) -> Result<LossValues> {
    let raws: Vec<Array2<f64>> = items
        .par_iter()
        .map(|it| raw_rows(&ds.tracklets[it.tracklet], &it.window))
        .collect::<Result<_>>()?;
    let fwd: Vec<_> = raws
        .par_iter()
        .map(|x| Ok((net.forward(x.view())?, ema.model.forward(x.view())?)))
        .collect::<Result<_>>()?;
    let batch = Batch {
        features_net: stack(&fwd.iter().map(|f| &f.0.feature).collect::<Vec<_>>()),
        logits_net: stack(&fwd.iter().map(|f| &f.0.logits).collect::<Vec<_>>()),
        features_mean: stack(&fwd.iter().map(|f| &f.1.feature).collect::<Vec<_>>()),
        logits_mean: stack(&fwd.iter().map(|f| &f.1.logits).collect::<Vec<_>>()),
        labels: items.iter().map(|it| it.label).collect(),
    };
    let loss = total_loss(&batch, &cfg.loss)?;
    let parts: Vec<Gradients> = (0..items.len())
        .into_par_iter()
        .map(|i| {
            let mut g = Gradients::zeros_like(net);
            net.backward(
                raws[i].view(),
                &fwd[i].0,
                loss.grad_features.row(i),
                loss.grad_logits.row(i),
                &mut g,
            );
            g
        })
        .collect();
    // Fixed-order reduction keeps runs bit-identical.
    let mut grads = Gradients::zeros_like(net);
    for g in &parts {
        grads.add(g);
    }
    opt.step(net, &grads, cfg.lr, cfg.weight_decay);
    if !net.is_finite() {
        return Err(Error::Degenerate(format!(
            "non-finite parameters after step {}",
            net.step
        )));
    }
    Ok(loss.values)
}

fn mean_values(v: &[LossValues]) -> LossValues {
    let n = v.len() as f64;
    let mut m = LossValues::default();
    for x in v {
        m.id += x.id / n;
        m.soft_id += x.soft_id / n;
        m.triplet += x.triplet / n;
        m.soft_triplet += x.soft_triplet / n;
        m.total += x.total / n;
    }
    m
}

/// Runs the full schedule on an already isolated dataset whose frames carry
/// raw embeddings.
pub fn train(ds: &Dataset, cfg: &TrainConfig, cluster_cfg: &ClusterConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    cluster_cfg.validate()?;
    let d_raw = ds
        .embedding_dim()
        .ok_or_else(|| Error::Integrity("training needs per-frame embeddings".into()))?;
    let mut net = ModelState::new(d_raw, cfg.embed_dim.unwrap_or(d_raw), 0, cfg.seed);
    let mut ema = EmaState::new(&net, cfg.alpha)?;
    let mut opt = Optimizer::new(&net);
    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    let mut last = None;

    for epoch in 0..cfg.epochs {
        let labels = associate(ds, &net, cluster_cfg, cfg.window, cfg.seed, epoch)?;
        if labels.n_labeled() == 0 {
            return Err(Error::EpochAbort {
                epoch: epoch as usize,
                diagnostics: format!(
                    "all {} tracklets are noise at eps {:.6}, min_pts {}",
                    labels.labels.len(),
                    labels.eps,
                    cluster_cfg.min_pts
                ),
            });
        }
        let quality = if ds.is_labeled() {
            Some(cluster_quality(&labels, ds)?)
        } else {
            None
        };
        let k = labels.n_classes;
        let mut report = EpochReport {
            epoch,
            n_classes: k,
            n_noise: labels.n_noise(),
            eps: labels.eps,
            iterations: 0,
            loss: None,
            quality,
            skipped: k < 2,
        };
        if k >= 2 {
            // Cluster indices follow the fixed visit order, so a head of the
            // right width is kept; a new K needs a fresh one.
            if net.n_classes() != k {
                net.reset_classifier(
                    k,
                    &mut rng::stream(cfg.seed, &[rng::MODEL_INIT, 2, u64::from(epoch)]),
                );
                ema.model.classifier = net.classifier.clone();
                ema.model.bias = net.bias.clone();
                opt.reset_classifier(&net);
            }

            let mut classes: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, l) in labels.labels.values().enumerate() {
                if let Some(c) = l {
                    classes[*c as usize].push(i);
                }
            }
            let per_batch = cfg.classes_per_batch * cfg.instances_per_class;
            let iterations = labels.n_labeled().div_ceil(per_batch);
            let mut r = rng::stream(cfg.seed, &[rng::BATCH, u64::from(epoch)]);
            let mut values = Vec::with_capacity(iterations);
            for _ in 0..iterations {
                let items = sample_batch(&classes, cfg, ds, &mut r)?;
                values.push(train_step(&mut net, &ema, &mut opt, ds, &items, cfg)?);
                ema = ema_update(ema, &net)?;
            }
            report.iterations = iterations;
            report.loss = Some(mean_values(&values));
        }
        epochs.push(report);
        last = Some(labels);
    }
    let labels = last.ok_or_else(|| Error::Config("epochs must be >= 1".into()))?;
    Ok(TrainOutput {
        net,
        ema,
        report: TrainReport { epochs },
        labels,
    })
}
