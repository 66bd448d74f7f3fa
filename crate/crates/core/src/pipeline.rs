//! End-to-end runs from a JSON config: simulate, embed, isolate, train, eval.
//!
//! Each stage writes into `<output_dir>/<stage>.partial/` and moves its files
//! into `output_dir` once the stage has succeeded, so a failed run leaves the
//! failing stage's directory behind with whatever it managed to write.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::association::{raw_rows, tracklet_feature, FrameEncoder, PseudoLabeling};
use crate::cluster::{ClusterConfig, EmbeddingMatrix};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, ClusterQuality, RetrievalReport, RetrievalSet};
use crate::isolation::{isolate_tracklets, IsolationReport};
use crate::manifest::{load_manifest, save_manifest, save_manifest_with_sidecar};
use crate::model::{save_model, ModelState};
use crate::noise::{noise_report, tracklet_profile, IdCounting, NoiseRates, NoiseReport};
use crate::oracle::{embed_dataset, synthetic_clean, OracleConfig, OracleReport, SyntheticSpec};
use crate::rng;
use crate::simulate::{generate_noisy_dataset, plan_simulation, IdsPerNoisyDist};
use crate::trainer::{train, EpochReport, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    /// Generate a clean labeled dataset.
    Synthetic(SyntheticSpec),
    /// Load a manifest.
    Manifest(PathBuf),
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub r_fm: f64,
    pub r_sw: f64,
    pub ids_per_noisy: IdsPerNoisyDist,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            r_fm: 2.5,
            r_sw: 1.5,
            ids_per_noisy: IdsPerNoisyDist::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalSource {
    /// Fresh clean identities from the synthetic generator, disjoint from
    /// the training IDs; the first tracklet of each ID is its query.
    HeldOut { n_ids: usize },
    /// Query and gallery manifests with embeddings and labels.
    Files { query: PathBuf, gallery: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub source: EvalSource,
    pub ranks: Vec<usize>,
    /// Evaluate with the EMA teacher rather than the student.
    pub use_mean_net: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            source: EvalSource::HeldOut { n_ids: 100 },
            ranks: vec![1, 5, 10, 20],
            use_mean_net: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this one; nested `seed` fields are
    /// overwritten during resolution.
    pub seed: u64,
    pub input: InputConfig,
    pub simulate: Option<SimulateConfig>,
    /// Oracle embedding; `None` keeps the embeddings already in the input.
    pub embed: Option<OracleConfig>,
    pub skip_isolation: bool,
    pub isolation: ClusterConfig,
    pub association: ClusterConfig,
    pub train: TrainConfig,
    pub eval: Option<EvalConfig>,
    pub counting: IdCounting,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            input: InputConfig::default(),
            simulate: Some(SimulateConfig::default()),
            embed: Some(OracleConfig::default()),
            skip_isolation: false,
            isolation: ClusterConfig::intra(),
            association: ClusterConfig::inter(),
            train: TrainConfig::default(),
            eval: Some(EvalConfig::default()),
            counting: IdCounting::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills in derived seeds and checks every section.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Some(e) = &mut c.embed {
            e.seed = rng::derive_seed(c.seed, &[rng::ORACLE_CENTER]);
            e.validate()?;
        }
        c.train.seed = rng::derive_seed(c.seed, &[rng::MODEL_INIT]);
        c.train.validate()?;
        c.isolation.validate()?;
        c.association.validate()?;
        if let Some(s) = &c.simulate {
            NoiseRates::new(s.r_fm, s.r_sw)?;
        }
        if let Some(ev) = &c.eval {
            if ev.ranks.is_empty() || ev.ranks.contains(&0) {
                return Err(Error::Config(
                    "eval ranks must be a non-empty list of values >= 1".into(),
                ));
            }
            if let (EvalSource::HeldOut { .. }, InputConfig::Manifest(_)) = (&ev.source, &c.input) {
                return Err(Error::Config(
                    "held-out evaluation needs a synthetic input".into(),
                ));
            }
            if matches!(ev.source, EvalSource::HeldOut { .. }) && c.embed.is_none() {
                return Err(Error::Config(
                    "held-out evaluation needs an embed section".into(),
                ));
            }
        }
        Ok(c)
    }
}

/// A stage report together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub stage: String,
    pub config: PipelineConfig,
    pub report: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateStage {
    pub n_noisy: usize,
    pub before: NoiseReport,
    pub after: NoiseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolateStage {
    pub skipped: bool,
    pub report: Option<IsolationReport>,
    pub after: Option<NoiseReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStage {
    pub net: String,
    pub n_query: usize,
    pub n_gallery: usize,
    pub retrieval: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub isolation_skipped: bool,
    pub n_tracklets_trained: usize,
    pub final_n_classes: usize,
    pub final_quality: Option<ClusterQuality>,
    /// Mean total loss per epoch; `None` for skipped epochs.
    pub loss_curve: Vec<Option<f64>>,
    pub simulate: Option<SimulateStage>,
    pub embed: Option<OracleReport>,
    pub isolate: IsolateStage,
    pub train: TrainReport,
    pub eval: Option<EvalStage>,
}

/// Everything a run produced, for callers that stay in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    pub summary: PipelineSummary,
    pub net: ModelState,
    pub ema: crate::model::EmaState,
    pub labels: PseudoLabeling,
}

struct Output<'a> {
    dir: Option<&'a Path>,
    config: &'a PipelineConfig,
}

impl Output<'_> {
    /// Runs `write` against a fresh `<stage>.partial` directory, then moves
    /// its files into the output directory.
    fn stage<T: Serialize>(
        &self,
        stage: &str,
        report: &T,
        write: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let tmp = dir.join(format!("{stage}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write(&tmp)?;
        let env = Envelope {
            stage: stage.to_string(),
            config: self.config.clone(),
            report,
        };
        write_json(&tmp.join(format!("{stage}.report.json")), &env)?;
        for entry in fs::read_dir(&tmp).map_err(|e| Error::io(&tmp, e))? {
            let from = entry.map_err(|e| Error::io(&tmp, e))?.path();
            let to = dir.join(from.file_name().expect("directory entries have names"));
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        fs::remove_dir(&tmp).map_err(|e| Error::io(&tmp, e))
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialise");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct CsvRow {
    epoch: u32,
    n_classes: usize,
    n_noise: usize,
    eps: f64,
    iterations: usize,
    loss_id: Option<f64>,
    loss_soft_id: Option<f64>,
    loss_triplet: Option<f64>,
    loss_soft_triplet: Option<f64>,
    loss_total: Option<f64>,
    purity: Option<f64>,
    frame_purity: Option<f64>,
    coverage: Option<f64>,
    skipped: bool,
}

impl From<&EpochReport> for CsvRow {
    fn from(e: &EpochReport) -> Self {
        CsvRow {
            epoch: e.epoch,
            n_classes: e.n_classes,
            n_noise: e.n_noise,
            eps: e.eps,
            iterations: e.iterations,
            loss_id: e.loss.map(|l| l.id),
            loss_soft_id: e.loss.map(|l| l.soft_id),
            loss_triplet: e.loss.map(|l| l.triplet),
            loss_soft_triplet: e.loss.map(|l| l.soft_triplet),
            loss_total: e.loss.map(|l| l.total),
            purity: e.quality.as_ref().map(|q| q.purity),
            frame_purity: e.quality.as_ref().map(|q| q.frame_purity),
            coverage: e.quality.as_ref().map(|q| q.coverage),
            skipped: e.skipped,
        }
    }
}

/// Writes the per-epoch table as CSV.
pub fn write_epoch_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for e in &report.epochs {
        w.serialize(CsvRow::from(e))
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-frame unit-norm rows of the stored embeddings, in dataset order.
pub fn frame_embeddings(ds: &Dataset) -> Result<EmbeddingMatrix> {
    let dim = ds
        .embedding_dim()
        .ok_or_else(|| Error::Integrity("frames carry no embeddings".into()))?;
    let rows: Vec<&[f32]> = ds
        .frames()
        .map(|f| {
            f.embedding.as_deref().ok_or_else(|| {
                Error::Integrity(format!(
                    "tracklet `{}` seq {} has no embedding",
                    f.tracklet_id, f.seq
                ))
            })
        })
        .collect::<Result<_>>()?;
    EmbeddingMatrix::from_f32_rows(rows, dim)
}

/// One feature per tracklet over all of its frames.
pub fn full_tracklet_features(ds: &Dataset, enc: &dyn FrameEncoder) -> Result<EmbeddingMatrix> {
    use rayon::prelude::*;
    let rows: Vec<_> = ds
        .tracklets
        .par_iter()
        .map(|t| {
            let idx: Vec<usize> = (0..t.len()).collect();
            tracklet_feature(enc.encode(raw_rows(t, &idx)?.view())?.view())
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = ndarray::Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    EmbeddingMatrix::from_unit_rows(m)
}

/// Tracklet features with majority identity and camera.
pub fn retrieval_set(ds: &Dataset, enc: &dyn FrameEncoder) -> Result<RetrievalSet> {
    let labels = ds
        .tracklets
        .iter()
        .map(|t| Ok(tracklet_profile(t)?.majority_id))
        .collect::<Result<_>>()?;
    let cameras = ds.tracklets.iter().map(|t| t.camera_id).collect();
    RetrievalSet::new(full_tracklet_features(ds, enc)?, labels, cameras)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every configured stage. With `output_dir` set, artifacts and
/// per-stage reports are written there.
pub fn run(config: &PipelineConfig, output_dir: Option<&Path>) -> Result<PipelineRun> {
    let cfg = config.resolved()?;
    if let Some(d) = output_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let out = Output {
        dir: output_dir,
        config: &cfg,
    };

    let input = stage(
        "input",
        match &cfg.input {
            InputConfig::Synthetic(spec) => {
                synthetic_clean(spec, rng::derive_seed(cfg.seed, &[rng::SYNTH]))
            }
            InputConfig::Manifest(p) => load_manifest(p),
        },
    )?;

    let (ds, simulate) = match &cfg.simulate {
        None => (input, None),
        Some(sim) => stage(
            "simulate",
            (|| {
                let before = noise_report(&input, cfg.counting)?;
                let plan = plan_simulation(
                    &input,
                    NoiseRates::new(sim.r_fm, sim.r_sw)?,
                    &sim.ids_per_noisy,
                    rng::derive_seed(cfg.seed, &[rng::SIMULATE]),
                )?;
                let noisy = generate_noisy_dataset(&input, &plan)?;
                let report = SimulateStage {
                    n_noisy: plan.n_noisy,
                    before,
                    after: noise_report(&noisy, cfg.counting)?,
                };
                out.stage("simulate", &report, |d| {
                    save_manifest(&noisy, d.join("noisy.jsonl"))
                })?;
                Ok((noisy, Some(report)))
            })(),
        )?,
    };

    let (ds, embed) = match &cfg.embed {
        None => (ds, None),
        Some(oc) => stage(
            "embed",
            (|| {
                let (embedded, report) = embed_dataset(&ds, oc)?;
                out.stage("embed", &report, |d| {
                    save_manifest_with_sidecar(&embedded, d.join("embedded.jsonl")).map(|_| ())
                })?;
                Ok((embedded, Some(report)))
            })(),
        )?,
    };

    let (ds, isolate) = if cfg.skip_isolation {
        let report = IsolateStage {
            skipped: true,
            report: None,
            after: None,
        };
        stage("isolate", out.stage("isolate", &report, |_| Ok(())))?;
        (ds, report)
    } else {
        stage(
            "isolate",
            (|| {
                let feats = frame_embeddings(&ds)?;
                let iso = isolate_tracklets(&ds, &feats, &cfg.isolation)?;
                let after = if iso.dataset.is_labeled() {
                    Some(noise_report(&iso.dataset, cfg.counting)?)
                } else {
                    None
                };
                let report = IsolateStage {
                    skipped: false,
                    report: Some(iso.report),
                    after,
                };
                out.stage("isolate", &report, |d| {
                    save_manifest_with_sidecar(&iso.dataset, d.join("isolated.jsonl")).map(|_| ())
                })?;
                Ok((iso.dataset, report))
            })(),
        )?
    };

    let trained = stage(
        "train",
        (|| {
            let t = train(&ds, &cfg.train, &cfg.association)?;
            out.stage("train", &t.report, |d| {
                save_model(&d.join("model.bin"), &t.net, &t.ema)?;
                write_epoch_csv(&d.join("train.csv"), &t.report)?;
                write_json(&d.join("labels.json"), &t.labels)
            })?;
            Ok(t)
        })(),
    )?;

    let eval = match &cfg.eval {
        None => None,
        Some(ev) => Some(stage(
            "eval",
            (|| {
                let (query, gallery) = match &ev.source {
                    EvalSource::HeldOut { n_ids } => {
                        let InputConfig::Synthetic(spec) = &cfg.input else {
                            unreachable!("checked in resolution")
                        };
                        let test_spec = SyntheticSpec {
                            n_ids: *n_ids,
                            first_pid: spec.first_pid + spec.n_ids as u32,
                            ..spec.clone()
                        };
                        let clean =
                            synthetic_clean(&test_spec, rng::derive_seed(cfg.seed, &[rng::SYNTH]))?;
                        let oc = cfg.embed.as_ref().expect("checked in resolution");
                        let (test, _) = embed_dataset(&clean, oc)?;
                        let mut seen = std::collections::HashSet::new();
                        let (q, g): (Vec<_>, Vec<_>) = test
                            .tracklets
                            .into_iter()
                            .partition(|t| seen.insert(t.frames[0].gt_pid));
                        (Dataset::new(q)?, Dataset::new(g)?)
                    }
                    EvalSource::Files { query, gallery } => {
                        (load_manifest(query)?, load_manifest(gallery)?)
                    }
                };
                let (enc, net): (&dyn FrameEncoder, &str) = if ev.use_mean_net {
                    (&trained.ema.model, "mean")
                } else {
                    (&trained.net, "net")
                };
                let q = retrieval_set(&query, enc)?;
                let g = retrieval_set(&gallery, enc)?;
                let report = EvalStage {
                    net: net.to_string(),
                    n_query: q.len(),
                    n_gallery: g.len(),
                    retrieval: evaluate_retrieval(&q, &g, &ev.ranks)?,
                };
                out.stage("eval", &report, |_| Ok(()))?;
                Ok(report)
            })(),
        )?),
    };

    let last = trained.report.epochs.last();
    let summary = PipelineSummary {
        isolation_skipped: cfg.skip_isolation,
        n_tracklets_trained: ds.n_tracklets(),
        final_n_classes: trained.labels.n_classes,
        final_quality: last.and_then(|e| e.quality.clone()),
        loss_curve: trained
            .report
            .epochs
            .iter()
            .map(|e| e.loss.map(|l| l.total))
            .collect(),
        simulate,
        embed,
        isolate,
        train: trained.report.clone(),
        eval,
    };
    out.stage("pipeline", &summary, |_| Ok(()))?;
    Ok(PipelineRun {
        config: cfg,
        summary,
        net: trained.net,
        ema: trained.ema,
        labels: trained.labels,
    })
}
