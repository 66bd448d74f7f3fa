use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use trackmill::association::{associate, FrameEncoder, IdentityEncoder, DEFAULT_WINDOW};
use trackmill::cluster::{ClusterConfig, EpsPolicy};
use trackmill::eval::evaluate_retrieval;
use trackmill::isolation::isolate_tracklets;
use trackmill::manifest::{load_manifest, save_manifest, save_manifest_with_sidecar};
use trackmill::model::{load_model, save_model};
use trackmill::noise::{noise_report, IdCounting};
use trackmill::oracle::{embed_dataset, synthetic_clean, OracleConfig, SyntheticSpec};
use trackmill::pipeline::{
    frame_embeddings, retrieval_set, run, write_epoch_csv, write_json, PipelineConfig,
};
use trackmill::simulate::{generate_noisy_dataset, plan_simulation, IdsPerNoisyDist};
use trackmill::trainer::{train, TrainConfig};
use trackmill::{Error, ErrorCategory, NoiseRates, Result};

#[derive(Parser)]
#[command(
    name = "trackmill",
    version,
    about = "Noisy tracklet simulation, clustering and self-training"
)]
struct Cli {
    /// Worker threads (also read from TRACKMILL_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a clean labeled dataset.
    Synth(SynthArgs),
    /// Report fragmentation and switch rates of a labeled dataset.
    Measure(MeasureArgs),
    /// Inject fragmentation and ID switches at target rates.
    Simulate(SimulateArgs),
    /// Attach oracle embeddings to every frame.
    Embed(EmbedArgs),
    /// Split tracklets by clustering their frames.
    Isolate(IsolateArgs),
    /// Cluster tracklets into pseudo labels.
    Associate(AssociateArgs),
    /// Self-train the projection model.
    Train(TrainArgs),
    /// Retrieval mAP and CMC for a query and gallery.
    Eval(EvalArgs),
    /// Run every stage from a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Counting {
    /// How identities are counted: per-camera or global.
    #[arg(long, default_value = "per-camera")]
    counting: IdCounting,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    ids: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 4)]
    cameras_per_id: usize,
    #[arg(long, default_value_t = 40)]
    min_len: usize,
    #[arg(long, default_value_t = 120)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    first_pid: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[command(flatten)]
    counting: Counting,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    rfm: f64,
    #[arg(long)]
    rsw: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// IDs-per-noisy-tracklet distribution, `k:p,...`.
    #[arg(long)]
    dist: Option<IdsPerNoisyDist>,
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[command(flatten)]
    counting: Counting,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.15)]
    sigma: f64,
    /// Derive sigma from the center spacing instead.
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    sigma_camera: f64,
    #[arg(long, default_value_t = 0.01)]
    drift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write embeddings inline instead of to a binary sidecar.
    #[arg(long)]
    inline: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct IsolateArgs {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    eps: f64,
    #[arg(long, default_value_t = 4)]
    min_pts: usize,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AssociateArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// `pN` for the N-th percentile of pairwise distances, or `fixed:V`.
    #[arg(long, default_value = "p0.1")]
    eps_policy: EpsPolicy,
    #[arg(long, default_value_t = 4)]
    min_pts: usize,
    /// Encode frames with this model's student net; raw embeddings otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    epoch: u32,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long)]
    input: PathBuf,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "p0.1")]
    eps_policy: EpsPolicy,
    #[arg(long, default_value_t = 4)]
    min_pts: usize,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-epoch CSV table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    ranks: Vec<usize>,
    /// Encode with a trained model; raw embeddings otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use the student net instead of the mean net.
    #[arg(long)]
    student: bool,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    skip_isolation: bool,
}

fn print_json<T: Serialize>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("reports serialise");
    // A closed pipe (`| head`) is not an error worth a panic.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_json(p, value),
        None => {
            print_json(value);
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_ids: a.ids,
        n_cameras: a.cameras,
        cameras_per_id: a.cameras_per_id,
        min_len: a.min_len,
        max_len: a.max_len,
        first_pid: a.first_pid,
    };
    let ds = synthetic_clean(&spec, a.seed)?;
    save_manifest(&ds, &a.output)?;
    print_json(&noise_report(&ds, IdCounting::default())?);
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let clean = load_manifest(&a.input)?;
    let plan = plan_simulation(
        &clean,
        NoiseRates::new(a.rfm, a.rsw)?,
        &a.dist.unwrap_or_default(),
        a.seed,
    )?;
    let noisy = generate_noisy_dataset(&clean, &plan)?;
    save_manifest(&noisy, &a.output)?;
    print_json(&noise_report(&noisy, a.counting.counting)?);
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let ds = load_manifest(&a.input)?;
    let cfg = OracleConfig {
        dim: a.dim,
        sigma_intra: a.sigma,
        separation_ratio: a.separation,
        sigma_camera: a.sigma_camera,
        drift: a.drift,
        seed: a.seed,
    };
    let (out, report) = embed_dataset(&ds, &cfg)?;
    if a.inline {
        save_manifest(&out, &a.output)?;
    } else {
        save_manifest_with_sidecar(&out, &a.output)?;
    }
    print_json(&report);
    Ok(())
}

fn cmd_isolate(a: IsolateArgs) -> Result<()> {
    let ds = load_manifest(&a.input)?;
    let feats = frame_embeddings(&ds)?;
    let out = isolate_tracklets(&ds, &feats, &ClusterConfig::fixed(a.eps, a.min_pts))?;
    save_manifest_with_sidecar(&out.dataset, &a.output)?;
    emit(&out.report, a.report.as_deref())
}

fn cmd_associate(a: AssociateArgs) -> Result<()> {
    let ds = load_manifest(&a.input)?;
    let cfg = ClusterConfig {
        eps_policy: a.eps_policy,
        min_pts: a.min_pts,
    };
    let model = a.model.as_deref().map(load_model).transpose()?;
    let enc: &dyn FrameEncoder = match &model {
        Some((net, _)) => net,
        None => &IdentityEncoder,
    };
    let labels = associate(&ds, enc, &cfg, a.window, a.seed, a.epoch)?;
    write_json(&a.output, &labels)?;
    eprintln!(
        "{} classes, {} noise tracklets, eps {:.6}",
        labels.n_classes,
        labels.n_noise(),
        labels.eps
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_manifest(&a.input)?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let cluster = ClusterConfig {
        eps_policy: a.eps_policy,
        min_pts: a.min_pts,
    };
    let out = train(&ds, &cfg, &cluster)?;
    save_model(&a.output, &out.net, &out.ema)?;
    if let Some(p) = &a.csv {
        write_epoch_csv(p, &out.report)?;
    }
    emit(&out.report, a.report.as_deref())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let query = load_manifest(&a.query)?;
    let gallery = load_manifest(&a.gallery)?;
    let model = a.model.as_deref().map(load_model).transpose()?;
    let enc: &dyn FrameEncoder = match &model {
        Some((net, _)) if a.student => net,
        Some((_, ema)) => &ema.model,
        None => &IdentityEncoder,
    };
    let q = retrieval_set(&query, enc)?;
    let g = retrieval_set(&gallery, enc)?;
    print_json(&evaluate_retrieval(&q, &g, &a.ranks)?);
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = PipelineConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.skip_isolation |= a.skip_isolation;
    let run = run(&cfg, a.out.as_deref())?;
    if a.out.is_none() {
        print_json(&run.summary);
    } else if let Some(q) = &run.summary.final_quality {
        eprintln!(
            "final: {} classes, purity {:.4}, noise {:.4}",
            run.summary.final_n_classes, q.purity, q.noise_fraction
        );
    }
    Ok(())
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("TRACKMILL_THREADS") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("TRACKMILL_THREADS must be an integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Measure(a) => {
            let ds = load_manifest(&a.input)?;
            print_json(&noise_report(&ds, a.counting.counting)?);
            Ok(())
        }
        Command::Simulate(a) => cmd_simulate(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Isolate(a) => cmd_isolate(a),
        Command::Associate(a) => cmd_associate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Stage => 4,
            })
        }
    }
}
