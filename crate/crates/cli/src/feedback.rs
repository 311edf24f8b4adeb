use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;

use joel_core::dataset::{read_annotated, read_events, FeatureCodec, Split, SplitSpec};
use joel_core::human_loop::{
    registry, run_simulation, ExpertProfile, FeedbackStore, GatePolicy, SimulationConfig, TuneConfig,
};
use joel_core::model::{load_checkpoint, load_checkpoint_with_taxonomy, save_checkpoint};
use joel_core::taxonomy::load_taxonomy;
use joel_service::{ReviewService, ServiceConfig, SystemClock, DEFAULT_BAND};

use crate::data::{dataset_err, taxonomy_err};
use crate::models::summarize;
use crate::{codec_path, read_json, write_json, Invalid};

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Annotated CSV whose concepts and labels are the experts' ground truth.
    #[arg(long)]
    truth: PathBuf,
    /// Defaults to codec.json beside the model.
    #[arg(long)]
    codec: Option<PathBuf>,
    /// Keep only rows inside the production window of this split file.
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = TuneConfig::default().epochs_per_tune)]
    epochs_per_tune: usize,
    #[arg(long, default_value_t = 1)]
    experts: usize,
    /// Rows fed through the loop; the remainder is held out for scoring.
    #[arg(long, default_value_t = 1500)]
    stream: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Persist feedback to this JSONL store instead of memory.
    #[arg(long)]
    feedback: Option<PathBuf>,
    /// Write the tuned checkpoint here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let net = load_checkpoint(&args.model)?;
    let codec = FeatureCodec::load(codec_path(args.codec, &args.model))?;
    let mut rows = read_annotated(&args.truth, &net.taxonomy).map_err(dataset_err)?.rows;
    if let Some(path) = &args.splits {
        let spec: SplitSpec = read_json(path).map_err(|e| Invalid(format!("{e:#}")))?;
        rows.retain(|a| spec.assign(a.event.timestamp) == Some(Split::Production));
    }
    if rows.len() <= args.stream {
        return Err(Invalid(format!(
            "{} rows leave nothing to hold out after a stream of {}",
            rows.len(),
            args.stream
        ))
        .into());
    }
    let (stream, held_out) = rows.split_at(args.stream);
    let cfg = SimulationConfig {
        noise: args.noise,
        experts: args.experts,
        seed: args.seed,
        tune: TuneConfig {
            batch_size: args.batch,
            learning_rate: args.lr,
            epochs_per_tune: args.epochs_per_tune,
            seed: args.seed,
            ..TuneConfig::default()
        },
        ..SimulationConfig::default()
    };
    let mut store = match &args.feedback {
        Some(path) => FeedbackStore::open(path)?,
        None => FeedbackStore::in_memory(),
    };
    let (tuned, report) = run_simulation(net, &codec, stream, held_out, &cfg, &mut store)?;
    summarize("before", &report.before);
    summarize("after", &report.after);
    eprintln!("{} tunes from {} feedback records", report.versions.len(), report.feedback_records);
    for (id, d) in &report.concept_auc_delta {
        eprintln!("  {id}: {d:+.4}");
    }
    if let Some(out) = &args.out {
        save_checkpoint(&tuned, out)?;
    }
    write_json(&args.report, &report)
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// Must match the taxonomy embedded in the checkpoint.
    #[arg(long)]
    taxonomy: PathBuf,
    /// Events CSV queued for review in file order.
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    feedback: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.05)]
    tune_lr: f64,
    /// JSON array of expert profiles. Without it any expert id is accepted
    /// and trusted.
    #[arg(long)]
    experts: Option<PathBuf>,
    /// Accuracy an expert with a known estimate needs to be qualified.
    #[arg(long, default_value_t = GatePolicy::default().min_accuracy)]
    min_accuracy: f64,
    #[arg(long, default_value_t = DEFAULT_BAND.0)]
    band_lo: f64,
    #[arg(long, default_value_t = DEFAULT_BAND.1)]
    band_hi: f64,
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let tax = load_taxonomy(&args.taxonomy).map_err(taxonomy_err)?;
    let net = load_checkpoint_with_taxonomy(&args.model, &tax)?;
    let codec = FeatureCodec::load(&args.codec)?;
    let store = FeedbackStore::open(&args.feedback)?;
    let experts = match &args.experts {
        Some(path) => {
            let mut profiles: Vec<ExpertProfile> = read_json(path).map_err(|e| Invalid(format!("{e:#}")))?;
            let policy = GatePolicy {
                min_accuracy: args.min_accuracy,
                ..GatePolicy::default()
            };
            for p in profiles.iter_mut().filter(|p| p.accuracy_estimate.is_some()) {
                p.apply_gate(&policy);
            }
            Some(registry(profiles))
        }
        None => None,
    };
    let config = ServiceConfig {
        band: (args.band_lo, args.band_hi),
        tune: TuneConfig {
            batch_size: args.batch,
            learning_rate: args.tune_lr,
            ..TuneConfig::default()
        },
        open_registration: experts.is_none(),
        ..ServiceConfig::default()
    }
    .with_env()
    .map_err(Invalid)?;
    let service = ReviewService::new(
        net,
        codec,
        experts.unwrap_or_default(),
        store,
        config,
        Box::new(SystemClock),
    )?;
    let events = read_events(&args.events).map_err(dataset_err)?;
    let mut queued = 0;
    for e in events.rows {
        queued += usize::from(service.ingest(e)?);
    }
    let addr = SocketAddr::new(args.host, args.port);
    eprintln!("{queued} cases queued, listening on http://{addr}");
    let runtime = tokio::runtime::Runtime::new()?;
    runtime
        .block_on(joel_service::serve(Arc::new(service), addr))
        .with_context(|| format!("serving on {addr}"))
}
