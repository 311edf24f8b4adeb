use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;

use joel_core::dataset::{prepare, read_annotated, read_events, AnnotatedEvent, FeatureCodec, SplitSpec, DEFAULT_TOP_K};
use joel_core::model::{gradient_check, load_checkpoint, save_checkpoint, DEFAULT_CONCEPT_FPR, DEFAULT_DECISION_FPR};
use joel_core::taxonomy::{annotate_dataset, load_mapping, load_taxonomy, ConceptTaxonomy};
use joel_core::trainer::{self, grid_search_with, select_best, DataSplits, GridSpec, MetricsReport};

use crate::data::{dataset_err, taxonomy_err};
use crate::{codec_path, read_json, write_json, Invalid};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Networks to check, seeded `seed..seed+count`.
    #[arg(long, default_value_t = 1)]
    count: u64,
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut worst = 0.0f64;
    for seed in args.seed..args.seed + args.count {
        let r = gradient_check(seed)?;
        println!("{}", serde_json::to_string(&r)?);
        worst = worst.max(r.max_error());
    }
    if worst > GRADCHECK_TOLERANCE {
        bail!("max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}");
    }
    eprintln!("ok: max relative error {worst:e}");
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Holds splits.json plus annotated.csv, or events.csv with mapping.json.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DECISION_FPR)]
    fpr: f64,
    #[arg(long, default_value_t = DEFAULT_CONCEPT_FPR)]
    concept_fpr: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
}

fn training_rows(dir: &Path, tax: &ConceptTaxonomy) -> Result<Vec<AnnotatedEvent>> {
    let annotated = dir.join("annotated.csv");
    if annotated.exists() {
        return Ok(read_annotated(&annotated, tax).map_err(dataset_err)?.rows);
    }
    let events = dir.join("events.csv");
    let mapping = dir.join("mapping.json");
    if !events.exists() || !mapping.exists() {
        return Err(Invalid(format!("{} has neither annotated.csv nor events.csv with mapping.json", dir.display())).into());
    }
    let mapping = load_mapping(&mapping, tax).map_err(taxonomy_err)?;
    let events = read_events(&events).map_err(dataset_err)?;
    Ok(annotate_dataset(events.rows, &mapping, tax).0)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let tax = load_taxonomy(&args.taxonomy).map_err(taxonomy_err)?;
    let split: SplitSpec = read_json(&args.data_dir.join("splits.json")).map_err(|e| Invalid(format!("{e:#}")))?;
    let grid_text = std::fs::read_to_string(&args.grid).with_context(|| format!("reading {}", args.grid.display()))?;
    let grid = GridSpec::from_json_str(&grid_text).map_err(|e| Invalid(e.to_string()))?;
    let rows = training_rows(&args.data_dir, &tax)?;
    let prep = prepare(rows, &split, args.top_k).map_err(dataset_err)?;
    eprintln!(
        "train {} / validation {} / test {} / production {}, {} features",
        prep.train.len(),
        prep.validation.len(),
        prep.test.len(),
        prep.production.len(),
        prep.codec.dim()
    );

    std::fs::create_dir_all(&args.out)?;
    prep.codec.save(args.out.join("codec.json"))?;
    let splits = DataSplits {
        train: &prep.train,
        validation: &prep.validation,
        test: &prep.test,
    };
    let total = grid.entries.len();
    let outcome = grid_search_with(&grid, splits, &tax, args.fpr, args.concept_fpr, |i, r| match r {
        Ok(r) => eprintln!(
            "[{}/{total}] {:?} lr {}: recall {:.4}, mean AUC {}, {} epochs",
            i + 1,
            r.entry.arch.hidden,
            r.entry.train.learning_rate,
            r.score.fraud_recall,
            r.score.mean_auc.map_or("n/a".into(), |m| format!("{m:.4}")),
            r.history.epochs.len()
        ),
        Err(f) => eprintln!("[{}/{total}] failed: {}", i + 1, f.error),
    })?;
    for r in &outcome.ranked {
        save_checkpoint(&r.net, args.out.join(format!("config_{}.json", r.grid_index)))?;
    }
    let (best, report) = select_best(&outcome)?;
    save_checkpoint(&best.net, args.out.join("selected.json"))?;
    write_json(&args.out.join("selection_report.json"), &report)?;
    eprintln!("selected config {}", best.grid_index);
    if !prep.production.is_empty() {
        let production = trainer::evaluate(&best.net, &prep.production, args.fpr, args.concept_fpr)?;
        summarize("production", &production);
        write_json(&args.out.join("production_report.json"), &production)?;
    }
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Annotated CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Defaults to codec.json beside the model.
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DECISION_FPR)]
    fpr: f64,
    #[arg(long, default_value_t = DEFAULT_CONCEPT_FPR)]
    concept_fpr: f64,
    #[arg(long)]
    report: PathBuf,
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let net = load_checkpoint(&args.model)?;
    let codec = FeatureCodec::load(codec_path(args.codec, &args.model))?;
    let rows = read_annotated(&args.data, &net.taxonomy).map_err(dataset_err)?.rows;
    if rows.is_empty() {
        return Err(Invalid(format!("{} has no rows", args.data.display())).into());
    }
    let report = trainer::evaluate(&net, &codec.encode_dataset(&rows), args.fpr, args.concept_fpr)?;
    summarize("evaluation", &report);
    write_json(&args.report, &report)
}

pub fn summarize(label: &str, report: &MetricsReport) {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    eprintln!(
        "{label}: {} instances, fraud recall {}, mean concept AUC {}",
        report.instances,
        fmt(report.decision_recall()),
        fmt(report.mean_auc)
    );
}

