use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use joel_core::dataset::synth::{generate_synthetic, SynthConfig};
use joel_core::dataset::{read_events, write_annotated, write_events, DatasetError};
use joel_core::taxonomy::{annotate_dataset, load_mapping, load_taxonomy, TaxonomyError};

use crate::{read_json, write_json, Invalid};

#[derive(Clone, Copy, ValueEnum)]
pub enum Scenario {
    /// Eight rule-backed concepts.
    Default,
    /// Three rule-backed concepts and one no rule maps to.
    ColdStart,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Generator settings as JSON; omitted fields keep the scenario's values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let config = match args.config {
        Some(path) => read_json::<SynthConfig>(&path).map_err(|e| Invalid(format!("{e:#}")))?,
        None => match args.scenario {
            Scenario::Default => SynthConfig::default(),
            Scenario::ColdStart => SynthConfig::cold_start_scenario(),
        },
    };
    let data = generate_synthetic(&config, args.seed).map_err(dataset_err)?;
    let tax = data.taxonomy();
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_events(dir.join("events.csv"), &data.events)?;
    std::fs::write(dir.join("taxonomy.json"), tax.to_json_string() + "\n")?;
    write_json(&dir.join("mapping.json"), &data.mapping.to_json_map(tax))?;
    write_annotated(dir.join("truth.csv"), &data.truth_rows(), tax)?;
    write_json(&dir.join("splits.json"), &data.split)?;
    let fraud = data.events.iter().filter(|e| e.fraud_label).count();
    eprintln!(
        "{} events ({fraud} fraud), {} concepts, {} mapped rules -> {}",
        data.events.len(),
        tax.len(),
        data.mapping.len(),
        dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct AnnotateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn annotate(args: AnnotateArgs) -> Result<()> {
    let tax = load_taxonomy(&args.taxonomy).map_err(taxonomy_err)?;
    let mapping = load_mapping(&args.mapping, &tax).map_err(taxonomy_err)?;
    let events = read_events(&args.input).map_err(dataset_err)?;
    let (rows, stats) = annotate_dataset(events.rows, &mapping, &tax);
    write_annotated(&args.out, &rows, &tax)?;
    eprintln!(
        "{} rows, {} fallback, {} duplicate ids dropped",
        stats.rows, stats.fallback_rows, events.duplicates
    );
    eprintln!(
        "unknown rules: {} occurrences of {} ids",
        stats.unknown_rules,
        stats.unknown_by_rule.len()
    );
    for (rule, n) in &stats.unknown_by_rule {
        eprintln!("  {rule}\t{n}");
    }
    Ok(())
}

pub fn taxonomy_err(e: TaxonomyError) -> anyhow::Error {
    match e {
        TaxonomyError::Io { .. } => e.into(),
        other => Invalid(other.to_string()).into(),
    }
}

pub fn dataset_err(e: DatasetError) -> anyhow::Error {
    match e {
        DatasetError::Io { .. } => e.into(),
        other => Invalid(other.to_string()).into(),
    }
}
