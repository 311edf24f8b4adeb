mod data;
mod feedback;
mod models;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "joel", version, about = "Concept-based fraud detection with human-in-the-loop tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted concepts.
    Synth(data::SynthArgs),
    /// Label events with concepts through the rule mapping.
    Annotate(data::AnnotateArgs),
    /// Compare analytic and numeric gradients on random small networks.
    Gradcheck(models::GradcheckArgs),
    /// Grid-search bootstrap models and select one.
    Train(models::TrainArgs),
    /// Score an annotated dataset with a checkpoint.
    Evaluate(models::EvaluateArgs),
    /// Run the teaching loop with simulated experts.
    Simulate(feedback::SimulateArgs),
    /// Serve the review queue over HTTP.
    Serve(feedback::ServeArgs),
}

/// Bad input as opposed to an operational failure; exits with status 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// `codec.json` next to the checkpoint unless given explicitly.
pub fn codec_path(explicit: Option<PathBuf>, model: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| model.with_file_name("codec.json"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => data::synth(a),
        Command::Annotate(a) => data::annotate(a),
        Command::Gradcheck(a) => models::gradcheck(a),
        Command::Train(a) => models::train(a),
        Command::Evaluate(a) => models::evaluate(a),
        Command::Simulate(a) => feedback::simulate(a),
        Command::Serve(a) => feedback::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
