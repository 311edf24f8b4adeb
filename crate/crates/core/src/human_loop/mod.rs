//! Human tuning: a durable feedback store, batch-triggered fine-tuning with
//! per-expert learning rates, expert gating, simulated experts and the
//! continuous predict → review → tune loop.

mod expert;
mod simulate;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureCodec, RawEvent};
use crate::model::{JoelNetwork, ModelError, Prediction, FRAUD_CLASS};
use crate::nn::{derive_seed, Mode, OptimizerKind, OptimizerState};
use crate::taxonomy::ConceptSet;

pub use expert::{
    decision_accuracy, expert_gate, gate_with, registry, ExpertProfile, ExpertRegistry, GatePolicy, GroundTruth,
    SimulatedExpert, SimulatedPanel,
};
pub use simulate::{run_simulation, SimulationConfig, SimulationReport, VersionStep};
pub use store::{Decision, FeedbackDraft, FeedbackRecord, FeedbackStore};

#[derive(Debug, Error)]
pub enum HumanLoopError {
    #[error("unknown expert {0:?}")]
    UnknownExpert(String),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("feedback must name at least one concept")]
    EmptyConcepts,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{}:{line}: {message}", path.display())]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("codec produces {got} features but the model expects {expected}")]
    CodecMismatch { expected: usize, got: usize },
    #[error("invalid tuning config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuneConfig {
    /// Pending qualified records needed to trigger a tune.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Full-batch passes per expert group.
    pub epochs_per_tune: usize,
    /// Layers held fixed during tuning, in addition to already frozen ones.
    pub frozen_layers: Vec<usize>,
    /// Keep the decision layer fixed. Decision feedback then reaches the
    /// semantic layer and trunk only.
    pub freeze_decision: bool,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            learning_rate: 0.05,
            optimizer: OptimizerKind::Sgd,
            epochs_per_tune: 80,
            frozen_layers: Vec::new(),
            freeze_decision: true,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<(), HumanLoopError> {
        if self.batch_size == 0 || self.epochs_per_tune == 0 {
            return Err(HumanLoopError::Config("batch_size and epochs_per_tune must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(HumanLoopError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Events referenced by feedback, by id.
pub trait EventLookup {
    fn lookup(&self, event_id: &str) -> Option<&RawEvent>;
}

impl EventLookup for HashMap<String, RawEvent> {
    fn lookup(&self, event_id: &str) -> Option<&RawEvent> {
        self.get(event_id)
    }
}

impl EventLookup for BTreeMap<String, RawEvent> {
    fn lookup(&self, event_id: &str) -> Option<&RawEvent> {
        self.get(event_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGroup {
    pub expert_id: String,
    pub records: usize,
    pub learning_rate: f64,
    /// Joint loss on the group at the first and the last pass.
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub net: JoelNetwork,
    pub version: u64,
    pub consumed: Vec<u64>,
    pub groups: Vec<TuneGroup>,
    /// Consumed records whose event could not be found.
    pub missing_events: Vec<u64>,
}

pub fn check_codec(net: &JoelNetwork, codec: &FeatureCodec) -> Result<(), HumanLoopError> {
    if codec.dim() != net.input_dim {
        return Err(HumanLoopError::CodecMismatch {
            expected: net.input_dim,
            got: codec.dim(),
        });
    }
    Ok(())
}

/// Tunes a copy of `net` once at least `batch_size` qualified records are
/// pending; otherwise returns `None` and leaves everything untouched.
pub fn maybe_tune(
    net: &JoelNetwork,
    store: &mut FeedbackStore,
    cfg: &TuneConfig,
    experts: &ExpertRegistry,
    codec: &FeatureCodec,
    events: &impl EventLookup,
) -> Result<Option<TuneOutcome>, HumanLoopError> {
    cfg.validate()?;
    if store.pending_qualified(experts).len() < cfg.batch_size {
        return Ok(None);
    }
    tune_pending(net, store, cfg, experts, codec, events)
}

/// Tunes on up to `batch_size` pending qualified records, however few.
pub fn force_tune(
    net: &JoelNetwork,
    store: &mut FeedbackStore,
    cfg: &TuneConfig,
    experts: &ExpertRegistry,
    codec: &FeatureCodec,
    events: &impl EventLookup,
) -> Result<Option<TuneOutcome>, HumanLoopError> {
    cfg.validate()?;
    tune_pending(net, store, cfg, experts, codec, events)
}

fn tune_pending(
    net: &JoelNetwork,
    store: &mut FeedbackStore,
    cfg: &TuneConfig,
    experts: &ExpertRegistry,
    codec: &FeatureCodec,
    events: &impl EventLookup,
) -> Result<Option<TuneOutcome>, HumanLoopError> {
    check_codec(net, codec)?;
    let batch: Vec<FeedbackRecord> = store
        .pending_qualified(experts)
        .into_iter()
        .take(cfg.batch_size)
        .cloned()
        .collect();
    if batch.is_empty() {
        return Ok(None);
    }
    let mut groups: BTreeMap<&str, Vec<&FeedbackRecord>> = BTreeMap::new();
    for r in &batch {
        groups.entry(r.expert_id.as_str()).or_default().push(r);
    }

    let mut tuned = net.clone();
    let was_frozen: Vec<bool> = tuned.layers.iter().map(|l| l.frozen).collect();
    tuned.set_frozen(&cfg.frozen_layers, true)?;
    if cfg.freeze_decision {
        let d = tuned.decision_index();
        tuned.set_frozen(&[d], true)?;
    }
    let version = net.version + 1;
    let mut missing = Vec::new();
    let mut reports = Vec::new();

    for (g, (expert_id, records)) in groups.into_iter().enumerate() {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for r in records {
            match events.lookup(&r.event_id) {
                Some(e) => {
                    rows.push(e);
                    targets.push(r);
                }
                None => missing.push(r.seq),
            }
        }
        if rows.is_empty() {
            continue;
        }
        let x = codec.encode_events(&rows);
        let (y, s) = feedback_targets(&targets, &tuned)?;
        let lr = cfg.learning_rate * experts[expert_id].lr_multiplier;
        let mut opt = OptimizerState::new(cfg.optimizer, lr);
        let mut loss_before = f64::NAN;
        let mut loss_after = f64::NAN;
        for epoch in 0..cfg.epochs_per_tune {
            let seed = derive_seed(cfg.seed, &[version, g as u64, epoch as u64]);
            let trace = tuned.forward(&x, Mode::FineTune { seed })?;
            let loss = tuned.trace_loss(&trace, &y, &s).total;
            if epoch == 0 {
                loss_before = loss;
            }
            let grads = tuned.joint_backward(&trace, &y, &s)?;
            tuned.apply(&grads.grads, &mut opt)?;
            loss_after = loss;
        }
        reports.push(TuneGroup {
            expert_id: expert_id.to_string(),
            records: rows.len(),
            learning_rate: lr,
            loss_before,
            loss_after,
        });
    }

    for (layer, f) in tuned.layers.iter_mut().zip(was_frozen) {
        layer.frozen = f;
    }
    let seqs: Vec<u64> = batch.iter().map(|r| r.seq).collect();
    if reports.is_empty() {
        // Nothing trainable; retire the records so they cannot block the queue.
        store.mark_consumed(&seqs, net.version)?;
        return Ok(None);
    }
    tuned.commit_version();
    store.mark_consumed(&seqs, tuned.version)?;
    Ok(Some(TuneOutcome {
        version: tuned.version,
        net: tuned,
        consumed: seqs,
        groups: reports,
        missing_events: missing,
    }))
}

/// One-hot decisions and multi-hot concepts for a group of records.
fn feedback_targets(records: &[&FeedbackRecord], net: &JoelNetwork) -> Result<(Array2<f64>, Array2<f64>), HumanLoopError> {
    let n = records.len();
    let mut y = Array2::zeros((n, 2));
    let mut s = Array2::zeros((n, net.concepts()));
    for (i, r) in records.iter().enumerate() {
        let class = if r.decision.is_fraud() { FRAUD_CLASS } else { 1 - FRAUD_CLASS };
        y[[i, class]] = 1.0;
        for k in r.concept_set(&net.taxonomy)?.positions() {
            s[[i, k]] = 1.0;
        }
    }
    Ok((y, s))
}

/// |a ∩ b| / |a ∪ b|, with two empty sets counting as full agreement.
pub fn jaccard(a: &ConceptSet, b: &ConceptSet) -> f64 {
    let inter = a.positions().filter(|p| b.contains(*p)).count();
    let union: BTreeSet<usize> = a.positions().chain(b.positions()).collect();
    if union.is_empty() {
        1.0
    } else {
        inter as f64 / union.len() as f64
    }
}

/// Supplies reviews for streamed events.
pub trait FeedbackSource {
    fn review(&mut self, event: &RawEvent, prediction: &Prediction) -> Result<Vec<FeedbackDraft>, String>;
}

impl<F> FeedbackSource for F
where
    F: FnMut(&RawEvent, &Prediction) -> Result<Vec<FeedbackDraft>, String>,
{
    fn review(&mut self, event: &RawEvent, prediction: &Prediction) -> Result<Vec<FeedbackDraft>, String> {
        self(event, prediction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoopEntry {
    Prediction {
        index: usize,
        event_id: String,
        fraud_score: f64,
        flagged: bool,
        concepts_fired: Vec<String>,
        model_version: u64,
    },
    Feedback {
        index: usize,
        seq: u64,
        event_id: String,
        expert_id: String,
        decision: Decision,
        concepts: Vec<String>,
    },
    VersionChange {
        index: usize,
        from: u64,
        to: u64,
        consumed: usize,
        groups: Vec<TuneGroup>,
    },
    Error {
        index: usize,
        event_id: Option<String>,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopLog {
    pub entries: Vec<LoopEntry>,
}

impl LoopLog {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn predictions(&self) -> usize {
        self.count(|e| matches!(e, LoopEntry::Prediction { .. }))
    }

    pub fn feedback(&self) -> usize {
        self.count(|e| matches!(e, LoopEntry::Feedback { .. }))
    }

    pub fn errors(&self) -> usize {
        self.count(|e| matches!(e, LoopEntry::Error { .. }))
    }

    /// `(from, to)` for every committed tune, in order.
    pub fn version_changes(&self) -> Vec<(u64, u64)> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LoopEntry::VersionChange { from, to, .. } => Some((*from, *to)),
                _ => None,
            })
            .collect()
    }

    fn count(&self, f: impl Fn(&LoopEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| f(e)).count()
    }
}

/// Everything the loop mutates or consults besides the model.
pub struct LoopContext<'a> {
    pub store: &'a mut FeedbackStore,
    pub experts: &'a ExpertRegistry,
    pub codec: &'a FeatureCodec,
    pub tune: &'a TuneConfig,
}

/// For each streamed event: predict, collect reviews, store them and tune
/// when enough feedback has accumulated. Per-event failures are logged and
/// the loop moves on.
pub fn human_teaching_loop<I, S>(
    mut net: JoelNetwork,
    stream: I,
    source: &mut S,
    ctx: LoopContext<'_>,
) -> Result<(JoelNetwork, LoopLog), HumanLoopError>
where
    I: IntoIterator<Item = Result<RawEvent, String>>,
    S: FeedbackSource + ?Sized,
{
    check_codec(&net, ctx.codec)?;
    ctx.tune.validate()?;
    let mut log = LoopLog::default();
    let mut seen: HashMap<String, RawEvent> = HashMap::new();
    for (index, item) in stream.into_iter().enumerate() {
        let event = match item {
            Ok(e) => e,
            Err(message) => {
                log.entries.push(LoopEntry::Error {
                    index,
                    event_id: None,
                    message,
                });
                continue;
            }
        };
        let error = |message: String| LoopEntry::Error {
            index,
            event_id: Some(event.event_id.clone()),
            message,
        };
        let x = ctx.codec.encode_events(&[&event]);
        let prediction = match net.predict(x.row(0)) {
            Ok(p) => p,
            Err(e) => {
                log.entries.push(error(e.to_string()));
                continue;
            }
        };
        log.entries.push(LoopEntry::Prediction {
            index,
            event_id: event.event_id.clone(),
            fraud_score: prediction.fraud_score,
            flagged: prediction.flagged,
            concepts_fired: prediction.concepts_fired.clone(),
            model_version: prediction.model_version,
        });
        let drafts = match source.review(&event, &prediction) {
            Ok(d) => d,
            Err(message) => {
                log.entries.push(error(message));
                continue;
            }
        };
        for draft in drafts {
            let (expert_id, decision) = (draft.expert_id.clone(), draft.decision);
            match ctx.store.submit(draft, &net.taxonomy, ctx.experts) {
                Ok(seq) => {
                    let concepts = ctx.store.records().last().map(|r| r.concepts.clone()).unwrap_or_default();
                    log.entries.push(LoopEntry::Feedback {
                        index,
                        seq,
                        event_id: event.event_id.clone(),
                        expert_id,
                        decision,
                        concepts,
                    });
                }
                Err(e) => log.entries.push(error(e.to_string())),
            }
        }
        seen.insert(event.event_id.clone(), event);
        match maybe_tune(&net, ctx.store, ctx.tune, ctx.experts, ctx.codec, &seen) {
            Ok(Some(outcome)) => {
                log.entries.push(LoopEntry::VersionChange {
                    index,
                    from: net.version,
                    to: outcome.version,
                    consumed: outcome.consumed.len(),
                    groups: outcome.groups,
                });
                net = outcome.net;
            }
            Ok(None) => {}
            Err(e) => log.entries.push(LoopEntry::Error {
                index,
                event_id: None,
                message: format!("tuning failed: {e}"),
            }),
        }
    }
    Ok((net, log))
}
