use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{
    decision_accuracy, human_teaching_loop, registry, ExpertProfile, FeedbackStore, GroundTruth, HumanLoopError,
    LoopContext, LoopEntry, SimulatedExpert, SimulatedPanel, TuneConfig,
};
use crate::dataset::{AnnotatedEvent, FeatureCodec};
use crate::model::{JoelNetwork, DEFAULT_CONCEPT_FPR, DEFAULT_DECISION_FPR};
use crate::nn::derive_seed;
use crate::trainer::{evaluate, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Flip probability for each simulated decision and concept.
    pub noise: f64,
    pub experts: usize,
    pub seed: u64,
    pub tune: TuneConfig,
    pub decision_fpr: f64,
    pub concept_fpr: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            noise: 0.1,
            experts: 1,
            seed: 0,
            tune: TuneConfig::default(),
            decision_fpr: DEFAULT_DECISION_FPR,
            concept_fpr: DEFAULT_CONCEPT_FPR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionStep {
    /// Stream position of the review that triggered the tune.
    pub at_event: usize,
    pub from: u64,
    pub to: u64,
    pub consumed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub stream_events: usize,
    pub held_out_events: usize,
    pub feedback_records: usize,
    pub errors: usize,
    /// Share of simulated decisions that match the recorded label.
    pub expert_decision_accuracy: Option<f64>,
    pub versions: Vec<VersionStep>,
    pub parameter_hash_before: String,
    pub parameter_hash_after: String,
    pub before: MetricsReport,
    pub after: MetricsReport,
    /// After minus before, for concepts scored in both reports.
    pub concept_auc_delta: BTreeMap<String, f64>,
    pub mean_auc_delta: Option<f64>,
}

/// Streams `stream` through the teaching loop with simulated experts whose
/// ground truth is each row's concept set and label, then scores the model
/// on `held_out` before and after.
pub fn run_simulation(
    net: JoelNetwork,
    codec: &FeatureCodec,
    stream: &[AnnotatedEvent],
    held_out: &[AnnotatedEvent],
    cfg: &SimulationConfig,
    store: &mut FeedbackStore,
) -> Result<(JoelNetwork, SimulationReport), HumanLoopError> {
    if !(0.0..=1.0).contains(&cfg.noise) || cfg.experts == 0 {
        return Err(HumanLoopError::Config("noise must lie in [0, 1] and experts be at least 1".into()));
    }
    let held = codec.encode_dataset(held_out);
    let before = evaluate(&net, &held, cfg.decision_fpr, cfg.concept_fpr)?;
    let hash_before = net.parameter_hash();

    let panel_experts: Vec<SimulatedExpert> = (0..cfg.experts)
        .map(|i| SimulatedExpert::new(&format!("sim-{}", i + 1), cfg.noise, derive_seed(cfg.seed, &[i as u64])))
        .collect();
    let experts = registry(panel_experts.iter().map(|e| ExpertProfile::trusted(&e.expert_id, 1.0)));
    let truth: HashMap<&str, &AnnotatedEvent> = stream.iter().map(|a| (a.event.event_id.as_str(), a)).collect();
    let tax = net.taxonomy.clone();
    let mut panel = SimulatedPanel {
        experts: panel_experts,
        taxonomy: &tax,
        truth: |e: &crate::dataset::RawEvent| {
            truth.get(e.event_id.as_str()).map(|a| GroundTruth {
                fraud: a.event.fraud_label,
                concepts: a.concepts.clone(),
            })
        },
    };
    let ctx = LoopContext {
        store: &mut *store,
        experts: &experts,
        codec,
        tune: &cfg.tune,
    };
    let events = stream.iter().map(|a| Ok(a.event.clone()));
    let (net, log) = human_teaching_loop(net, events, &mut panel, ctx)?;

    let after = evaluate(&net, &held, cfg.decision_fpr, cfg.concept_fpr)?;
    let versions = log
        .entries
        .iter()
        .filter_map(|e| match e {
            LoopEntry::VersionChange {
                index,
                from,
                to,
                consumed,
                ..
            } => Some(VersionStep {
                at_event: *index,
                from: *from,
                to: *to,
                consumed: *consumed,
            }),
            _ => None,
        })
        .collect();
    let labels: HashMap<&str, bool> = stream.iter().map(|a| (a.event.event_id.as_str(), a.event.fraud_label)).collect();
    let accuracy = decision_accuracy(
        store
            .records()
            .iter()
            .filter_map(|r| labels.get(r.event_id.as_str()).map(|l| (r.decision, *l))),
    );
    let before_aucs: BTreeMap<&str, f64> = before.averaged_aucs().into_iter().collect();
    let concept_auc_delta = after
        .averaged_aucs()
        .into_iter()
        .filter_map(|(id, a)| before_aucs.get(id).map(|b| (id.to_string(), a - b)))
        .collect();
    let mean_auc_delta = before.mean_auc.zip(after.mean_auc).map(|(b, a)| a - b);
    let report = SimulationReport {
        config: cfg.clone(),
        stream_events: stream.len(),
        held_out_events: held_out.len(),
        feedback_records: log.feedback(),
        errors: log.errors(),
        expert_decision_accuracy: accuracy,
        versions,
        parameter_hash_before: hash_before,
        parameter_hash_after: net.parameter_hash(),
        before,
        after,
        concept_auc_delta,
        mean_auc_delta,
    };
    Ok((net, report))
}
