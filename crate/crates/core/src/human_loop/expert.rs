use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Decision, FeedbackDraft, FeedbackSource};
use crate::dataset::RawEvent;
use crate::model::Prediction;
use crate::taxonomy::{ConceptSet, ConceptTaxonomy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub expert_id: String,
    #[serde(default = "unit_multiplier")]
    pub lr_multiplier: f64,
    #[serde(default)]
    pub accuracy_estimate: Option<f64>,
    #[serde(default)]
    pub qualified: bool,
}

fn unit_multiplier() -> f64 {
    1.0
}

impl ExpertProfile {
    /// Multiplier 1, unknown accuracy, not qualified.
    pub fn new(expert_id: &str) -> Self {
        Self {
            expert_id: expert_id.to_string(),
            lr_multiplier: 1.0,
            accuracy_estimate: None,
            qualified: false,
        }
    }

    /// A qualified expert with the given multiplier.
    pub fn trusted(expert_id: &str, lr_multiplier: f64) -> Self {
        Self {
            lr_multiplier,
            qualified: true,
            ..Self::new(expert_id)
        }
    }

    pub fn with_accuracy(mut self, accuracy: f64) -> Self {
        self.accuracy_estimate = Some(accuracy);
        self
    }

    pub fn apply_gate(&mut self, policy: &GatePolicy) -> bool {
        self.qualified = gate_with(self, policy);
        self.qualified
    }
}

/// Experts by id. Iteration order is the tuning group order.
pub type ExpertRegistry = BTreeMap<String, ExpertProfile>;

pub fn registry(profiles: impl IntoIterator<Item = ExpertProfile>) -> ExpertRegistry {
    profiles.into_iter().map(|p| (p.expert_id.clone(), p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    pub min_accuracy: f64,
    /// Outcome for an expert whose accuracy has not been measured.
    pub unknown_qualifies: bool,
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self {
            min_accuracy: 0.5,
            unknown_qualifies: false,
        }
    }
}

/// Qualified iff the accuracy estimate is known and at least `min_accuracy`.
pub fn expert_gate(profile: &ExpertProfile, min_accuracy: f64) -> bool {
    gate_with(
        profile,
        &GatePolicy {
            min_accuracy,
            unknown_qualifies: false,
        },
    )
}

pub fn gate_with(profile: &ExpertProfile, policy: &GatePolicy) -> bool {
    profile.lr_multiplier > 0.0
        && profile
            .accuracy_estimate
            .map_or(policy.unknown_qualifies, |a| a >= policy.min_accuracy)
}

/// Fraction of decisions that match the true label.
pub fn decision_accuracy(pairs: impl IntoIterator<Item = (Decision, bool)>) -> Option<f64> {
    let (mut right, mut n) = (0usize, 0usize);
    for (d, fraud) in pairs {
        n += 1;
        right += usize::from(d.is_fraud() == fraud);
    }
    (n > 0).then(|| right as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub fraud: bool,
    pub concepts: ConceptSet,
}

/// Reproduces the truth with the decision and each concept flipped
/// independently at `noise_rate`.
#[derive(Debug, Clone)]
pub struct SimulatedExpert {
    pub expert_id: String,
    pub noise_rate: f64,
    rng: ChaCha8Rng,
}

impl SimulatedExpert {
    pub fn new(expert_id: &str, noise_rate: f64, seed: u64) -> Self {
        Self {
            expert_id: expert_id.to_string(),
            noise_rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An empty noisy concept set is replaced by the fallback that matches
    /// the reported decision.
    pub fn review(&mut self, truth: &GroundTruth, tax: &ConceptTaxonomy) -> (Decision, ConceptSet) {
        let p = self.noise_rate.clamp(0.0, 1.0);
        let mut decision = Decision::from_fraud(truth.fraud);
        if self.rng.random_bool(p) {
            decision = decision.flipped();
        }
        let mut concepts = ConceptSet::empty(tax.len());
        for k in 0..tax.len() {
            if truth.concepts.contains(k) != self.rng.random_bool(p) {
                concepts.insert(k);
            }
        }
        if concepts.is_empty() {
            concepts.insert(tax.fallback_for(decision.is_fraud()));
        }
        (decision, concepts)
    }

    pub fn draft(&mut self, event_id: &str, truth: &GroundTruth, tax: &ConceptTaxonomy, model_version: u64) -> FeedbackDraft {
        let (decision, concepts) = self.review(truth, tax);
        FeedbackDraft {
            event_id: event_id.to_string(),
            expert_id: self.expert_id.clone(),
            decision,
            concepts: concepts.ids(tax).into_iter().map(String::from).collect(),
            model_version_seen: model_version,
        }
    }
}

/// A group of simulated experts that each review every event, with ground
/// truth supplied by `truth`.
pub struct SimulatedPanel<'a, F> {
    pub experts: Vec<SimulatedExpert>,
    pub taxonomy: &'a ConceptTaxonomy,
    pub truth: F,
}

impl<F> FeedbackSource for SimulatedPanel<'_, F>
where
    F: FnMut(&RawEvent) -> Option<GroundTruth>,
{
    fn review(&mut self, event: &RawEvent, prediction: &Prediction) -> Result<Vec<FeedbackDraft>, String> {
        let truth = (self.truth)(event).ok_or_else(|| format!("no ground truth for event {}", event.event_id))?;
        Ok(self
            .experts
            .iter_mut()
            .map(|e| e.draft(&event.event_id, &truth, self.taxonomy, prediction.model_version))
            .collect())
    }
}
