//! Synthetic transaction generator with planted concepts.
//!
//! Each planted concept is a threshold on the standardized sum of 2–4 of its
//! own numeric features, so the ground-truth concept set of a row is a pure
//! function of the row. A concept's rules fire only when its condition holds,
//! and at least one of them always does. Fraud labels are
//! Bernoulli(prevalence); the concept pattern of a row follows its label
//! except for a `label_noise` fraction whose pattern is drawn from the
//! opposite class.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AnnotatedEvent, DatasetError, RawEvent, SplitSpec};
use crate::taxonomy::{Concept, ConceptSet, ConceptTaxonomy, Polarity, RuleConceptMapping};

/// Upper 20% quantile of the standard normal.
const Z_UPPER_20: f64 = 0.841_621_233_572_914_2;
/// Chance that a further rule of an active concept fires besides the lead one.
const EXTRA_RULE_RATE: f64 = 0.02;
/// The unmapped concept of [`SynthConfig::cold_start_scenario`].
pub const COLD_START_CONCEPT: &str = "trusted_device";
const CHANNELS: [&str; 5] = ["web", "app", "phone", "store", "marketplace"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub id: String,
    pub display_name: String,
    /// `fraud` or `legit`.
    pub polarity: Polarity,
    /// Number of legacy rules mapped to the concept; 0 plants a cold-start concept.
    pub rules: usize,
    /// Number of features defining the concept, 2..=4.
    pub n_features: usize,
    pub rate_in_fraud: f64,
    pub rate_in_legit: f64,
}

impl PlantedConcept {
    pub fn new(id: &str, polarity: Polarity, rules: usize, n_features: usize, rate_in_fraud: f64, rate_in_legit: f64) -> Self {
        Self {
            id: id.to_string(),
            display_name: id.replace('_', " "),
            polarity,
            rules,
            n_features,
            rate_in_fraud,
            rate_in_legit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub production: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_events: usize,
    pub start: DateTime<Utc>,
    pub span_days: f64,
    pub fraud_prevalence: f64,
    pub label_noise: f64,
    pub concepts: Vec<PlantedConcept>,
    pub noise_features: usize,
    /// Missing-value rate, applied to noise features only.
    pub missing_rate: f64,
    pub unmapped_rules: usize,
    pub unmapped_rule_rate: f64,
    pub splits: SplitFractions,
    pub undersample_keep_rate: f64,
}

impl Default for SynthConfig {
    /// Eight planted concepts plus the two fallbacks, 2.5% fraud.
    fn default() -> Self {
        use Polarity::*;
        Self {
            n_events: 50_000,
            start: Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap(),
            span_days: 320.0,
            fraud_prevalence: 0.025,
            label_noise: 0.01,
            concepts: vec![
                PlantedConcept::new("suspicious_billing_shipping", Fraud, 86, 3, 0.35, 0.003),
                PlantedConcept::new("suspicious_customer", Fraud, 58, 2, 0.35, 0.003),
                PlantedConcept::new("suspicious_payment", Fraud, 53, 4, 0.35, 0.003),
                PlantedConcept::new("suspicious_items", Fraud, 48, 2, 0.35, 0.003),
                PlantedConcept::new("suspicious_email", Fraud, 27, 3, 0.35, 0.003),
                PlantedConcept::new("suspicious_ip", Fraud, 24, 2, 0.35, 0.003),
                PlantedConcept::new("nothing_suspicious", Legit, 19, 3, 0.02, 0.40),
                PlantedConcept::new("good_customer_history", Legit, 11, 2, 0.05, 0.35),
            ],
            noise_features: 4,
            missing_rate: 0.05,
            unmapped_rules: 3,
            unmapped_rule_rate: 0.01,
            splits: SplitFractions {
                train: 0.6,
                validation: 0.15,
                test: 0.1,
                production: 0.15,
            },
            undersample_keep_rate: 1.0,
        }
    }
}

impl SynthConfig {
    /// Three rule-backed concepts plus `trusted_device`, which no legacy rule
    /// maps to and which is independent of the label: only human feedback
    /// can teach it.
    pub fn cold_start_scenario() -> Self {
        use Polarity::*;
        Self {
            n_events: 30_000,
            concepts: vec![
                PlantedConcept::new("suspicious_billing_shipping", Fraud, 40, 3, 0.5, 0.005),
                PlantedConcept::new("suspicious_ip", Fraud, 20, 2, 0.5, 0.005),
                PlantedConcept::new("nothing_suspicious", Legit, 15, 2, 0.02, 0.40),
                PlantedConcept::new(COLD_START_CONCEPT, Legit, 0, 2, 0.30, 0.30),
            ],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Config(m));
        if self.n_events == 0 {
            return bad("n_events must be positive".into());
        }
        if !(self.fraud_prevalence > 0.0 && self.fraud_prevalence < 1.0) {
            return bad(format!("fraud_prevalence must be in (0, 1), got {}", self.fraud_prevalence));
        }
        if !(0.0..=1.0).contains(&self.label_noise) || !(0.0..=1.0).contains(&self.missing_rate) {
            return bad("label_noise and missing_rate must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.unmapped_rule_rate) {
            return bad("unmapped_rule_rate must be in [0, 1]".into());
        }
        if !(self.span_days > 0.0) {
            return bad("span_days must be positive".into());
        }
        if self.concepts.is_empty() {
            return bad("at least one planted concept is required".into());
        }
        if !self.concepts.iter().any(|c| c.polarity == Polarity::Fraud) {
            return bad("at least one fraud-polarity concept is required".into());
        }
        for c in &self.concepts {
            if !matches!(c.polarity, Polarity::Fraud | Polarity::Legit) {
                return bad(format!("{}: planted concepts must be fraud or legit", c.id));
            }
            if !(2..=4).contains(&c.n_features) {
                return bad(format!("{}: n_features must be in 2..=4", c.id));
            }
            if !(0.0..=1.0).contains(&c.rate_in_fraud) || !(0.0..=1.0).contains(&c.rate_in_legit) {
                return bad(format!("{}: rates must be in [0, 1]", c.id));
            }
        }
        let f = &self.splits;
        let parts = [f.train, f.validation, f.test, f.production];
        if parts.iter().any(|p| *p <= 0.0) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return bad("split fractions must be positive and sum to at most 1".into());
        }
        if !(self.undersample_keep_rate > 0.0 && self.undersample_keep_rate <= 1.0) {
            return bad("undersample_keep_rate must be in (0, 1]".into());
        }
        Ok(())
    }

    /// Split boundaries at the configured fractions of the time span.
    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        let at = |frac: f64| self.start + Duration::milliseconds((frac * self.span_days * 86_400_000.0) as i64);
        let f = &self.splits;
        SplitSpec {
            train_end: at(f.train),
            val_end: at(f.train + f.validation),
            test_end: at(f.train + f.validation + f.test),
            prod_end: at(f.train + f.validation + f.test + f.production),
            undersample_keep_rate: self.undersample_keep_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub name: String,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCondition {
    pub concept: String,
    pub features: Vec<PlantedFeature>,
    /// The concept holds iff the sum of standardized features is at least this.
    pub threshold: f64,
}

impl PlantedCondition {
    fn holds_standardized(&self, z: &[f64]) -> bool {
        z.iter().sum::<f64>() >= self.threshold
    }

    pub fn holds(&self, event: &RawEvent) -> bool {
        let z: Vec<f64> = self
            .features
            .iter()
            .map(|f| {
                let raw = event
                    .numeric_features
                    .get(&f.name)
                    .copied()
                    .flatten()
                    .unwrap_or(f.offset);
                (raw - f.offset) / f.scale
            })
            .collect();
        self.holds_standardized(&z)
    }
}

/// Ground-truth concept function of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub taxonomy: ConceptTaxonomy,
    pub conditions: Vec<PlantedCondition>,
}

impl SyntheticWorld {
    /// Planted concepts that hold for the event (no fallback).
    pub fn planted(&self, event: &RawEvent) -> ConceptSet {
        let mut set = ConceptSet::empty(self.taxonomy.len());
        for c in &self.conditions {
            if c.holds(event) {
                set.insert(self.taxonomy.position(&c.concept).expect("planted concept in taxonomy"));
            }
        }
        set
    }

    /// Ground-truth concept set; falls back to the label-matched Other concept.
    pub fn truth(&self, event: &RawEvent) -> ConceptSet {
        let mut set = self.planted(event);
        if set.is_empty() {
            set.insert(self.taxonomy.fallback_for(event.fraud_label));
        }
        set
    }

    pub fn annotate_truth(&self, events: &[RawEvent]) -> Vec<AnnotatedEvent> {
        events
            .iter()
            .map(|e| AnnotatedEvent {
                event: e.clone(),
                concepts: self.truth(e),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub events: Vec<RawEvent>,
    pub world: SyntheticWorld,
    pub mapping: RuleConceptMapping,
    /// Ground truth per event, aligned with `events`.
    pub truth: Vec<ConceptSet>,
    pub split: SplitSpec,
}

impl SyntheticData {
    pub fn taxonomy(&self) -> &ConceptTaxonomy {
        &self.world.taxonomy
    }

    pub fn truth_rows(&self) -> Vec<AnnotatedEvent> {
        self.events
            .iter()
            .zip(&self.truth)
            .map(|(e, t)| AnnotatedEvent {
                event: e.clone(),
                concepts: t.clone(),
            })
            .collect()
    }
}

pub fn rule_id(concept: &str, j: usize) -> String {
    format!("{concept}__r{j:03}")
}

fn sample_block(rng: &mut ChaCha8Rng, k: usize, threshold: f64, active: bool) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        if (z.iter().sum::<f64>() >= threshold) == active {
            return z;
        }
    }
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticData, DatasetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut concepts: Vec<Concept> = config
        .concepts
        .iter()
        .map(|c| Concept::new(&c.id, &c.display_name, c.polarity, &format!("planted concept over {} features", c.n_features)))
        .collect();
    concepts.push(Concept::new("other_legit", "Other legit", Polarity::OtherLegit, "Unknown legitimate behaviour"));
    concepts.push(Concept::new("other_fraud", "Other fraud", Polarity::OtherFraud, "Unknown fraud concept"));
    let taxonomy = ConceptTaxonomy::new(concepts).map_err(|e| DatasetError::Config(e.to_string()))?;

    let conditions: Vec<PlantedCondition> = config
        .concepts
        .iter()
        .map(|c| PlantedCondition {
            concept: c.id.clone(),
            features: (0..c.n_features)
                .map(|j| PlantedFeature {
                    name: format!("{}_{j}", c.id),
                    offset: (rng.random::<f64>() * 200.0 - 100.0).round(),
                    scale: 0.5 + rng.random::<f64>() * 20.0,
                })
                .collect(),
            threshold: Z_UPPER_20 * (c.n_features as f64).sqrt(),
        })
        .collect();

    let mut raw_mapping = BTreeMap::new();
    for c in &config.concepts {
        for j in 0..c.rules {
            raw_mapping.insert(rule_id(&c.id, j), vec![c.id.clone()]);
        }
    }
    let mapping = RuleConceptMapping::new(raw_mapping, &taxonomy).map_err(|e| DatasetError::Config(e.to_string()))?;

    let fraud_idx: Vec<usize> = (0..config.concepts.len())
        .filter(|&i| config.concepts[i].polarity == Polarity::Fraud)
        .collect();
    let span_ms = config.span_days * 86_400_000.0;
    let n = config.n_events;
    let mut events = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let offset = span_ms * (i as f64 + rng.random::<f64>()) / n as f64;
        let timestamp = config.start + Duration::milliseconds(offset as i64);
        let fraud = rng.random::<f64>() < config.fraud_prevalence;
        let fraud_pattern = fraud != (rng.random::<f64>() < config.label_noise);

        let mut active: Vec<bool> = config
            .concepts
            .iter()
            .map(|c| {
                let rate = if fraud_pattern { c.rate_in_fraud } else { c.rate_in_legit };
                rng.random::<f64>() < rate
            })
            .collect();
        if fraud_pattern && !fraud_idx.iter().any(|&i| active[i]) {
            active[fraud_idx[rng.random_range(0..fraud_idx.len())]] = true;
        }

        let mut event = RawEvent::new(&format!("ev{i:07}"), timestamp, fraud, Vec::new());
        let mut set = ConceptSet::empty(taxonomy.len());
        for (ci, cond) in conditions.iter().enumerate() {
            // Re-check on the stored raw values so rounding can never make the
            // recorded activation disagree with the truth function.
            loop {
                let z = sample_block(&mut rng, cond.features.len(), cond.threshold, active[ci]);
                for (f, zj) in cond.features.iter().zip(&z) {
                    event.numeric_features.insert(f.name.clone(), Some(f.offset + f.scale * zj));
                }
                if cond.holds(&event) == active[ci] {
                    break;
                }
            }
            if active[ci] {
                set.insert(ci);
                let rules = config.concepts[ci].rules;
                if rules > 0 {
                    let lead = rng.random_range(0..rules);
                    for j in 0..rules {
                        if j == lead || rng.random::<f64>() < EXTRA_RULE_RATE {
                            event.triggered_rules.push(rule_id(&cond.concept, j));
                        }
                    }
                }
            }
        }
        for j in 0..config.noise_features {
            let v: f64 = rng.sample(StandardNormal);
            let missing = rng.random::<f64>() < config.missing_rate;
            event
                .numeric_features
                .insert(format!("noise_{j}"), (!missing).then_some(50.0 + 10.0 * v));
        }
        let channel = CHANNELS[rng.random_range(0..CHANNELS.len())];
        let channel = (rng.random::<f64>() >= config.missing_rate).then_some(channel);
        event = event.with_categorical("channel", channel);
        for j in 0..config.unmapped_rules {
            if rng.random::<f64>() < config.unmapped_rule_rate {
                event.triggered_rules.push(format!("legacy_unmapped_{j}"));
            }
        }
        if set.is_empty() {
            set.insert(taxonomy.fallback_for(fraud));
        }
        events.push(event);
        truth.push(set);
    }

    Ok(SyntheticData {
        events,
        world: SyntheticWorld { taxonomy, conditions },
        mapping,
        truth,
        split: config.split_spec(seed),
    })
}
