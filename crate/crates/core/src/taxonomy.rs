//! Semantic concept taxonomy, rule→concept mapping and the distant-supervision
//! annotator that turns a single-label event stream into a multi-label one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{AnnotatedEvent, RawEvent};

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("taxonomy must be non-empty")]
    Empty,
    #[error("line {line}: invalid concept id {id:?} (must be non-empty without whitespace)")]
    InvalidId { line: usize, id: String },
    #[error("line {line}: duplicate concept id {id:?} (first defined at line {first_line})")]
    DuplicateId {
        line: usize,
        first_line: usize,
        id: String,
    },
    #[error("taxonomy needs exactly one {polarity} concept, found {found}{}", fmt_lines(.lines))]
    FallbackCount {
        polarity: Polarity,
        found: usize,
        lines: Vec<usize>,
    },
    #[error("rule {rule:?}: unknown concept id {concept:?}")]
    UnknownConcept { rule: String, concept: String },
    #[error("rule {rule:?}: empty concept set")]
    EmptyRule { rule: String },
    #[error("rule {rule:?}: maps to fallback concept {concept:?}, which only the annotator may assign")]
    FallbackMapped { rule: String, concept: String },
}

fn fmt_lines(lines: &[usize]) -> String {
    if lines.is_empty() {
        String::new()
    } else {
        let l: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        format!(" (lines {})", l.join(", "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Fraud,
    Legit,
    OtherFraud,
    OtherLegit,
}

impl Polarity {
    pub fn is_fallback(self) -> bool {
        matches!(self, Polarity::OtherFraud | Polarity::OtherLegit)
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Polarity::Fraud => "fraud",
            Polarity::Legit => "legit",
            Polarity::OtherFraud => "other_fraud",
            Polarity::OtherLegit => "other_legit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub display_name: String,
    pub polarity: Polarity,
    #[serde(default)]
    pub description: String,
}

impl Concept {
    pub fn new(id: &str, display_name: &str, polarity: Polarity, description: &str) -> Self {
        Self {
            id: id.to_string(),
            display_name: display_name.to_string(),
            polarity,
            description: description.to_string(),
        }
    }
}

/// Ordered concept vocabulary. The order defines the concept-vector layout
/// used by annotations, the semantic layer and every report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptTaxonomy {
    concepts: Vec<Concept>,
    index: HashMap<String, usize>,
    other_fraud: usize,
    other_legit: usize,
}

impl ConceptTaxonomy {
    /// Validates and builds a taxonomy. Positions in `concepts` become the
    /// concept indices.
    pub fn new(concepts: Vec<Concept>) -> Result<Self, TaxonomyError> {
        let lines: Vec<usize> = (1..=concepts.len()).collect();
        Self::with_lines(concepts, &lines)
    }

    fn with_lines(concepts: Vec<Concept>, lines: &[usize]) -> Result<Self, TaxonomyError> {
        if concepts.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut index = HashMap::with_capacity(concepts.len());
        for (pos, c) in concepts.iter().enumerate() {
            if c.id.is_empty() || c.id.chars().any(char::is_whitespace) {
                return Err(TaxonomyError::InvalidId {
                    line: lines[pos],
                    id: c.id.clone(),
                });
            }
            if let Some(&first) = index.get(&c.id) {
                return Err(TaxonomyError::DuplicateId {
                    line: lines[pos],
                    first_line: lines[first],
                    id: c.id.clone(),
                });
            }
            index.insert(c.id.clone(), pos);
        }
        let find = |polarity: Polarity| -> Result<usize, TaxonomyError> {
            let hits: Vec<usize> = concepts
                .iter()
                .enumerate()
                .filter(|(_, c)| c.polarity == polarity)
                .map(|(i, _)| i)
                .collect();
            if hits.len() == 1 {
                Ok(hits[0])
            } else {
                Err(TaxonomyError::FallbackCount {
                    polarity,
                    found: hits.len(),
                    lines: hits.iter().map(|&i| lines[i]).collect(),
                })
            }
        };
        let other_fraud = find(Polarity::OtherFraud)?;
        let other_legit = find(Polarity::OtherLegit)?;
        Ok(Self {
            concepts,
            index,
            other_fraud,
            other_legit,
        })
    }

    /// Parses the JSON array format. Validation errors carry the line on
    /// which the offending object starts.
    pub fn from_json_str(text: &str) -> Result<Self, TaxonomyError> {
        let raw: Vec<&RawValue> = serde_json::from_str(text).map_err(parse_err)?;
        let mut concepts = Vec::with_capacity(raw.len());
        let mut lines = Vec::with_capacity(raw.len());
        for item in raw {
            let offset = item.get().as_ptr() as usize - text.as_ptr() as usize;
            let line = text[..offset].matches('\n').count() + 1;
            let concept: Concept = serde_json::from_str(item.get()).map_err(|e| {
                TaxonomyError::Parse {
                    line: line + e.line() - 1,
                    column: e.column(),
                    message: e.to_string(),
                }
            })?;
            concepts.push(concept);
            lines.push(line);
        }
        Self::with_lines(concepts, &lines)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, pos: usize) -> Option<&Concept> {
        self.concepts.get(pos)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.id.as_str())
    }

    pub fn other_fraud(&self) -> usize {
        self.other_fraud
    }

    pub fn other_legit(&self) -> usize {
        self.other_legit
    }

    pub fn is_fallback(&self, pos: usize) -> bool {
        pos == self.other_fraud || pos == self.other_legit
    }

    /// Fallback concept assigned to rows whose rules map to nothing.
    pub fn fallback_for(&self, fraud_label: bool) -> usize {
        if fraud_label {
            self.other_fraud
        } else {
            self.other_legit
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization of the concept list.
    /// Whitespace and key order in the source file do not affect it.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_vec(&self.concepts).expect("concepts serialize");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.concepts).expect("concepts serialize")
    }
}

impl Serialize for ConceptTaxonomy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.concepts.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptTaxonomy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let concepts = Vec::<Concept>::deserialize(d)?;
        ConceptTaxonomy::new(concepts).map_err(serde::de::Error::custom)
    }
}

fn parse_err(e: serde_json::Error) -> TaxonomyError {
    TaxonomyError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn read_file(path: &Path) -> Result<String, TaxonomyError> {
    std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<ConceptTaxonomy, TaxonomyError> {
    ConceptTaxonomy::from_json_str(&read_file(path.as_ref())?)
}

/// Fixed-length concept membership vector laid out in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConceptSet(Vec<bool>);

impl ConceptSet {
    pub fn empty(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_positions(len: usize, positions: impl IntoIterator<Item = usize>) -> Self {
        let mut set = Self::empty(len);
        for p in positions {
            set.insert(p);
        }
        set
    }

    /// Resolves ids against `tax`; returns the first unknown id on failure.
    pub fn from_ids<'a>(
        tax: &ConceptTaxonomy,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, String> {
        let mut set = Self::empty(tax.len());
        for id in ids {
            let pos = tax.position(id).ok_or_else(|| id.to_string())?;
            set.insert(pos);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn insert(&mut self, pos: usize) {
        self.0[pos] = true;
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.0.get(pos).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|b| *b)
    }

    pub fn union_with(&mut self, other: &ConceptSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= *b;
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn ids<'a>(&'a self, tax: &'a ConceptTaxonomy) -> Vec<&'a str> {
        self.positions()
            .filter_map(|p| tax.get(p).map(|c| c.id.as_str()))
            .collect()
    }

    pub fn to_multi_hot(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Rule id → concept positions, validated against a taxonomy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleConceptMapping {
    entries: BTreeMap<String, Vec<usize>>,
    width: usize,
}

impl RuleConceptMapping {
    pub fn new(
        raw: BTreeMap<String, Vec<String>>,
        tax: &ConceptTaxonomy,
    ) -> Result<Self, TaxonomyError> {
        let mut entries = BTreeMap::new();
        for (rule, ids) in raw {
            if ids.is_empty() {
                return Err(TaxonomyError::EmptyRule { rule });
            }
            let mut positions = BTreeSet::new();
            for id in ids {
                let Some(pos) = tax.position(&id) else {
                    return Err(TaxonomyError::UnknownConcept { rule, concept: id });
                };
                if tax.is_fallback(pos) {
                    return Err(TaxonomyError::FallbackMapped { rule, concept: id });
                }
                positions.insert(pos);
            }
            entries.insert(rule, positions.into_iter().collect());
        }
        Ok(Self {
            entries,
            width: tax.len(),
        })
    }

    pub fn from_json_str(text: &str, tax: &ConceptTaxonomy) -> Result<Self, TaxonomyError> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text).map_err(parse_err)?;
        Self::new(raw, tax)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn concepts_for(&self, rule: &str) -> Option<&[usize]> {
        self.entries.get(rule).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(r, c)| (r.as_str(), c.as_slice()))
    }

    pub fn to_json_map(&self, tax: &ConceptTaxonomy) -> BTreeMap<String, Vec<String>> {
        self.entries
            .iter()
            .map(|(rule, pos)| {
                let ids = pos.iter().map(|&p| tax.concepts()[p].id.clone()).collect();
                (rule.clone(), ids)
            })
            .collect()
    }
}

pub fn load_mapping(
    path: impl AsRef<Path>,
    tax: &ConceptTaxonomy,
) -> Result<RuleConceptMapping, TaxonomyError> {
    RuleConceptMapping::from_json_str(&read_file(path.as_ref())?, tax)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappedConcepts {
    pub concepts: ConceptSet,
    pub unknown_rules: usize,
}

/// Union of the concepts of every triggered rule. Unknown rules are tallied.
pub fn map_rules<S: AsRef<str>>(triggered: &[S], mapping: &RuleConceptMapping) -> MappedConcepts {
    let mut concepts = ConceptSet::empty(mapping.width);
    let mut unknown_rules = 0;
    for rule in triggered {
        match mapping.concepts_for(rule.as_ref()) {
            Some(positions) => positions.iter().for_each(|&p| concepts.insert(p)),
            None => unknown_rules += 1,
        }
    }
    MappedConcepts {
        concepts,
        unknown_rules,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationStats {
    pub rows: usize,
    pub fallback_rows: usize,
    pub unknown_rules: usize,
    /// Unknown rule id → number of occurrences.
    pub unknown_by_rule: BTreeMap<String, usize>,
}

/// Distant supervision annotator: one output row per input row, carrying the
/// union of mapped concepts or the label-matched fallback when nothing maps.
pub struct Annotator<'a> {
    mapping: &'a RuleConceptMapping,
    tax: &'a ConceptTaxonomy,
    stats: AnnotationStats,
}

impl<'a> Annotator<'a> {
    pub fn new(mapping: &'a RuleConceptMapping, tax: &'a ConceptTaxonomy) -> Self {
        Self {
            mapping,
            tax,
            stats: AnnotationStats::default(),
        }
    }

    pub fn annotate(&mut self, event: RawEvent) -> AnnotatedEvent {
        let mapped = map_rules(&event.triggered_rules, self.mapping);
        if mapped.unknown_rules > 0 {
            for rule in &event.triggered_rules {
                if self.mapping.concepts_for(rule).is_none() {
                    *self.stats.unknown_by_rule.entry(rule.clone()).or_default() += 1;
                }
            }
        }
        let mut concepts = mapped.concepts;
        if concepts.is_empty() {
            concepts.insert(self.tax.fallback_for(event.fraud_label));
            self.stats.fallback_rows += 1;
        }
        self.stats.rows += 1;
        self.stats.unknown_rules += mapped.unknown_rules;
        AnnotatedEvent { event, concepts }
    }

    pub fn stats(&self) -> &AnnotationStats {
        &self.stats
    }

    pub fn into_stats(self) -> AnnotationStats {
        self.stats
    }
}

/// Annotates a stream of events, preserving order.
pub fn annotate_dataset<I>(
    raw: I,
    mapping: &RuleConceptMapping,
    tax: &ConceptTaxonomy,
) -> (Vec<AnnotatedEvent>, AnnotationStats)
where
    I: IntoIterator<Item = RawEvent>,
{
    let mut annotator = Annotator::new(mapping, tax);
    let rows = raw.into_iter().map(|e| annotator.annotate(e)).collect();
    (rows, annotator.into_stats())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CoverageReport {
    /// Concept id → number of rules whose concept set contains it, in taxonomy order.
    pub per_concept_rule_count: Vec<(String, usize)>,
}

impl CoverageReport {
    pub fn count(&self, id: &str) -> Option<usize> {
        self.per_concept_rule_count
            .iter()
            .find(|(c, _)| c == id)
            .map(|(_, n)| *n)
    }

    pub fn total(&self) -> usize {
        self.per_concept_rule_count.iter().map(|(_, n)| n).sum()
    }

    /// Non-fallback concepts that no rule maps to; distant supervision
    /// cannot teach them.
    pub fn cold_start<'a>(&'a self, tax: &ConceptTaxonomy) -> Vec<&'a str> {
        self.per_concept_rule_count
            .iter()
            .filter(|(c, n)| *n == 0 && !tax.position(c).and_then(|p| tax.get(p)).is_some_and(|c| c.polarity.is_fallback()))
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

pub fn mapping_coverage(mapping: &RuleConceptMapping, tax: &ConceptTaxonomy) -> CoverageReport {
    let mut counts = vec![0usize; tax.len()];
    for (_, positions) in mapping.iter() {
        for &p in positions {
            counts[p] += 1;
        }
    }
    CoverageReport {
        per_concept_rule_count: tax
            .concepts()
            .iter()
            .zip(counts)
            .map(|(c, n)| (c.id.clone(), n))
            .collect(),
    }
}

/// The 14-concept e-commerce fraud taxonomy.
pub fn fraud_taxonomy() -> ConceptTaxonomy {
    use Polarity::*;
    let concepts = vec![
        Concept::new("all_details_match", "All details match", Legit, "Matching information for all or most of the transaction details"),
        Concept::new("nothing_suspicious", "Nothing suspicious", Legit, "Transaction has no risky signals"),
        Concept::new("good_customer_history", "Good customer history", Legit, "Legitimate purchase history"),
        Concept::new("other_legit", "Other legit", OtherLegit, "Unknown legitimate behaviour"),
        Concept::new("suspicious_device", "Suspicious Device", Fraud, "Suspicious device information (e.g. mismatch timezone, risky browser)"),
        Concept::new("suspicious_items", "Suspicious Items", Fraud, "Suspicious items (e.g. anomalous amount, number of items)"),
        Concept::new("suspicious_payment", "Suspicious Payment", Fraud, "Payment details are doubtful (e.g. risky payment method)"),
        Concept::new("suspicious_email", "Suspicious Email", Fraud, "Email information is mistrustful (e.g. risky domain, malformed email)"),
        Concept::new("suspicious_billing_shipping", "Suspicious billing shipping", Fraud, "Shipping and/or billing information is dubious (e.g. address mismatch)"),
        Concept::new("suspicious_ip", "Suspicious IP", Fraud, "IP information is suspicious (e.g. malformed IP, proxy use)"),
        Concept::new("suspicious_customer", "Suspicious Customer", Fraud, "Customer information is suspicious (e.g. guest account, account age)"),
        Concept::new("suspicious_delivery", "Suspicious Delivery", Fraud, "Suspicious type of shipment (e.g. digital delivery)"),
        Concept::new("high_speed_ordering", "High speed ordering", Fraud, "Several transactions in a short period of time"),
        Concept::new("other_fraud", "Other fraud", OtherFraud, "Unknown fraud concept"),
    ];
    ConceptTaxonomy::new(concepts).expect("built-in taxonomy is valid")
}
