//! Independent oracles and generators shared by the integration suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::Rng;

use joel_core::dataset::RawEvent;
use joel_core::taxonomy::ConceptTaxonomy;

/// AUC by counting every positive/negative pair.
pub fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Best TPR over every threshold `score >= t` (each distinct score, plus
/// one above the maximum) whose FPR is within `target`.
pub fn enumerated_recall(scores: &[f64], labels: &[bool], target: f64) -> f64 {
    let p = labels.iter().filter(|l| **l).count() as f64;
    let n = labels.len() as f64 - p;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &candidates {
        let tp = scores.iter().zip(labels).filter(|(s, l)| **l && **s >= t).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        if fp / n <= target {
            best = best.max(tp / p);
        }
    }
    best
}

/// Random rule → concept mapping over the non-fallback concepts.
pub fn random_mapping<R: Rng>(rng: &mut R, tax: &ConceptTaxonomy, rules: usize) -> BTreeMap<String, Vec<String>> {
    let eligible: Vec<&str> = tax
        .concepts()
        .iter()
        .filter(|c| !c.polarity.is_fallback())
        .map(|c| c.id.as_str())
        .collect();
    (0..rules)
        .map(|r| {
            let k = rng.random_range(1..=3);
            let ids: BTreeSet<String> = (0..k).map(|_| eligible.choose(rng).unwrap().to_string()).collect();
            (format!("rule_{r:04}"), ids.into_iter().collect())
        })
        .collect()
}

/// Events triggering random subsets of `rule_0000..rule_{rules}` plus
/// occasional ids outside the mapping; about a fifth trigger nothing.
pub fn random_events<R: Rng>(rng: &mut R, n: usize, rules: usize) -> Vec<RawEvent> {
    let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    (0..n)
        .map(|i| {
            let k = if rng.random_bool(0.2) { 0 } else { rng.random_range(1..=4) };
            let mut triggered: Vec<String> = (0..k).map(|_| format!("rule_{:04}", rng.random_range(0..rules))).collect();
            if rng.random_bool(0.05) {
                triggered.push(format!("unmapped_{}", rng.random_range(0..5)));
            }
            RawEvent::new(&format!("e{i}"), t0 + Duration::minutes(i as i64), rng.random_bool(0.1), triggered)
        })
        .collect()
}

/// Concept ids a row should carry: the union of its mapped rules, or the
/// label's fallback when nothing maps.
pub fn union_oracle(event: &RawEvent, mapping: &BTreeMap<String, Vec<String>>) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for rule in &event.triggered_rules {
        if let Some(ids) = mapping.get(rule) {
            out.extend(ids.iter().cloned());
        }
    }
    if out.is_empty() {
        out.insert(if event.fraud_label { "other_fraud" } else { "other_legit" }.to_string());
    }
    out
}
