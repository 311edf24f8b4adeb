//! Binary ranking metrics: ROC, tie-aware AUC, and operating points at a
//! false-positive-rate ceiling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels must contain both classes ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("scores must be finite")]
    NonFinite,
}

/// Per distinct score, descending: cumulative (fp, tp) when predicting
/// positive for every score ≥ that value.
struct Ranked {
    groups: Vec<(f64, usize, usize)>,
    positives: usize,
    negatives: usize,
}

fn rank(scores: &[f64], labels: &[bool]) -> Result<Ranked, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass {
            positives,
            negatives,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    let (mut fp, mut tp) = (0, 0);
    for i in order {
        if labels[i] {
            tp += 1;
        } else {
            fp += 1;
        }
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 = fp;
                g.2 = tp;
            }
            _ => groups.push((scores[i], fp, tp)),
        }
    }
    Ok(Ranked {
        groups,
        positives,
        negatives,
    })
}

/// ROC points from (0,0) to (1,1), one per distinct score threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let r = rank(scores, labels)?;
    let (n, p) = (r.negatives as f64, r.positives as f64);
    let mut points = Vec::with_capacity(r.groups.len() + 1);
    points.push((0.0, 0.0));
    points.extend(r.groups.iter().map(|&(_, fp, tp)| (fp as f64 / n, tp as f64 / p)));
    Ok(points)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    let r = rank(scores, labels)?;
    // walk groups in ascending score order, tracking negatives strictly below
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut prev = (0usize, 0usize);
    let mut deltas: Vec<(usize, usize)> = r
        .groups
        .iter()
        .map(|&(_, fp, tp)| {
            let d = (fp - prev.0, tp - prev.1);
            prev = (fp, tp);
            d
        })
        .collect();
    deltas.reverse();
    for (neg, pos) in deltas {
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
    }
    Ok(wins / (r.positives as f64 * r.negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// Predict positive when `score >= threshold`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub precision: f64,
    pub false_positives: usize,
    pub true_positives: usize,
}

/// The smallest distinct score whose FPR stays within `target`, treating
/// equal scores as one group. When even the top group overshoots, the
/// threshold sits just above the maximum score and nothing is flagged.
pub fn operating_point(scores: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint, MetricsError> {
    let r = rank(scores, labels)?;
    let (n, p) = (r.negatives as f64, r.positives as f64);
    let mut chosen = None;
    for &(score, fp, tp) in &r.groups {
        if fp as f64 / n <= target {
            chosen = Some((score, fp, tp));
        } else {
            break;
        }
    }
    let (threshold, fp, tp) = chosen.unwrap_or_else(|| (r.groups[0].0.next_up(), 0, 0));
    let flagged = fp + tp;
    Ok(OperatingPoint {
        threshold,
        fpr: fp as f64 / n,
        tpr: tp as f64 / p,
        precision: if flagged == 0 { 0.0 } else { tp as f64 / flagged as f64 },
        false_positives: fp,
        true_positives: tp,
    })
}

pub fn recall_at_fpr(scores: &[f64], labels: &[bool], target: f64) -> Result<f64, MetricsError> {
    operating_point(scores, labels, target).map(|o| o.tpr)
}

pub fn precision_at_fpr(scores: &[f64], labels: &[bool], target: f64) -> Result<f64, MetricsError> {
    operating_point(scores, labels, target).map(|o| o.precision)
}

/// Keeps at most `max` points, evenly spaced by index, always retaining
/// both endpoints.
pub fn subsample_roc(points: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if points.len() <= max || max < 2 {
        return points.to_vec();
    }
    let last = points.len() - 1;
    let mut out: Vec<(f64, f64)> = (0..max)
        .map(|i| points[(i * last + (max - 1) / 2) / (max - 1)])
        .collect();
    out[0] = points[0];
    out[max - 1] = points[last];
    out.dedup();
    out
}
