use serde::{Deserialize, Serialize};

use crate::dataset::EncodedDataset;
use crate::metrics::{auc, operating_point, roc_curve, subsample_roc, MetricsError};
use crate::model::{JoelNetwork, ModelError};

/// ROC curves in reports keep at most this many points.
pub const ROC_POINT_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub auc: f64,
    pub recall_at_fpr: f64,
    pub precision_at_fpr: f64,
    pub fpr_target: f64,
    pub threshold: f64,
    pub positives: usize,
    pub negatives: usize,
    pub roc: Vec<(f64, f64)>,
}

impl LabelMetrics {
    /// `Ok(None)` when `labels` hold a single class.
    pub fn compute(scores: &[f64], labels: &[bool], fpr_target: f64) -> Result<Option<Self>, MetricsError> {
        let op = match operating_point(scores, labels, fpr_target) {
            Ok(op) => op,
            Err(MetricsError::SingleClass { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let positives = labels.iter().filter(|l| **l).count();
        Ok(Some(Self {
            auc: auc(scores, labels)?,
            recall_at_fpr: op.tpr,
            precision_at_fpr: op.precision,
            fpr_target,
            threshold: op.threshold,
            positives,
            negatives: labels.len() - positives,
            roc: subsample_roc(&roc_curve(scores, labels)?, ROC_POINT_CAP),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub id: String,
    pub fallback: bool,
    /// Absent when the concept has a single class in the dataset.
    pub metrics: Option<LabelMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub decision: Option<LabelMetrics>,
    pub concepts: Vec<ConceptMetrics>,
    /// Mean AUC over non-fallback concepts with both classes present.
    pub mean_auc: Option<f64>,
    /// Fallback concepts, never part of the mean.
    pub excluded: Vec<String>,
    /// Concepts with a single class in this dataset.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn decision_recall(&self) -> Option<f64> {
        self.decision.as_ref().map(|d| d.recall_at_fpr)
    }

    pub fn concept(&self, id: &str) -> Option<&ConceptMetrics> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn concept_auc(&self, id: &str) -> Option<f64> {
        self.concept(id).and_then(|c| c.metrics.as_ref()).map(|m| m.auc)
    }

    /// The AUCs that enter `mean_auc`, by concept id.
    pub fn averaged_aucs(&self) -> Vec<(&str, f64)> {
        self.concepts
            .iter()
            .filter(|c| !c.fallback)
            .filter_map(|c| c.metrics.as_ref().map(|m| (c.id.as_str(), m.auc)))
            .collect()
    }
}

/// Scores `data` with `net` and reports decision and per-concept metrics.
pub fn evaluate(
    net: &JoelNetwork,
    data: &EncodedDataset,
    decision_fpr: f64,
    concept_fpr: f64,
) -> Result<MetricsReport, ModelError> {
    let scores = net.predict_batch(&data.x)?;
    report_from_scores(net, &scores.fraud, &scores.concepts, data, decision_fpr, concept_fpr)
}

pub(crate) fn report_from_scores(
    net: &JoelNetwork,
    fraud: &[f64],
    concept_scores: &ndarray::Array2<f64>,
    data: &EncodedDataset,
    decision_fpr: f64,
    concept_fpr: f64,
) -> Result<MetricsReport, ModelError> {
    let decision = LabelMetrics::compute(fraud, &data.labels, decision_fpr)?;
    let mut concepts = Vec::with_capacity(net.concepts());
    let mut excluded = Vec::new();
    let mut skipped = Vec::new();
    for (k, c) in net.taxonomy.concepts().iter().enumerate() {
        let labels: Vec<bool> = data.concepts.column(k).iter().map(|v| *v > 0.5).collect();
        let col = concept_scores.column(k).to_vec();
        let metrics = LabelMetrics::compute(&col, &labels, concept_fpr)?;
        let fallback = c.polarity.is_fallback();
        if fallback {
            excluded.push(c.id.clone());
        } else if metrics.is_none() {
            skipped.push(c.id.clone());
        }
        concepts.push(ConceptMetrics {
            id: c.id.clone(),
            fallback,
            metrics,
        });
    }
    let mut report = MetricsReport {
        instances: data.len(),
        decision,
        concepts,
        mean_auc: None,
        excluded,
        skipped,
    };
    let aucs = report.averaged_aucs();
    if !aucs.is_empty() {
        report.mean_auc = Some(aucs.iter().map(|(_, a)| a).sum::<f64>() / aucs.len() as f64);
    }
    Ok(report)
}
