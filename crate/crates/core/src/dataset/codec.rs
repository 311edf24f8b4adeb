use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AnnotatedEvent, DatasetError, RawEvent};

pub const DEFAULT_TOP_K: usize = 100;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub name: String,
    /// Train median, used for missing values.
    pub impute_value: f64,
    pub mean: f64,
    pub stddev: f64,
    /// Train variance was below the floor; the feature always encodes to 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalVocab {
    pub name: String,
    /// Top-K categories by train frequency (ties broken lexicographically).
    pub vocabulary: Vec<String>,
}

/// Preprocessing fitted on the train split only. Layout of the encoded vector:
/// z-scored numerics, then one missing-indicator per numeric, then for each
/// categorical a one-hot block of `vocabulary ++ [other, missing]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCodec {
    pub numeric: Vec<NumericStats>,
    pub categorical: Vec<CategoricalVocab>,
    #[serde(skip)]
    lookup: Vec<HashMap<String, usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub x: Vec<f64>,
    /// One-hot decision label, `[legit, fraud]`.
    pub y: [f64; 2],
    /// Multi-hot concepts in taxonomy order.
    pub s: Vec<f64>,
}

/// Row-aligned encoded matrices for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub ids: Vec<String>,
    pub x: Array2<f64>,
    pub labels: Vec<bool>,
    pub concepts: Array2<f64>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    /// One-hot decision targets `[legit, fraud]` for the given rows.
    pub fn decision_targets(&self, rows: &[usize]) -> Array2<f64> {
        let mut y = Array2::zeros((rows.len(), 2));
        for (i, &r) in rows.iter().enumerate() {
            y[[i, usize::from(self.labels[r])]] = 1.0;
        }
        y
    }

    pub fn all_decision_targets(&self) -> Array2<f64> {
        let rows: Vec<usize> = (0..self.len()).collect();
        self.decision_targets(&rows)
    }

    pub fn select(&self, rows: &[usize]) -> EncodedDataset {
        EncodedDataset {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            x: self.x.select(ndarray::Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            concepts: self.concepts.select(ndarray::Axis(0), rows),
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fits imputation, normalization and vocabularies on `train`.
pub fn fit_codec<'a, I>(train: I, top_k: usize) -> FeatureCodec
where
    I: IntoIterator<Item = &'a RawEvent>,
{
    let train: Vec<&RawEvent> = train.into_iter().collect();
    let numeric_names: BTreeSet<&String> =
        train.iter().flat_map(|e| e.numeric_features.keys()).collect();
    let categorical_names: BTreeSet<&String> = train
        .iter()
        .flat_map(|e| e.categorical_features.keys())
        .collect();

    let numeric = numeric_names
        .into_iter()
        .map(|name| {
            let column: Vec<Option<f64>> = train
                .iter()
                .map(|e| e.numeric_features.get(name).copied().flatten())
                .collect();
            let mut present: Vec<f64> = column.iter().flatten().copied().collect();
            let impute_value = median(&mut present);
            let n = column.len().max(1) as f64;
            let imputed = column.iter().map(|v| v.unwrap_or(impute_value));
            let mean = imputed.clone().sum::<f64>() / n;
            let var = imputed.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            let degenerate = sd < STD_FLOOR;
            NumericStats {
                name: name.clone(),
                impute_value,
                mean,
                stddev: if degenerate { 1.0 } else { sd },
                degenerate,
            }
        })
        .collect();

    let categorical = categorical_names
        .into_iter()
        .map(|name| {
            let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
            for e in &train {
                if let Some(Some(v)) = e.categorical_features.get(name) {
                    *freq.entry(v.as_str()).or_default() += 1;
                }
            }
            let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            CategoricalVocab {
                name: name.clone(),
                vocabulary: ranked
                    .into_iter()
                    .take(top_k)
                    .map(|(v, _)| v.to_string())
                    .collect(),
            }
        })
        .collect();

    FeatureCodec::from_parts(numeric, categorical)
}

impl FeatureCodec {
    pub fn from_parts(numeric: Vec<NumericStats>, categorical: Vec<CategoricalVocab>) -> Self {
        let mut codec = Self {
            numeric,
            categorical,
            lookup: Vec::new(),
        };
        codec.rebuild_lookup();
        codec
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .categorical
            .iter()
            .map(|c| {
                c.vocabulary
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v.clone(), i))
                    .collect()
            })
            .collect();
    }

    pub fn dim(&self) -> usize {
        2 * self.numeric.len()
            + self
                .categorical
                .iter()
                .map(|c| c.vocabulary.len() + 2)
                .sum::<usize>()
    }

    /// Encodes the feature vector of one event. Features absent from the event
    /// are treated as missing; features unknown to the codec are ignored.
    pub fn encode_features(&self, event: &RawEvent) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.encode_into(event, &mut x);
        x
    }

    fn encode_into(&self, event: &RawEvent, x: &mut [f64]) {
        let n = self.numeric.len();
        for (i, stats) in self.numeric.iter().enumerate() {
            let value = event.numeric_features.get(&stats.name).copied().flatten();
            let v = value.unwrap_or(stats.impute_value);
            x[i] = if stats.degenerate {
                0.0
            } else {
                (v - stats.mean) / stats.stddev
            };
            x[n + i] = if value.is_none() { 1.0 } else { 0.0 };
        }
        let mut offset = 2 * n;
        for (vocab, lookup) in self.categorical.iter().zip(&self.lookup) {
            let width = vocab.vocabulary.len() + 2;
            let slot = match event.categorical_features.get(&vocab.name) {
                Some(Some(v)) => lookup.get(v).copied().unwrap_or(width - 2),
                _ => width - 1,
            };
            x[offset + slot] = 1.0;
            offset += width;
        }
    }

    pub fn encode(&self, event: &AnnotatedEvent) -> EncodedInstance {
        let mut y = [0.0; 2];
        y[usize::from(event.event.fraud_label)] = 1.0;
        EncodedInstance {
            x: self.encode_features(&event.event),
            y,
            s: event.concepts.to_multi_hot(),
        }
    }

    pub fn encode_dataset(&self, rows: &[AnnotatedEvent]) -> EncodedDataset {
        let width = rows.first().map(|r| r.concepts.len()).unwrap_or(0);
        let mut x = Array2::zeros((rows.len(), self.dim()));
        let mut concepts = Array2::zeros((rows.len(), width));
        for (i, r) in rows.iter().enumerate() {
            self.encode_into(&r.event, x.row_mut(i).as_slice_mut().expect("row-major"));
            for p in r.concepts.positions() {
                concepts[[i, p]] = 1.0;
            }
        }
        EncodedDataset {
            ids: rows.iter().map(|r| r.event.event_id.clone()).collect(),
            x,
            labels: rows.iter().map(|r| r.event.fraud_label).collect(),
            concepts,
        }
    }

    pub fn encode_events(&self, events: &[&RawEvent]) -> Array2<f64> {
        let mut x = Array2::zeros((events.len(), self.dim()));
        for (i, e) in events.iter().enumerate() {
            self.encode_into(e, x.row_mut(i).as_slice_mut().expect("row-major"));
        }
        x
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("codec serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DatasetError> {
        let mut codec: FeatureCodec =
            serde_json::from_str(text).map_err(|e| DatasetError::Codec(e.to_string()))?;
        codec.rebuild_lookup();
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}
