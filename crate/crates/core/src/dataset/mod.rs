//! Event ingestion, temporal splitting, undersampling, feature encoding,
//! prevalence-constrained batching and synthetic data generation.

mod batch;
mod codec;
mod events;
pub mod synth;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{sample_batches, BatchPlan};
pub use codec::{
    fit_codec, CategoricalVocab, EncodedDataset, EncodedInstance, FeatureCodec, NumericStats,
    DEFAULT_TOP_K,
};
pub use events::{
    read_annotated, read_annotated_from, read_events, read_events_from, write_annotated,
    write_annotated_to, write_events, write_events_to, AnnotatedEvent, EventFile, RawEvent,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("line {line}: unknown concept {id:?}")]
    UnknownConcept { line: usize, id: String },
    #[error("cannot satisfy prevalence constraint: no positive instances")]
    NoPositives,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("codec error: {0}")]
    Codec(String),
}

/// Half-open time windows `[.., train_end)`, `[train_end, val_end)`, ...
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: DateTime<Utc>,
    pub val_end: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
    pub prod_end: DateTime<Utc>,
    #[serde(default = "one")]
    pub undersample_keep_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.train_end < self.val_end
            && self.val_end < self.test_end
            && self.test_end < self.prod_end)
        {
            return Err(DatasetError::Config(
                "split boundaries must be strictly increasing".into(),
            ));
        }
        if !(self.undersample_keep_rate > 0.0 && self.undersample_keep_rate <= 1.0) {
            return Err(DatasetError::Config(format!(
                "undersample_keep_rate must be in (0, 1], got {}",
                self.undersample_keep_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Production,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub production: Vec<T>,
    /// Events at or after `prod_end`.
    pub dropped: usize,
}

/// Anything carrying an event timestamp and fraud label.
pub trait Timestamped {
    fn timestamp(&self) -> DateTime<Utc>;
    fn fraud_label(&self) -> bool;
}

impl Timestamped for RawEvent {
    fn timestamp(&self) -> DateTime<Utc> {
        self.timestamp
    }
    fn fraud_label(&self) -> bool {
        self.fraud_label
    }
}

impl Timestamped for AnnotatedEvent {
    fn timestamp(&self) -> DateTime<Utc> {
        self.event.timestamp
    }
    fn fraud_label(&self) -> bool {
        self.event.fraud_label
    }
}

impl SplitSpec {
    pub fn assign(&self, t: DateTime<Utc>) -> Option<Split> {
        if t < self.train_end {
            Some(Split::Train)
        } else if t < self.val_end {
            Some(Split::Validation)
        } else if t < self.test_end {
            Some(Split::Test)
        } else if t < self.prod_end {
            Some(Split::Production)
        } else {
            None
        }
    }
}

pub fn temporal_split<T: Timestamped>(events: Vec<T>, spec: &SplitSpec) -> Splits<T> {
    let mut out = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        production: Vec::new(),
        dropped: 0,
    };
    for e in events {
        match spec.assign(e.timestamp()) {
            Some(Split::Train) => out.train.push(e),
            Some(Split::Validation) => out.validation.push(e),
            Some(Split::Test) => out.test.push(e),
            Some(Split::Production) => out.production.push(e),
            None => out.dropped += 1,
        }
    }
    out
}

/// Keeps every positive and each negative independently with probability
/// `keep_rate`.
pub fn undersample_negatives<T: Timestamped>(train: Vec<T>, keep_rate: f64, seed: u64) -> Vec<T> {
    if keep_rate >= 1.0 {
        return train;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    train
        .into_iter()
        .filter(|e| e.fraud_label() || rng.random::<f64>() < keep_rate)
        .collect()
}

/// Encoded four-way split with the codec fitted on the (undersampled)
/// training window.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub codec: FeatureCodec,
    pub train: EncodedDataset,
    pub validation: EncodedDataset,
    pub test: EncodedDataset,
    pub production: EncodedDataset,
    pub dropped: usize,
}

/// Splits by time, undersamples training negatives, fits the codec on the
/// training rows only and encodes every split.
pub fn prepare(rows: Vec<AnnotatedEvent>, spec: &SplitSpec, top_k: usize) -> Result<PreparedData, DatasetError> {
    spec.validate()?;
    let splits = temporal_split(rows, spec);
    let train = undersample_negatives(splits.train, spec.undersample_keep_rate, spec.seed);
    let codec = fit_codec(train.iter().map(|a| &a.event), top_k);
    Ok(PreparedData {
        train: codec.encode_dataset(&train),
        validation: codec.encode_dataset(&splits.validation),
        test: codec.encode_dataset(&splits.test),
        production: codec.encode_dataset(&splits.production),
        codec,
        dropped: splits.dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap()
    }

    fn spec() -> SplitSpec {
        SplitSpec {
            train_end: t0() + Duration::days(10),
            val_end: t0() + Duration::days(20),
            test_end: t0() + Duration::days(30),
            prod_end: t0() + Duration::days(40),
            undersample_keep_rate: 1.0,
            seed: 0,
        }
    }

    fn ev(id: usize, day: i64, label: bool) -> RawEvent {
        RawEvent::new(&format!("e{id}"), t0() + Duration::days(day), label, vec![])
    }

    #[test]
    fn one_event_per_window() {
        let events = vec![ev(0, 1, false), ev(1, 11, false), ev(2, 21, true), ev(3, 31, false)];
        let s = temporal_split(events, &spec());
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len(), s.production.len(), s.dropped),
            (1, 1, 1, 1, 0)
        );
    }

    #[test]
    fn boundary_goes_to_later_window() {
        let s = temporal_split(vec![ev(0, 10, false), ev(1, 40, false)], &spec());
        assert_eq!(s.validation.len(), 1);
        assert_eq!(s.dropped, 1);
    }

    #[test]
    fn all_late_events_dropped() {
        let events: Vec<_> = (0..5).map(|i| ev(i, 50 + i as i64, false)).collect();
        let s = temporal_split(events, &spec());
        assert!(s.train.is_empty() && s.validation.is_empty());
        assert!(s.test.is_empty() && s.production.is_empty());
        assert_eq!(s.dropped, 5);
    }

    #[test]
    fn split_sizes_match_bucketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let events: Vec<_> = (0..10_000)
            .map(|i| {
                let secs = rng.random_range(0..50 * 86_400);
                RawEvent::new(&format!("e{i}"), t0() + Duration::seconds(secs), false, vec![])
            })
            .collect();
        let sp = spec();
        let mut expect = [0usize; 5];
        for e in &events {
            let bucket = [sp.train_end, sp.val_end, sp.test_end, sp.prod_end]
                .iter()
                .position(|b| e.timestamp < *b)
                .unwrap_or(4);
            expect[bucket] += 1;
        }
        let s = temporal_split(events, &sp);
        assert_eq!(
            [s.train.len(), s.validation.len(), s.test.len(), s.production.len(), s.dropped],
            expect
        );
    }

    #[test]
    fn undersampling_identity_and_determinism() {
        let events: Vec<_> = (0..100).map(|i| ev(i, 1, i % 10 == 0)).collect();
        assert_eq!(undersample_negatives(events.clone(), 1.0, 3), events);
        let a = undersample_negatives(events.clone(), 0.5, 3);
        let b = undersample_negatives(events.clone(), 0.5, 3);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|e| e.fraud_label).count(), 10);
    }

    #[test]
    fn undersampling_keeps_binomial_fraction() {
        let negatives: Vec<_> = (0..10_000).map(|i| ev(i, 1, false)).collect();
        let kept = undersample_negatives(negatives, 0.76, 11).len() as f64;
        let (n, p) = (10_000.0f64, 0.76);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((kept - n * p).abs() <= 3.0 * sigma, "kept {kept}");
    }

    #[test]
    fn invalid_split_spec() {
        let mut s = spec();
        s.val_end = s.train_end;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.undersample_keep_rate = 0.0;
        assert!(s.validate().is_err());
        assert!(spec().validate().is_ok());
    }
}
