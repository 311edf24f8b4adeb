use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, MetricsReport, TrainConfig, TrainError, TrainHistory};
use crate::dataset::EncodedDataset;
use crate::model::{ArchSpec, CalibrationReport, JoelNetwork};
use crate::taxonomy::ConceptTaxonomy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub arch: ArchSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Cartesian grid. A `dropout_start` of `d > 0` gives rates falling
/// linearly from `d` on the first hidden layer to 0.1 on the last; 0 means
/// no dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxes {
    pub layouts: Vec<Vec<usize>>,
    #[serde(default = "no_dropout")]
    pub dropout_start: Vec<f64>,
    #[serde(default = "bn_off")]
    pub batch_norm: Vec<bool>,
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub base: TrainConfig,
}

fn no_dropout() -> Vec<f64> {
    vec![0.0]
}

fn bn_off() -> Vec<bool> {
    vec![false]
}

pub fn dropout_schedule(start: f64, layers: usize) -> Vec<f64> {
    const END: f64 = 0.1;
    if start <= 0.0 || layers == 0 {
        return Vec::new();
    }
    if layers == 1 || start <= END {
        return vec![start; layers];
    }
    (0..layers)
        .map(|i| start - (start - END) * i as f64 / (layers - 1) as f64)
        .collect()
}

impl GridAxes {
    pub fn expand(&self) -> Vec<GridEntry> {
        let mut out = Vec::new();
        for hidden in &self.layouts {
            for &d in &self.dropout_start {
                for &bn in &self.batch_norm {
                    for &lr in &self.learning_rates {
                        out.push(GridEntry {
                            arch: ArchSpec::new(hidden.clone())
                                .with_dropout(dropout_schedule(d, hidden.len()))
                                .with_batch_norm(bn),
                            train: TrainConfig {
                                learning_rate: lr,
                                ..self.base.clone()
                            },
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub entries: Vec<GridEntry>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum GridFile {
    Entries { entries: Vec<GridEntry> },
    Axes { axes: GridAxes },
}

impl GridSpec {
    /// Accepts `{"entries": [...]}` or `{"axes": {...}}`.
    pub fn from_json_str(text: &str) -> Result<Self, TrainError> {
        let file: GridFile =
            serde_json::from_str(text).map_err(|e| TrainError::Config(format!("grid file: {e}")))?;
        let entries = match file {
            GridFile::Entries { entries } => entries,
            GridFile::Axes { axes } => axes.expand(),
        };
        if entries.is_empty() {
            return Err(TrainError::EmptyGrid);
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DataSplits<'a> {
    pub train: &'a EncodedDataset,
    pub validation: &'a EncodedDataset,
    pub test: &'a EncodedDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScore {
    pub grid_index: usize,
    pub fraud_recall: f64,
    pub mean_auc: Option<f64>,
}

/// Higher fraud recall first, then higher mean AUC, then lower grid index.
pub fn compare_scores(a: &SelectionScore, b: &SelectionScore) -> Ordering {
    let auc = |s: &SelectionScore| s.mean_auc.unwrap_or(f64::NEG_INFINITY);
    b.fraud_recall
        .total_cmp(&a.fraud_recall)
        .then_with(|| auc(b).total_cmp(&auc(a)))
        .then_with(|| a.grid_index.cmp(&b.grid_index))
}

#[derive(Debug, Clone)]
pub struct RankedEntry {
    pub grid_index: usize,
    pub entry: GridEntry,
    pub history: TrainHistory,
    pub calibration: CalibrationReport,
    pub test_report: MetricsReport,
    pub score: SelectionScore,
    pub net: JoelNetwork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub grid_index: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub ranked: Vec<RankedEntry>,
    pub failures: Vec<GridFailure>,
    pub grid: GridSpec,
}

fn run_entry(
    entry: &GridEntry,
    splits: DataSplits<'_>,
    taxonomy: &ConceptTaxonomy,
    decision_fpr: f64,
    concept_fpr: f64,
) -> Result<(JoelNetwork, TrainHistory, CalibrationReport, MetricsReport), TrainError> {
    let net = JoelNetwork::build(&entry.arch, splits.train.x.ncols(), taxonomy.clone(), entry.train.seed)?;
    let (mut net, history) = train(net, splits.train, splits.validation, &entry.train)?;
    let calibration = net.calibrate_thresholds(splits.validation, decision_fpr, concept_fpr)?;
    let report = evaluate(&net, splits.test, decision_fpr, concept_fpr)?;
    if let Some(r) = report.decision_recall() {
        net.bootstrap_metrics.insert("test_fraud_recall".into(), r);
    }
    if let Some(m) = report.mean_auc {
        net.bootstrap_metrics.insert("test_mean_auc".into(), m);
    }
    Ok((net, history, calibration, report))
}

/// Trains every entry, calibrates thresholds on validation, evaluates on
/// test and ranks. Failed entries are recorded; the search fails only when
/// all do.
pub fn grid_search(
    grid: &GridSpec,
    splits: DataSplits<'_>,
    taxonomy: &ConceptTaxonomy,
    decision_fpr: f64,
    concept_fpr: f64,
) -> Result<GridOutcome, TrainError> {
    grid_search_with(grid, splits, taxonomy, decision_fpr, concept_fpr, |_, _| {})
}

/// [`grid_search`] with a progress callback invoked after each entry.
pub fn grid_search_with<F>(
    grid: &GridSpec,
    splits: DataSplits<'_>,
    taxonomy: &ConceptTaxonomy,
    decision_fpr: f64,
    concept_fpr: f64,
    mut progress: F,
) -> Result<GridOutcome, TrainError>
where
    F: FnMut(usize, Result<&RankedEntry, &GridFailure>),
{
    if grid.entries.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    let mut ranked = Vec::new();
    let mut failures = Vec::new();
    for (i, entry) in grid.entries.iter().enumerate() {
        match run_entry(entry, splits, taxonomy, decision_fpr, concept_fpr) {
            Ok((net, history, calibration, test_report)) => {
                let score = SelectionScore {
                    grid_index: i,
                    fraud_recall: test_report.decision_recall().unwrap_or(0.0),
                    mean_auc: test_report.mean_auc,
                };
                ranked.push(RankedEntry {
                    grid_index: i,
                    entry: entry.clone(),
                    history,
                    calibration,
                    test_report,
                    score,
                    net,
                });
                progress(i, Ok(ranked.last().expect("just pushed")));
            }
            Err(e) => {
                failures.push(GridFailure {
                    grid_index: i,
                    error: e.to_string(),
                });
                progress(i, Err(failures.last().expect("just pushed")));
            }
        }
    }
    if ranked.is_empty() {
        return Err(TrainError::AllFailed);
    }
    ranked.sort_by(|a, b| compare_scores(&a.score, &b.score));
    Ok(GridOutcome {
        ranked,
        failures,
        grid: grid.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub grid_index: usize,
    pub rank: Option<usize>,
    pub hidden: Vec<usize>,
    pub dropout: Vec<f64>,
    pub batch_norm: bool,
    pub learning_rate: f64,
    pub within_reference_grid: bool,
    pub fraud_recall: Option<f64>,
    pub fraud_precision: Option<f64>,
    pub mean_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub criterion: String,
    pub selected_grid_index: usize,
    /// One row per grid entry, in grid order: fraud recall against mean
    /// concept AUC.
    pub rows: Vec<TradeoffRow>,
}

/// The top-ranked entry and the decision-versus-explanation trade-off table.
pub fn select_best(outcome: &GridOutcome) -> Result<(&RankedEntry, SelectionReport), TrainError> {
    let best = outcome.ranked.first().ok_or(TrainError::EmptyRanking)?;
    let rows = outcome
        .grid
        .entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let ranked = outcome.ranked.iter().position(|r| r.grid_index == i);
            let r = ranked.map(|p| &outcome.ranked[p]);
            TradeoffRow {
                grid_index: i,
                rank: ranked.map(|p| p + 1),
                hidden: entry.arch.hidden.clone(),
                dropout: entry.arch.dropout.clone(),
                batch_norm: entry.arch.batch_norm,
                learning_rate: entry.train.learning_rate,
                within_reference_grid: entry.arch.within_reference_grid(),
                fraud_recall: r.map(|r| r.score.fraud_recall),
                fraud_precision: r.and_then(|r| r.test_report.decision.as_ref()).map(|d| d.precision_at_fpr),
                mean_auc: r.and_then(|r| r.score.mean_auc),
                best_epoch: r.map(|r| r.history.best_epoch),
                epochs_run: r.map(|r| r.history.epochs.len()),
                error: outcome
                    .failures
                    .iter()
                    .find(|f| f.grid_index == i)
                    .map(|f| f.error.clone()),
            }
        })
        .collect();
    Ok((
        best,
        SelectionReport {
            criterion: "max fraud recall at the decision FPR target; ties by mean concept AUC, then grid index".into(),
            selected_grid_index: best.grid_index,
            rows,
        },
    ))
}
