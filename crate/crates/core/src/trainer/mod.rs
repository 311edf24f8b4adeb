//! Bootstrap training with prevalence-constrained batches and early
//! stopping, evaluation reports, and grid search with model selection.

mod evaluate;
mod grid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_batches, BatchPlan, DatasetError, EncodedDataset};
use crate::model::{JoelNetwork, JointLoss, ModelError};
use crate::nn::{derive_seed, Mode, OptimizerKind, OptimizerState};

pub use evaluate::{evaluate, ConceptMetrics, LabelMetrics, MetricsReport, ROC_POINT_CAP};
pub use grid::{
    compare_scores, dropout_schedule, grid_search, grid_search_with, select_best, DataSplits, GridAxes, GridEntry, GridFailure,
    GridOutcome, GridSpec, RankedEntry, SelectionReport, SelectionScore, TradeoffRow,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {0} (non-finite loss)")]
    Diverged(usize),
    #[error("every grid configuration failed")]
    AllFailed,
    #[error("grid must be non-empty")]
    EmptyGrid,
    #[error("nothing to select from")]
    EmptyRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    pub min_positives: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_semantic: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            min_delta: 0.0,
            batch_size: 4096,
            min_positives: 1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            seed: 0,
            lambda_semantic: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(TrainError::Config("max_epochs and patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lambda_semantic >= 0.0) || self.min_delta < 0.0 {
            return Err(TrainError::Config(
                "learning_rate must be positive, lambda and min_delta non-negative".into(),
            ));
        }
        self.batch_plan().validate()?;
        Ok(())
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            batch_size: self.batch_size,
            min_positives_per_batch: self.min_positives,
            seed: self.seed,
        }
    }
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Improvement means strictly below `best − min_delta`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss < self.best - self.min_delta;
        if improved {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Batch-averaged training loss.
    pub train_loss: JointLoss,
    pub validation_loss: f64,
    pub improved: bool,
    pub parameter_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
}

/// Trains `net` and returns it restored to its best-validation epoch.
pub fn train(
    net: JoelNetwork,
    train_set: &EncodedDataset,
    validation: &EncodedDataset,
    cfg: &TrainConfig,
) -> Result<(JoelNetwork, TrainHistory), TrainError> {
    train_with_validator(net, train_set, cfg, |n, _| Ok(n.loss_on(validation)?.total))
}

/// Like [`train`] but with the per-epoch validation loss supplied by
/// `validate(net, epoch)`.
pub fn train_with_validator<V>(
    mut net: JoelNetwork,
    train_set: &EncodedDataset,
    cfg: &TrainConfig,
    mut validate: V,
) -> Result<(JoelNetwork, TrainHistory), TrainError>
where
    V: FnMut(&JoelNetwork, usize) -> Result<f64, TrainError>,
{
    cfg.validate()?;
    net.lambda = cfg.lambda_semantic;
    let plan = cfg.batch_plan();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best_layers = net.layers.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let batches = sample_batches(&train_set.labels, &plan, epoch as u64)?;
        let mut sum = (0.0, 0.0, 0.0);
        for (b, rows) in batches.iter().enumerate() {
            let x = train_set.x.select(ndarray::Axis(0), rows);
            let y = train_set.decision_targets(rows);
            let s = train_set.concepts.select(ndarray::Axis(0), rows);
            let seed = derive_seed(cfg.seed, &[epoch as u64, b as u64]);
            let trace = net.forward(&x, Mode::Train { seed })?;
            let loss = net.trace_loss(&trace, &y, &s);
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged(epoch));
            }
            sum = (sum.0 + loss.decision, sum.1 + loss.semantic, sum.2 + loss.total);
            let grads = net.joint_backward(&trace, &y, &s)?;
            net.apply(&grads.grads, &mut opt)?;
        }
        let n = batches.len() as f64;
        let val = validate(&net, epoch)?;
        if !val.is_finite() {
            return Err(TrainError::Diverged(epoch));
        }
        let decision = stopper.observe(epoch, val);
        if decision.improved {
            best_layers = net.layers.clone();
        }
        epochs.push(EpochReport {
            epoch,
            train_loss: JointLoss {
                decision: sum.0 / n,
                semantic: sum.1 / n,
                lambda: net.lambda,
                total: sum.2 / n,
            },
            validation_loss: val,
            improved: decision.improved,
            parameter_hash: net.parameter_hash(),
        });
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    net.layers = best_layers;
    let (best_epoch, best_validation_loss) = stopper.best().expect("at least one finite epoch");
    Ok((
        net,
        TrainHistory {
            epochs,
            best_epoch,
            best_validation_loss,
            stopped_early,
        },
    ))
}
