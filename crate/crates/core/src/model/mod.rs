//! The hierarchical self-explainable network: a trunk feeding a sigmoid
//! semantic layer (one unit per concept), which in turn is the only input
//! of a softmax decision layer.

mod checkpoint;
mod gradcheck;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EncodedDataset;
use crate::metrics::{operating_point, MetricsError, OperatingPoint};
use crate::nn::{
    self, backward_layer, backward_through, binary_cross_entropy, binary_cross_entropy_grad,
    cross_entropy, softmax_cross_entropy_grad, Activation, DenseLayer, ForwardTrace, GradSeed,
    Gradients, LayerSpec, Mode, NnError, OptimizerState, PROB_CLIP,
};
use crate::taxonomy::{ConceptSet, ConceptTaxonomy, TaxonomyError};

pub use checkpoint::{load_checkpoint, load_checkpoint_with_taxonomy, save_checkpoint, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use gradcheck::{gradient_check, GradCheckReport, GRADCHECK_STEP};

/// Decision classes, `[legit, fraud]`.
pub const DECISION_CLASSES: usize = 2;
pub const FRAUD_CLASS: usize = 1;
pub const DEFAULT_DECISION_FPR: f64 = 0.03;
pub const DEFAULT_CONCEPT_FPR: f64 = 0.20;
pub const UNCALIBRATED_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("taxonomy must be non-empty")]
    EmptyTaxonomy,
    #[error("hierarchy violated: {0}")]
    Hierarchy(String),
    #[error("input has {got} features, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("reference set is empty")]
    EmptyReference,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("taxonomy hash mismatch: checkpoint {checkpoint}, supplied {supplied}")]
    TaxonomyMismatch { checkpoint: String, supplied: String },
}

/// Trunk layout. Dropout rates are per hidden layer; an empty list means no
/// dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    #[serde(default)]
    pub batch_norm: bool,
}

impl ArchSpec {
    pub fn new(hidden: Vec<usize>) -> Self {
        Self {
            hidden,
            dropout: Vec::new(),
            batch_norm: false,
        }
    }

    pub fn with_dropout(mut self, dropout: Vec<f64>) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    /// Whether the trunk lies inside the reference search ranges: 3 to 8
    /// hidden layers of 16 to 128 units and dropout at most 0.6.
    pub fn within_reference_grid(&self) -> bool {
        (3..=8).contains(&self.hidden.len())
            && self.hidden.iter().all(|w| (16..=128).contains(w))
            && self.dropout.iter().all(|d| (0.0..=0.6).contains(d))
    }

    fn layer_specs(&self, concepts: usize) -> Result<Vec<LayerSpec>, ModelError> {
        if !self.dropout.is_empty() && self.dropout.len() != self.hidden.len() {
            return Err(ModelError::Hierarchy(format!(
                "{} dropout rates for {} hidden layers",
                self.dropout.len(),
                self.hidden.len()
            )));
        }
        let mut specs: Vec<LayerSpec> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                LayerSpec::new(w, Activation::Relu)
                    .dropout(self.dropout.get(i).copied().unwrap_or(0.0))
                    .batch_norm(self.batch_norm)
            })
            .collect();
        specs.push(LayerSpec::new(concepts, Activation::Sigmoid));
        specs.push(LayerSpec::new(DECISION_CLASSES, Activation::Softmax));
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub fraud_score: f64,
    pub concept_scores: Vec<f64>,
    pub concepts_fired: Vec<String>,
    pub flagged: bool,
    pub model_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub decision: f64,
    pub semantic: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn joint_loss(decision_probs: &Array2<f64>, concept_probs: &Array2<f64>, y: &Array2<f64>, s: &Array2<f64>, lambda: f64) -> JointLoss {
    let decision = cross_entropy(decision_probs, y);
    let semantic = binary_cross_entropy(concept_probs, s);
    JointLoss {
        decision,
        semantic,
        lambda,
        total: decision + lambda * semantic,
    }
}

/// Gradients of the joint loss plus the two branch contributions at the
/// semantic outputs δ_S.
#[derive(Debug, Clone)]
pub struct JointGradients {
    pub grads: Gradients,
    /// ∂(w_D·L_D)/∂δ_S, backpropagated through the decision layer.
    pub decision_branch: Array2<f64>,
    /// ∂L_S/∂δ_S, unweighted.
    pub semantic_branch: Array2<f64>,
    /// `decision_branch + λ·semantic_branch`.
    pub at_semantic: Array2<f64>,
}

/// Scores for a batch, computed in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub fraud: Vec<f64>,
    /// Clipped into `[PROB_CLIP, 1 − PROB_CLIP]`.
    pub concepts: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub decision: OperatingPoint,
    /// `None` marks a concept with a single class in the reference set; it
    /// keeps the default threshold.
    pub concepts: Vec<(String, Option<OperatingPoint>)>,
    pub flagged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoelNetwork {
    pub arch: ArchSpec,
    pub input_dim: usize,
    /// Trunk layers, then the semantic layer, then the decision layer.
    pub layers: Vec<DenseLayer>,
    pub taxonomy: ConceptTaxonomy,
    pub concept_thresholds: Vec<f64>,
    pub decision_threshold: f64,
    pub version: u64,
    pub lambda: f64,
    /// Free-form headline numbers recorded at bootstrap (e.g. test recall).
    pub bootstrap_metrics: BTreeMap<String, f64>,
}

impl JoelNetwork {
    pub fn build(arch: &ArchSpec, input_dim: usize, taxonomy: ConceptTaxonomy, seed: u64) -> Result<Self, ModelError> {
        if taxonomy.is_empty() {
            return Err(ModelError::EmptyTaxonomy);
        }
        let specs = arch.layer_specs(taxonomy.len())?;
        let layers = nn::init_network(&specs, input_dim, seed)?;
        let net = Self {
            arch: arch.clone(),
            input_dim,
            layers,
            concept_thresholds: vec![UNCALIBRATED_THRESHOLD; taxonomy.len()],
            taxonomy,
            decision_threshold: UNCALIBRATED_THRESHOLD,
            version: 0,
            lambda: 1.0,
            bootstrap_metrics: BTreeMap::new(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn concepts(&self) -> usize {
        self.taxonomy.len()
    }

    pub fn trunk_len(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn semantic_index(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn decision_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    /// Checks shapes, activations and the semantic→decision chaining.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.len() < 2 {
            return Err(ModelError::Hierarchy("missing semantic or decision layer".into()));
        }
        let k = self.concepts();
        let sem = &self.layers[self.semantic_index()];
        let dec = &self.layers[self.decision_index()];
        if sem.output_dim() != k || sem.activation != Activation::Sigmoid {
            return Err(ModelError::Hierarchy(format!(
                "semantic layer must be {k} sigmoid units"
            )));
        }
        if dec.input_dim() != k {
            return Err(ModelError::Hierarchy(format!(
                "decision layer reads {} inputs but the semantic layer has {k}",
                dec.input_dim()
            )));
        }
        if dec.output_dim() != DECISION_CLASSES || dec.activation != Activation::Softmax {
            return Err(ModelError::Hierarchy("decision layer must be a 2-way softmax".into()));
        }
        if sem.dropout_rate != 0.0 || dec.dropout_rate != 0.0 || sem.batch_norm.is_some() || dec.batch_norm.is_some() {
            return Err(ModelError::Hierarchy("heads carry no dropout or batch-norm".into()));
        }
        if self.concept_thresholds.len() != k {
            return Err(ModelError::Hierarchy("one threshold per concept".into()));
        }
        nn::validate_layers(&self.layers, self.input_dim)?;
        Ok(())
    }

    fn check_dim(&self, x: &Array2<f64>) -> Result<(), ModelError> {
        if x.ncols() != self.input_dim {
            return Err(ModelError::Dimension {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Array2<f64>, mode: Mode) -> Result<ForwardTrace, ModelError> {
        self.check_dim(x)?;
        Ok(nn::forward(&mut self.layers, x, mode)?)
    }

    /// Semantic outputs δ_S of a trace.
    pub fn concept_outputs<'a>(&self, trace: &'a ForwardTrace) -> &'a Array2<f64> {
        trace.delta(self.semantic_index() + 1)
    }

    /// Decision softmax outputs of a trace.
    pub fn decision_outputs<'a>(&self, trace: &'a ForwardTrace) -> &'a Array2<f64> {
        trace.output()
    }

    pub fn trace_loss(&self, trace: &ForwardTrace, y: &Array2<f64>, s: &Array2<f64>) -> JointLoss {
        joint_loss(self.decision_outputs(trace), self.concept_outputs(trace), y, s, self.lambda)
    }

    pub fn predict_batch(&self, x: &Array2<f64>) -> Result<BatchScores, ModelError> {
        self.check_dim(x)?;
        let (concepts, decision) = self.eval_heads(x)?;
        Ok(BatchScores {
            fraud: decision.column(FRAUD_CLASS).to_vec(),
            concepts: concepts.mapv(|p| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)),
        })
    }

    fn eval_heads(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>), ModelError> {
        let sem = self.semantic_index();
        let concepts = nn::predict(&self.layers[..=sem], x)?;
        let decision = nn::predict(&self.layers[sem + 1..], &concepts)?;
        Ok((concepts, decision))
    }

    /// Eval-mode joint loss over a whole dataset.
    pub fn loss_on(&self, data: &EncodedDataset) -> Result<JointLoss, ModelError> {
        self.check_dim(&data.x)?;
        let (concepts, decision) = self.eval_heads(&data.x)?;
        Ok(joint_loss(&decision, &concepts, &data.all_decision_targets(), &data.concepts, self.lambda))
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<Prediction, ModelError> {
        let batch = x.to_owned().insert_axis(Axis(0));
        let scores = self.predict_batch(&batch)?;
        Ok(self.prediction_from(scores.fraud[0], scores.concepts.row(0)))
    }

    pub fn prediction_from(&self, fraud_score: f64, concept_scores: ArrayView1<f64>) -> Prediction {
        let fired = self.fired(concept_scores);
        Prediction {
            fraud_score,
            concept_scores: concept_scores.to_vec(),
            concepts_fired: fired.ids(&self.taxonomy).into_iter().map(String::from).collect(),
            flagged: fraud_score >= self.decision_threshold,
            model_version: self.version,
        }
    }

    pub fn fired(&self, concept_scores: ArrayView1<f64>) -> ConceptSet {
        ConceptSet::from_positions(
            self.concepts(),
            concept_scores
                .iter()
                .zip(&self.concept_thresholds)
                .enumerate()
                .filter(|(_, (s, t))| *s >= *t)
                .map(|(i, _)| i),
        )
    }

    /// Gradients of `L_D + λ·L_S`.
    pub fn joint_backward(&self, trace: &ForwardTrace, y: &Array2<f64>, s: &Array2<f64>) -> Result<JointGradients, ModelError> {
        self.joint_backward_weighted(trace, y, s, 1.0, self.lambda)
    }

    /// Gradients of `w_D·L_D + λ·L_S`. The two contributions meet at δ_S;
    /// everything below is ordinary backprop of their sum.
    pub fn joint_backward_weighted(
        &self,
        trace: &ForwardTrace,
        y: &Array2<f64>,
        s: &Array2<f64>,
        decision_weight: f64,
        lambda: f64,
    ) -> Result<JointGradients, ModelError> {
        if trace.layers.len() != self.layers.len() {
            return Err(NnError::Shape("trace does not belong to this network".into()).into());
        }
        if matches!(trace.mode, Mode::Eval) {
            return Err(NnError::ModeMismatch.into());
        }
        let d = self.decision_index();
        let probs = self.decision_outputs(trace);
        let concepts = self.concept_outputs(trace);
        let g_dec = softmax_cross_entropy_grad(probs, y) * decision_weight;
        let (dec_grad, decision_branch) =
            backward_layer(&self.layers[d], &trace.layers[d], GradSeed::PreActivation(g_dec));
        let semantic_branch = binary_cross_entropy_grad(concepts, s);
        let at_semantic = &decision_branch + &(&semantic_branch * lambda);
        let grads = backward_through(
            &self.layers,
            trace,
            d,
            GradSeed::Output(at_semantic.clone()),
            vec![(dec_grad, at_semantic.clone())],
        )?;
        Ok(JointGradients {
            grads,
            decision_branch,
            semantic_branch,
            at_semantic,
        })
    }

    /// One optimizer update. Does not bump the version; callers commit.
    pub fn apply(&mut self, grads: &Gradients, opt: &mut OptimizerState) -> Result<(), ModelError> {
        opt.step(&mut self.layers, grads)?;
        Ok(())
    }

    /// Marks a committed parameter update.
    pub fn commit_version(&mut self) -> u64 {
        self.version += 1;
        self.version
    }

    pub fn set_frozen(&mut self, indices: &[usize], frozen: bool) -> Result<(), ModelError> {
        Ok(nn::set_frozen(&mut self.layers, indices, frozen)?)
    }

    pub fn parameter_hash(&self) -> String {
        nn::parameter_hash(&self.layers)
    }

    /// Sets every threshold from its operating point on `reference`: the
    /// smallest score whose FPR stays within the target.
    pub fn calibrate_thresholds(
        &mut self,
        reference: &EncodedDataset,
        decision_fpr: f64,
        concept_fpr: f64,
    ) -> Result<CalibrationReport, ModelError> {
        if reference.is_empty() {
            return Err(ModelError::EmptyReference);
        }
        let scores = self.predict_batch(&reference.x)?;
        let decision = operating_point(&scores.fraud, &reference.labels, decision_fpr)?;
        self.decision_threshold = decision.threshold;
        let mut concepts = Vec::with_capacity(self.concepts());
        let mut flagged = Vec::new();
        for (k, concept) in self.taxonomy.concepts().iter().enumerate() {
            let labels: Vec<bool> = reference.concepts.column(k).iter().map(|v| *v > 0.5).collect();
            let col: Vec<f64> = scores.concepts.column(k).to_vec();
            match operating_point(&col, &labels, concept_fpr) {
                Ok(op) => {
                    self.concept_thresholds[k] = op.threshold;
                    concepts.push((concept.id.clone(), Some(op)));
                }
                Err(MetricsError::SingleClass { .. }) => {
                    self.concept_thresholds[k] = UNCALIBRATED_THRESHOLD;
                    flagged.push(concept.id.clone());
                    concepts.push((concept.id.clone(), None));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(CalibrationReport {
            decision,
            concepts,
            flagged,
        })
    }

    /// Runs only the decision head on given semantic activations.
    pub fn decision_from_semantic(&self, semantic: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        Ok(nn::predict(&self.layers[self.decision_index()..], semantic)?)
    }

    pub fn decision_bias(&self) -> &Array1<f64> {
        &self.layers[self.decision_index()].bias
    }
}

#[cfg(test)]
mod tests;
