use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{ArchSpec, JoelNetwork, ModelError};
use crate::nn::{Activation, BatchNorm, DenseLayer};
use crate::taxonomy::ConceptTaxonomy;

pub const CHECKPOINT_MAGIC: &str = "JOEL-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Thresholds {
    decision: f64,
    concepts: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BnRecord {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    activation: Activation,
    dropout_rate: f64,
    frozen: bool,
    /// Row-major, `out × in`.
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    bn: Option<BnRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    magic: String,
    format_version: u32,
    arch: ArchSpec,
    input_dim: usize,
    taxonomy_sha256: String,
    taxonomy: ConceptTaxonomy,
    model_version: u64,
    lambda: f64,
    thresholds: Thresholds,
    #[serde(default)]
    bootstrap_metrics: BTreeMap<String, f64>,
    layers: Vec<LayerRecord>,
}

fn to_record(l: &DenseLayer) -> LayerRecord {
    LayerRecord {
        activation: l.activation,
        dropout_rate: l.dropout_rate,
        frozen: l.frozen,
        w: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
        b: l.bias.to_vec(),
        bn: l.batch_norm.as_ref().map(|bn| BnRecord {
            gamma: bn.gamma.to_vec(),
            beta: bn.beta.to_vec(),
            running_mean: bn.running_mean.to_vec(),
            running_var: bn.running_var.to_vec(),
            momentum: bn.momentum,
            epsilon: bn.epsilon,
        }),
    }
}

fn from_record(i: usize, r: LayerRecord) -> Result<DenseLayer, ModelError> {
    let rows = r.w.len();
    let cols = r.w.first().map_or(0, Vec::len);
    if r.w.iter().any(|row| row.len() != cols) {
        return Err(ModelError::Format(format!("layer {i}: ragged weight matrix")));
    }
    let weights = Array2::from_shape_vec((rows, cols), r.w.concat())
        .map_err(|e| ModelError::Format(format!("layer {i}: {e}")))?;
    Ok(DenseLayer {
        weights,
        bias: Array1::from(r.b),
        activation: r.activation,
        dropout_rate: r.dropout_rate,
        batch_norm: r.bn.map(|bn| BatchNorm {
            gamma: Array1::from(bn.gamma),
            beta: Array1::from(bn.beta),
            running_mean: Array1::from(bn.running_mean),
            running_var: Array1::from(bn.running_var),
            momentum: bn.momentum,
            epsilon: bn.epsilon,
        }),
        frozen: r.frozen,
    })
}

impl JoelNetwork {
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            magic: CHECKPOINT_MAGIC.into(),
            format_version: FORMAT_VERSION,
            arch: self.arch.clone(),
            input_dim: self.input_dim,
            taxonomy_sha256: self.taxonomy.sha256(),
            taxonomy: self.taxonomy.clone(),
            model_version: self.version,
            lambda: self.lambda,
            thresholds: Thresholds {
                decision: self.decision_threshold,
                concepts: self.concept_thresholds.clone(),
            },
            bootstrap_metrics: self.bootstrap_metrics.clone(),
            layers: self.layers.iter().map(to_record).collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, ModelError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ModelError::Format(format!("not JSON: {e}")))?;
        if value.get("magic").and_then(|m| m.as_str()) != Some(CHECKPOINT_MAGIC) {
            return Err(ModelError::Format("missing or corrupt magic".into()));
        }
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ModelError::Format("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(ModelError::Version {
                found: found.try_into().unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| ModelError::Format(e.to_string()))?;
        let actual = file.taxonomy.sha256();
        if actual != file.taxonomy_sha256 {
            return Err(ModelError::TaxonomyMismatch {
                checkpoint: file.taxonomy_sha256,
                supplied: actual,
            });
        }
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, r)| from_record(i, r))
            .collect::<Result<Vec<_>, _>>()?;
        let net = JoelNetwork {
            arch: file.arch,
            input_dim: file.input_dim,
            layers,
            taxonomy: file.taxonomy,
            concept_thresholds: file.thresholds.concepts,
            decision_threshold: file.thresholds.decision,
            version: file.model_version,
            lambda: file.lambda,
            bootstrap_metrics: file.bootstrap_metrics,
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn save_checkpoint(net: &JoelNetwork, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, net.to_checkpoint_json())?;
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<JoelNetwork, ModelError> {
    JoelNetwork::from_checkpoint_json(&fs::read_to_string(path)?)
}

/// Loads and verifies the checkpoint was trained against `tax`.
pub fn load_checkpoint_with_taxonomy(path: impl AsRef<Path>, tax: &ConceptTaxonomy) -> Result<JoelNetwork, ModelError> {
    let net = load_checkpoint(path)?;
    let supplied = tax.sha256();
    let checkpoint = net.taxonomy.sha256();
    if supplied != checkpoint {
        return Err(ModelError::TaxonomyMismatch { checkpoint, supplied });
    }
    Ok(net)
}
