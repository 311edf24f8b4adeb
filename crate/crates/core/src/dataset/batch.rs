use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    /// Negatives per batch; positives are added on top.
    pub batch_size: usize,
    pub min_positives_per_batch: usize,
    pub seed: u64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            min_positives_per_batch: 1,
            seed: 0,
        }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.batch_size == 0 || self.min_positives_per_batch == 0 {
            return Err(DatasetError::Config(
                "batch_size and min_positives_per_batch must be positive".into(),
            ));
        }
        if self.min_positives_per_batch > self.batch_size {
            return Err(DatasetError::Config(
                "min_positives_per_batch must not exceed batch_size".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of row-index batches.
///
/// Shuffled negatives are cut into consecutive chunks of `batch_size`; every
/// negative lands in exactly one batch. Shuffled positives are dealt
/// round-robin over the batches, then any batch still short of
/// `min_positives_per_batch` is topped up by cycling through the positive
/// pool, so a positive may appear more than once per epoch when they are
/// scarce. `epoch` selects an independent stream of the plan's seed.
pub fn sample_batches(
    labels: &[bool],
    plan: &BatchPlan,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DatasetError> {
    plan.validate()?;
    let mut positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut negatives: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if positives.is_empty() {
        return Err(DatasetError::NoPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(epoch);
    negatives.shuffle(&mut rng);
    positives.shuffle(&mut rng);

    let mut batches: Vec<Vec<usize>> = if negatives.is_empty() {
        vec![Vec::new(); positives.len().div_ceil(plan.batch_size)]
    } else {
        negatives
            .chunks(plan.batch_size)
            .map(|c| c.to_vec())
            .collect()
    };
    let n = batches.len();
    let mut pos_counts = vec![0usize; n];
    for (i, &p) in positives.iter().enumerate() {
        batches[i % n].push(p);
        pos_counts[i % n] += 1;
    }
    let mut cursor = 0;
    for (batch, count) in batches.iter_mut().zip(pos_counts) {
        for _ in count..plan.min_positives_per_batch {
            batch.push(positives[cursor % positives.len()]);
            cursor += 1;
        }
    }
    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    Ok(batches)
}
