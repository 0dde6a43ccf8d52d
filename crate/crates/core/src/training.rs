//! Mini-batch SGD over a client's local dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::nn::{apply_sgd, backward_classes, ModelParams};

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl TrainSettings {
    pub fn new(lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self { lr, epochs, batch_size }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return invalid("training needs lr > 0 and batch_size > 0");
        }
        Ok(())
    }
}

/// Runs `settings.epochs` shuffled epochs in place. `after_epoch(e, model)`
/// is called after each completed epoch `e` (1-based).
pub fn train_local(
    model: &mut ModelParams,
    data: &Dataset,
    settings: &TrainSettings,
    seed: u64,
    mut after_epoch: impl FnMut(usize, &mut ModelParams),
) -> Result<()> {
    settings.validate()?;
    if data.is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch = data.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (grads, _) = backward_classes(model, &batch, &labels)?;
            apply_sgd(model, &grads, settings.lr)?;
        }
        after_epoch(epoch, model);
    }
    Ok(())
}
