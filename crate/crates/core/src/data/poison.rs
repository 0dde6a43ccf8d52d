//! Poisoned training sets for compromised clients.
//!
//! A poisoned set is the clean share followed by `p` poisoned samples, where
//! `p` is chosen so that `p / (|clean| + p)` matches the poisoned data rate:
//! `|D'| = ⌈|clean| / (1 - pdr)⌉`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Error, Result};
use crate::tensor::Matrix;

/// Rectangular pixel patch stamped with a constant value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerPatch {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub value: f64,
}

impl Default for TriggerPatch {
    fn default() -> Self {
        Self {
            row: 0,
            col: 0,
            height: 3,
            width: 3,
            value: 1.0,
        }
    }
}

impl TriggerPatch {
    fn check_fits(&self, (h, w): (usize, usize)) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.row + self.height > h || self.col + self.width > w {
            return invalid(format!(
                "trigger {}x{} at ({}, {}) does not fit a {h}x{w} image",
                self.height, self.width, self.row, self.col
            ));
        }
        Ok(())
    }

    /// Flat indices covered by the whole patch.
    pub fn pixels(&self, shape: (usize, usize)) -> Result<Vec<usize>> {
        self.shard_pixels(0, 1, shape)
    }

    /// Flat indices of one distributed-trigger shard: the patch columns are
    /// split into `total_parts` contiguous bands and `part` selects one.
    pub fn shard_pixels(&self, part: usize, total_parts: usize, shape: (usize, usize)) -> Result<Vec<usize>> {
        self.check_fits(shape)?;
        if total_parts == 0 || part >= total_parts || total_parts > self.width {
            return invalid(format!(
                "shard {part} of {total_parts} invalid for a trigger {} columns wide",
                self.width
            ));
        }
        let lo = self.col + part * self.width / total_parts;
        let hi = self.col + (part + 1) * self.width / total_parts;
        let mut out = Vec::with_capacity(self.height * (hi - lo));
        for r in self.row..self.row + self.height {
            for c in lo..hi {
                out.push(r * shape.1 + c);
            }
        }
        Ok(out)
    }

    /// Returns a copy of `data` with the patch stamped on every sample.
    pub fn stamp_all(&self, data: &Dataset) -> Result<Dataset> {
        let px = self.pixels(data.image_shape())?;
        Ok(data.map_features(|row| px.iter().for_each(|&i| row[i] = self.value)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoisonKind {
    Trigger,
    DbaShard { part: usize, total_parts: usize },
    EdgeCase,
    LabelFlip { source: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSpec {
    pub kind: PoisonKind,
    pub target_label: usize,
    pub pdr: f64,
    #[serde(default)]
    pub trigger: TriggerPatch,
}

/// Number of poisoned samples to add to `clean_len` clean ones.
pub fn poisoned_count(clean_len: usize, pdr: f64) -> usize {
    let total = (clean_len as f64 / (1.0 - pdr) - 1e-9).ceil() as usize;
    total.max(clean_len + 1) - clean_len
}

/// Builds the edge-case pool: every sample rotated 90° clockwise (reversed,
/// for non-square shapes) and inverted as `x ↦ 1 - x`.
pub fn edge_case_pool(source: &Dataset) -> Dataset {
    let (h, w) = source.image_shape();
    source.map_features(|row| {
        let orig = row.to_vec();
        if h == w {
            for r in 0..h {
                for c in 0..w {
                    row[r * w + c] = orig[(h - 1 - c) * w + r];
                }
            }
        } else {
            row.iter_mut().zip(orig.iter().rev()).for_each(|(d, s)| *d = *s);
        }
        row.iter_mut().for_each(|v| *v = 1.0 - *v);
    })
}

pub fn build_poisoned_dataset(
    clean_share: &Dataset,
    spec: &PoisonSpec,
    edge_pool: Option<&Dataset>,
    seed: u64,
) -> Result<Dataset> {
    poison_with_sources(clean_share, spec, edge_pool, seed).map(|(d, _)| d)
}

/// Also returns, for each poisoned sample, the index of the clean (or pool) sample it was derived from.
pub(crate) fn poison_with_sources(
    clean: &Dataset,
    spec: &PoisonSpec,
    edge_pool: Option<&Dataset>,
    seed: u64,
) -> Result<(Dataset, Vec<usize>)> {
    if !(spec.pdr > 0.0 && spec.pdr < 1.0) {
        return invalid(format!("pdr must lie in (0, 1), got {}", spec.pdr));
    }
    if spec.target_label >= clean.num_classes() {
        return invalid(format!("target label {} out of range", spec.target_label));
    }
    if clean.is_empty() {
        return invalid("cannot poison an empty share");
    }
    let count = poisoned_count(clean.len(), spec.pdr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = clean.image_shape();

    let (base, patch): (&Dataset, Option<Vec<usize>>) = match &spec.kind {
        PoisonKind::Trigger => (clean, Some(spec.trigger.pixels(shape)?)),
        PoisonKind::DbaShard { part, total_parts } => {
            (clean, Some(spec.trigger.shard_pixels(*part, *total_parts, shape)?))
        }
        PoisonKind::EdgeCase => match edge_pool {
            Some(pool) if !pool.is_empty() => {
                if pool.dim() != clean.dim() {
                    return invalid("edge pool feature width differs from the clean share");
                }
                (pool, None)
            }
            _ => return Err(Error::Config("edge-case poisoning needs a non-empty edge pool".into())),
        },
        PoisonKind::LabelFlip { .. } => (clean, None),
    };

    let candidates: Vec<usize> = match &spec.kind {
        PoisonKind::LabelFlip { source } => {
            let c = clean.indices_of(*source);
            if c.is_empty() {
                return Err(Error::Config(format!("label flip: no samples of class {source} in share")));
            }
            c
        }
        PoisonKind::EdgeCase => (0..base.len()).collect(),
        _ => {
            let non_target: Vec<usize> = (0..base.len())
                .filter(|&i| base.labels()[i] != spec.target_label)
                .collect();
            if non_target.is_empty() {
                (0..base.len()).collect()
            } else {
                non_target
            }
        }
    };

    let sources: Vec<usize> = (0..count)
        .map(|_| candidates[rng.random_range(0..candidates.len())])
        .collect();
    let mut features = Matrix::zeros(count, clean.dim());
    for (k, &s) in sources.iter().enumerate() {
        let row = features.row_mut(k);
        row.copy_from_slice(base.features().row(s));
        if let Some(px) = &patch {
            px.iter().for_each(|&i| row[i] = spec.trigger.value);
        }
    }
    let poisoned = Dataset::new(features, vec![spec.target_label; count], clean.num_classes(), shape)?;
    Ok((clean.concat(&poisoned)?, sources))
}
