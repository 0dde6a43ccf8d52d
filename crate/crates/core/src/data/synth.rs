//! Gaussian-blob classification data.
//!
//! Class `c` is centred on axis `dim - 1 - c` at distance `separation / √2`
//! from the origin, so every pair of class means is exactly `separation`
//! apart (in units of the unit noise σ). The low feature indices are never
//! used by a class mean, which leaves them free for trigger patches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::tensor::Matrix;

pub const DEFAULT_SEPARATION: f64 = 6.0;

pub fn synth_dataset(num_classes: usize, per_class: usize, dim: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with_separation(num_classes, per_class, dim, DEFAULT_SEPARATION, seed)
}

pub fn synth_dataset_with_separation(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return invalid("synthetic dataset needs positive class count, per-class count and dim");
    }
    if num_classes > dim {
        return invalid(format!("{num_classes} classes need at least that many dims, got {dim}"));
    }
    let offset = separation / std::f64::consts::SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for c in 0..num_classes {
            let axis = dim - 1 - c;
            for k in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(if k == axis { noise + offset } else { noise });
            }
            labels.push(c);
        }
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, num_classes, (1, dim))
}
