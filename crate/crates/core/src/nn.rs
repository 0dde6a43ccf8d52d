//! Minimal dense classifier: ReLU MLP with a softmax cross-entropy head.
//!
//! The last dense layer is the *ultimate layer*: its weight matrix `W` has
//! shape `v × u` (classes × penultimate width) and its bias has length `v`.
//! Hidden layers use ReLU; the ultimate layer produces logits. The loss is the
//! natural-log cross entropy averaged over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{axpy, dot, l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Shape `(out_dim, in_dim)`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a dense classifier, ordered input to output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<DenseLayer>,
}

impl ModelParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("a model needs at least one layer");
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return invalid(format!("layer {i}: bias length != output width"));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return invalid(format!("layer {i}: input width does not match previous output"));
            }
        }
        Ok(Self { layers })
    }

    /// He-uniform initialised MLP with layer widths `sizes` (input first, classes last).
    pub fn mlp(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return invalid("mlp needs at least input and output widths, all non-zero");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = if i == last {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                DenseLayer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                bias: vec![0.0; l.out_dim()],
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn ultimate_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Number of classes `v`.
    pub fn num_classes(&self) -> usize {
        self.layers[self.ultimate_index()].out_dim()
    }

    /// Width `u` of the penultimate representation.
    pub fn penultimate_dim(&self) -> usize {
        self.layers[self.ultimate_index()].in_dim()
    }

    pub fn ultimate_weight(&self) -> &Matrix {
        &self.layers[self.ultimate_index()].weight
    }

    pub fn ultimate_bias(&self) -> &[f64] {
        &self.layers[self.ultimate_index()].bias
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn is_congruent(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub(crate) fn ensure_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            invalid("model shapes are not congruent")
        }
    }

    /// Parameter blocks in flatten order: per layer, the weight then the bias.
    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for block in self.blocks() {
            out.extend_from_slice(block);
        }
        out
    }

    /// Rebuilds a model with this model's shapes from a flat parameter vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.num_params() {
            return invalid(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            ));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for block in out.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(out)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for (dst, src) in self.blocks_mut().zip(other.blocks()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            block.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self - other`
    pub fn delta_from(&self, other: &ModelParams) -> ModelParams {
        let mut out = self.clone();
        out.add_scaled(-1.0, other);
        out
    }

    /// Flattened L2 norm.
    pub fn norm(&self) -> f64 {
        self.blocks().map(|b| dot(b, b)).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.blocks()
            .zip(other.blocks())
            .map(|(a, b)| crate::tensor::squared_distance(a, b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Per-layer gradients of the batch-averaged cross-entropy loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(ModelParams);

impl GradientBundle {
    pub fn as_params(&self) -> &ModelParams {
        &self.0
    }

    pub fn into_params(self) -> ModelParams {
        self.0
    }

    pub fn ultimate_weight(&self) -> &Matrix {
        self.0.ultimate_weight()
    }

    pub fn ultimate_bias(&self) -> &[f64] {
        self.0.ultimate_bias()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub probs: Matrix,
    /// Penultimate activations `R(x)`, one row per sample.
    pub representations: Matrix,
}

/// Activations of every layer; `acts[0]` is the input, the last entry the logits.
fn forward_activations(model: &ModelParams, batch: &Matrix) -> Result<Vec<Matrix>> {
    if batch.cols() != model.input_dim() {
        return invalid(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            model.input_dim()
        ));
    }
    let last = model.ultimate_index();
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(batch.clone());
    for (i, layer) in model.layers.iter().enumerate() {
        let mut z = acts[i].matmul_transposed(&layer.weight)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, b) in row.iter_mut().zip(&layer.bias) {
                *v += b;
                if i != last && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        acts.push(z);
    }
    Ok(acts)
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    probs
}

pub fn forward(model: &ModelParams, batch: &Matrix) -> Result<ForwardOutput> {
    let mut acts = forward_activations(model, batch)?;
    let logits = acts.pop().expect("at least one layer");
    let representations = acts.pop().expect("input present");
    let probs = softmax_rows(&logits);
    Ok(ForwardOutput {
        logits,
        probs,
        representations,
    })
}

/// Predicted class per row.
pub fn predict(model: &ModelParams, batch: &Matrix) -> Result<Vec<usize>> {
    let acts = forward_activations(model, batch)?;
    let logits = acts.last().expect("logits");
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Gradient of the mean cross-entropy for a batch with one-hot `labels`.
pub fn backward(model: &ModelParams, batch: &Matrix, labels: &Matrix) -> Result<GradientBundle> {
    if labels.rows() != batch.rows() || labels.cols() != model.num_classes() {
        return invalid("labels must be a one-hot matrix row-aligned with the batch");
    }
    let mut classes = Vec::with_capacity(labels.rows());
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != row.len() - 1 {
            return invalid(format!("label row {r} is not one-hot"));
        }
        classes.push(row.iter().position(|&v| v == 1.0).expect("one entry"));
    }
    backward_classes(model, batch, &classes).map(|(g, _)| g)
}

/// Same as [`backward`] but with class indices; also returns the mean loss.
pub fn backward_classes(
    model: &ModelParams,
    batch: &Matrix,
    classes: &[usize],
) -> Result<(GradientBundle, f64)> {
    let n = batch.rows();
    if classes.len() != n || n == 0 {
        return invalid("labels must be non-empty and row-aligned with the batch");
    }
    let v = model.num_classes();
    if let Some(&bad) = classes.iter().find(|&&c| c >= v) {
        return invalid(format!("label {bad} out of range for {v} classes"));
    }
    let acts = forward_activations(model, batch)?;
    let mut delta = softmax_rows(acts.last().expect("logits"));
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (r, &c) in classes.iter().enumerate() {
        let row = delta.row_mut(r);
        loss -= row[c].max(f64::MIN_POSITIVE).ln();
        row[c] -= 1.0;
        row.iter_mut().for_each(|x| *x *= inv_n);
    }

    let mut grads = model.zeros_like();
    for l in (0..model.layers.len()).rev() {
        let input = &acts[l];
        let g = &mut grads.layers[l];
        for r in 0..n {
            let d = delta.row(r);
            let x = input.row(r);
            for (o, &dv) in d.iter().enumerate() {
                if dv != 0.0 {
                    axpy(dv, x, g.weight.row_mut(o));
                    g.bias[o] += dv;
                }
            }
        }
        if l > 0 {
            let w = &model.layers[l].weight;
            let mut prev = Matrix::zeros(n, w.cols());
            for r in 0..n {
                let d = delta.row(r);
                let dst = prev.row_mut(r);
                for (o, &dv) in d.iter().enumerate() {
                    if dv != 0.0 {
                        axpy(dv, w.row(o), dst);
                    }
                }
                // ReLU mask from the stored activation.
                for (p, &a) in dst.iter_mut().zip(input.row(r)) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok((GradientBundle(grads), loss * inv_n))
}

/// Returns `model - lr * grads`.
pub fn sgd_step(model: &ModelParams, grads: &GradientBundle, lr: f64) -> Result<ModelParams> {
    let mut out = model.clone();
    apply_sgd(&mut out, grads, lr)?;
    Ok(out)
}

pub fn apply_sgd(model: &mut ModelParams, grads: &GradientBundle, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate must be positive, got {lr}"));
    }
    model.ensure_congruent(&grads.0)?;
    model.add_scaled(-lr, &grads.0);
    Ok(())
}

/// Cosine similarity; 0 when either vector has norm below 1e-12.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return invalid(format!("cosine of vectors with lengths {} and {}", u.len(), v.len()));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu < 1e-12 || nv < 1e-12 {
        return Ok(0.0);
    }
    Ok(dot(u, v) / (nu * nv))
}
