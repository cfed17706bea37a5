//! Population loss and a small linear-softmax trainer.
//!
//! For a sample of class `y` with logits `f`, the loss is
//!
//! ```text
//! log(1 + sum_{y' != y} w[y][y'] * exp(f[y'] - f[y]))
//! ```
//!
//! where `w[y][y'] = pi[y'] / pi[y]` when `y'` is in the population of `y`
//! and `1` otherwise. With every weight equal to one this is plain softmax
//! cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{FrequencyVector, PopulationTable};

/// Precomputed log-weights of the population loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PLossContext {
    pi: FrequencyVector,
    populations: PopulationTable,
    /// `log_weights[y][y']`; the diagonal is unused and kept at 0.
    log_weights: Vec<Vec<f64>>,
}

impl PLossContext {
    pub fn new(pi: FrequencyVector, populations: PopulationTable) -> Result<Self> {
        let k = pi.len();
        if populations.num_predicates() != k {
            return Err(Error::KMismatch {
                left: "frequencies".into(),
                left_k: k,
                right: "populations".into(),
                right_k: populations.num_predicates(),
            });
        }
        let p = pi.as_slice();
        let mut log_weights = vec![vec![0.0; k]; k];
        for (y, row) in log_weights.iter_mut().enumerate() {
            for &member in populations.population(y) {
                row[member] = (p[member] / p[y]).ln();
            }
        }
        Ok(PLossContext {
            pi,
            populations,
            log_weights,
        })
    }

    /// Unit weights everywhere: the loss becomes cross-entropy.
    pub fn cross_entropy(num_classes: usize) -> Self {
        PLossContext::new(
            FrequencyVector::uniform(num_classes),
            PopulationTable::empty(num_classes, 1),
        )
        .expect("uniform context is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.log_weights.len()
    }

    pub fn weight(&self, y: usize, other: usize) -> f64 {
        self.log_weights[y][other].exp()
    }

    pub fn frequencies(&self) -> &FrequencyVector {
        &self.pi
    }

    pub fn populations(&self) -> &PopulationTable {
        &self.populations
    }
}

/// Shifted terms `{f_y} ∪ {f_y' + ln w}` and their max.
fn shifted_terms(ctx: &PLossContext, y: usize, f: &[f64]) -> (Vec<f64>, f64) {
    let lw = &ctx.log_weights[y];
    let terms: Vec<f64> = f
        .iter()
        .enumerate()
        .map(|(c, &fc)| if c == y { fc } else { fc + lw[c] })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (terms, max)
}

pub fn p_loss(ctx: &PLossContext, y: usize, f: &[f64]) -> f64 {
    let (terms, max) = shifted_terms(ctx, y, f);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    non_negative(max + sum.ln() - f[y])
}

/// Clamp rounding-level negatives to zero; NaN passes through.
fn non_negative(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

/// Loss and its gradient with respect to the logits.
pub fn p_loss_with_gradient(ctx: &PLossContext, y: usize, f: &[f64]) -> (f64, Vec<f64>) {
    let (terms, max) = shifted_terms(ctx, y, f);
    let mut grad: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    for g in grad.iter_mut() {
        *g /= sum;
    }
    // grad[y] = -(s-1)/s; written as minus the sum of the others so that the
    // components cancel to rounding.
    let others: f64 = grad.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, g)| g).sum();
    grad[y] = -others;
    let loss = non_negative(max + sum.ln() - f[y]);
    (loss, grad)
}

pub fn p_loss_gradient(ctx: &PLossContext, y: usize, f: &[f64]) -> Vec<f64> {
    p_loss_with_gradient(ctx, y, f).1
}

/// Linear scorer `f = W x + b` with `K` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    loss_trace: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        LinearModel {
            weights: vec![vec![0.0; dim]; num_classes],
            bias: vec![0.0; num_classes],
            loss_trace: Vec::new(),
        }
    }

    pub fn from_parts(weights: Vec<Vec<f64>>, bias: Vec<f64>, loss_trace: Vec<f64>) -> Result<Self> {
        if weights.len() != bias.len() || weights.is_empty() {
            return Err(Error::invalid("model", "weights and bias disagree on K"));
        }
        let dim = weights[0].len();
        if weights.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("model", "ragged weight matrix"));
        }
        if weights.iter().flatten().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("model", "non-finite parameter"));
        }
        Ok(LinearModel {
            weights,
            bias,
            loss_trace,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Mean training loss per epoch.
    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 30,
            batch: 64,
            seed: 0,
            l2: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train config", "lr must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("train config", "batch must be positive"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::invalid("train config", "l2 must be non-negative"));
        }
        Ok(())
    }
}

/// Mini-batch gradient descent on the mean population loss plus
/// `l2/2 * ||W||^2`, starting from zeros. Per-sample gradients may be computed
/// in parallel; they are always reduced in sample order.
pub fn train_linear(
    features: &[Vec<f64>],
    labels: &[usize],
    ctx: &PLossContext,
    config: &TrainConfig,
) -> Result<LinearModel> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::invalid("training set", "no samples"));
    }
    if features.len() != labels.len() {
        return Err(Error::invalid(
            "training set",
            format!("{} feature rows but {} labels", features.len(), labels.len()),
        ));
    }
    let k = ctx.num_classes();
    let dim = features[0].len();
    if features.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("training set", "ragged feature rows"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid("training set", format!("label {bad} >= K={k}")));
    }

    let mut model = LinearModel::zeros(k, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch).enumerate() {
            let per_sample: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| p_loss_with_gradient(ctx, labels[i], &model.logits(&features[i])))
                .collect();

            let mut grad_w = vec![vec![0.0; dim]; k];
            let mut grad_b = vec![0.0; k];
            let mut batch_loss = 0.0;
            for (&i, (loss, g)) in batch.iter().zip(&per_sample) {
                batch_loss += loss;
                let x = &features[i];
                for c in 0..k {
                    grad_b[c] += g[c];
                    for (gw, xv) in grad_w[c].iter_mut().zip(x) {
                        *gw += g[c] * xv;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += batch_loss;

            let scale = config.lr / batch.len() as f64;
            for c in 0..k {
                model.bias[c] -= scale * grad_b[c];
                for (w, gw) in model.weights[c].iter_mut().zip(&grad_w[c]) {
                    *w -= scale * gw + config.lr * config.l2 * *w;
                }
            }
        }
        let mean = epoch_loss / features.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        model.loss_trace.push(mean);
    }
    Ok(model)
}
