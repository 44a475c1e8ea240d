//! Loss functions: cosine similarity, the label contrastive loss,
//! cross-entropy, and the mixup fix/mix/combined losses, each with analytic
//! gradients w.r.t. its inputs.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ModelParameters, OutputGradient};

/// Temperature for the label contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 1.0 }
    }
}

/// Mixup hyperparameters: `Beta(beta_param, beta_param)` coefficient and the
/// linear coefficient combining fix and mix losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    pub beta_param: f64,
    pub combine_coeff: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            beta_param: 0.75,
            combine_coeff: 1.0,
        }
    }
}

/// Cosine similarity value; `degenerate` marks a zero-norm input, for which
/// the similarity is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Cosine {
    assert_eq!(u.len(), v.len(), "cosine_similarity: length mismatch");
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Cosine {
            value: 0.0,
            degenerate: true,
        };
    }
    Cosine {
        value: u.dot(&v) / (nu * nv),
        degenerate: false,
    }
}

/// Why a contrastive batch produced no loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveSkip {
    /// No class has two or more members, so every numerator is empty.
    NoWithinClassPair,
    /// All samples share one class, so the denominator is empty.
    NoCrossClassPair,
}

/// Result of the label contrastive loss on one batch.
#[derive(Debug, Clone)]
pub enum ContrastiveOutcome {
    Computed {
        loss: f64,
        /// Gradient w.r.t. the embedding matrix.
        grad: Array2<f64>,
    },
    /// Loss undefined on this batch; the caller omits it for the step.
    Skipped(ContrastiveSkip),
}

impl ContrastiveOutcome {
    pub fn loss(&self) -> Option<f64> {
        match self {
            ContrastiveOutcome::Computed { loss, .. } => Some(*loss),
            ContrastiveOutcome::Skipped(_) => None,
        }
    }
}

/// Label contrastive loss over ordered pairs of a batch.
///
/// Per class `c` with at least two batch members:
/// `l(c) = -log( sum_{i!=j, y_i=y_j=c} exp(s_ij/tau) / sum_{y_i!=y_j} exp(s_ij/tau) )`,
/// with `s` the cosine similarity. The loss is the mean of `l(c)` over
/// contributing classes; the denominator ranges over all cross-class ordered
/// pairs of the batch.
pub fn label_contrastive_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    cfg: &ContrastiveConfig,
) -> ContrastiveOutcome {
    let n = embeddings.nrows();
    assert_eq!(n, labels.len(), "label_contrastive_loss: label count mismatch");
    let tau = cfg.temperature;

    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut class_counts = vec![0usize; num_classes];
    for &y in labels {
        class_counts[y] += 1;
    }
    let contributing: Vec<usize> = (0..num_classes).filter(|&c| class_counts[c] >= 2).collect();
    if contributing.is_empty() {
        return ContrastiveOutcome::Skipped(ContrastiveSkip::NoWithinClassPair);
    }
    let has_cross = labels.iter().any(|&y| y != labels[0]);
    if !has_cross {
        return ContrastiveOutcome::Skipped(ContrastiveSkip::NoCrossClassPair);
    }

    let norms: Vec<f64> = (0..n)
        .map(|i| {
            let r = embeddings.row(i);
            r.dot(&r).sqrt()
        })
        .collect();
    let sim = |i: usize, j: usize| -> f64 {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            embeddings.row(i).dot(&embeddings.row(j)) / (norms[i] * norms[j])
        }
    };

    let mut numerators = vec![0.0f64; num_classes];
    let mut denominator = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = (sim(i, j) / tau).exp();
            if labels[i] == labels[j] {
                numerators[labels[i]] += e;
            } else {
                denominator += e;
            }
        }
    }

    let k = contributing.len() as f64;
    let loss = contributing
        .iter()
        .map(|&c| denominator.ln() - numerators[c].ln())
        .sum::<f64>()
        / k;

    // dL/ds for an ordered pair: within-class pairs pull through the class
    // numerator, cross-class pairs push through the shared denominator.
    let mut grad = Array2::zeros(embeddings.raw_dim());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = sim(i, j);
            let dl_ds = if labels[i] == labels[j] {
                -(s / tau).exp() / (k * tau * numerators[labels[i]])
            } else {
                (s / tau).exp() / (tau * denominator)
            };
            if norms[i] == 0.0 || norms[j] == 0.0 {
                continue; // similarity pinned to 0; no gradient flows
            }
            for d in 0..embeddings.ncols() {
                let ui = embeddings[[i, d]] / norms[i];
                let uj = embeddings[[j, d]] / norms[j];
                grad[[i, d]] += dl_ds * (uj - s * ui) / norms[i];
                grad[[j, d]] += dl_ds * (ui - s * uj) / norms[j];
            }
        }
    }

    ContrastiveOutcome::Computed { loss, grad }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Cross-entropy of one logit vector against a hard label, with its gradient.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label: label as i64,
            num_classes: logits.len(),
            at: Some("cross_entropy".into()),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum_exp = max + logits.mapv(|v| (v - max).exp()).sum().ln();
    let loss = log_sum_exp - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch of logits; gradient includes the `1/n`.
pub fn cross_entropy_batch(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    assert_eq!(logits.nrows(), labels.len(), "cross_entropy_batch: label count mismatch");
    let n = labels.len();
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        let (loss, g) = cross_entropy(logits.row(i), label)?;
        total += loss;
        grad.row_mut(i).assign(&(g / n as f64));
    }
    Ok((total / n as f64, grad))
}

/// Convex combination of two feature vectors with coefficient `lambda`.
pub fn mix_features(x_fix: ArrayView1<f64>, x_mix: ArrayView1<f64>, lambda: f64) -> Array1<f64> {
    assert_eq!(x_fix.len(), x_mix.len(), "mix_features: dimension mismatch");
    &x_fix.mapv(|v| lambda * v) + &x_mix.mapv(|v| (1.0 - lambda) * v)
}

/// Draws `lambda ~ Beta(a, a)` and mixes the pair; returns the mixed sample
/// and the drawn coefficient.
pub fn mixup_pair<R: Rng>(
    x_fix: ArrayView1<f64>,
    x_mix: ArrayView1<f64>,
    cfg: &MixupConfig,
    rng: &mut R,
) -> (Array1<f64>, f64) {
    let beta = Beta::new(cfg.beta_param, cfg.beta_param).expect("beta_param validated > 0");
    let lambda = beta.sample(rng);
    (mix_features(x_fix, x_mix, lambda), lambda)
}

/// A scalar batch loss with its gradient w.r.t. all model parameters.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: ModelParameters,
}

/// Classification loss on augmented samples against their pseudo-labels:
/// mean cross-entropy of `f(aug(x))`, differentiated through the network.
///
/// Returns `None` on an empty batch (the step skips this loss).
pub fn fix_loss(
    params: &ModelParameters,
    features: &Array2<f64>,
    pseudo_labels: &[usize],
    mut strong_aug: impl FnMut(ArrayView1<f64>) -> Array1<f64>,
) -> Result<Option<BatchLoss>> {
    if features.nrows() == 0 {
        return Ok(None);
    }
    let mut augmented = features.clone();
    for mut row in augmented.rows_mut() {
        let aug = strong_aug(row.view());
        row.assign(&aug);
    }
    let out = nn::forward(params, &augmented)?;
    let (loss, grad_logits) = cross_entropy_batch(&out.logits, pseudo_labels)?;
    let grads = nn::backward(params, &out, &OutputGradient::for_logits(grad_logits))?;
    Ok(Some(BatchLoss { loss, grads }))
}

/// Mixup loss: one forward pass on weakly augmented mixed samples, scored
/// against both source labels with weights `lambda` and `1 - lambda`.
pub fn mix_loss(
    params: &ModelParameters,
    mixed: &Array2<f64>,
    lambdas: &[f64],
    labels_fix: &[usize],
    labels_mix: &[usize],
    mut weak_aug: impl FnMut(ArrayView1<f64>) -> Array1<f64>,
) -> Result<BatchLoss> {
    let n = mixed.nrows();
    assert_eq!(n, lambdas.len(), "mix_loss: lambda count mismatch");
    assert_eq!(n, labels_fix.len(), "mix_loss: fix label count mismatch");
    assert_eq!(n, labels_mix.len(), "mix_loss: mix label count mismatch");
    let mut augmented = mixed.clone();
    for mut row in augmented.rows_mut() {
        let aug = weak_aug(row.view());
        row.assign(&aug);
    }
    let out = nn::forward(params, &augmented)?;
    let mut total = 0.0;
    let mut grad_logits = Array2::zeros(out.logits.raw_dim());
    for i in 0..n {
        let lambda = lambdas[i];
        let (loss_fix, g_fix) = cross_entropy(out.logits.row(i), labels_fix[i])?;
        let (loss_mix, g_mix) = cross_entropy(out.logits.row(i), labels_mix[i])?;
        total += lambda * loss_fix + (1.0 - lambda) * loss_mix;
        let g = g_fix.mapv(|v| lambda * v) + g_mix.mapv(|v| (1.0 - lambda) * v);
        grad_logits.row_mut(i).assign(&(g / n as f64));
    }
    let grads = nn::backward(params, &out, &OutputGradient::for_logits(grad_logits))?;
    Ok(BatchLoss {
        loss: total / n as f64,
        grads,
    })
}

/// `L_combine = L_fix + b * L_mix`, gradients combined by the same linearity.
pub fn combined_loss(fix: &BatchLoss, mix: &BatchLoss, cfg: &MixupConfig) -> BatchLoss {
    let b = cfg.combine_coeff;
    BatchLoss {
        loss: fix.loss + b * mix.loss,
        grads: fix.grads.zip_map(&mix.grads, |f, m| f + b * m),
    }
}
