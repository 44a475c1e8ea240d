//! Client-side local training: anchor-similarity pseudo-labeling, the
//! prediction-threshold baseline, and the supervised upper bound.
//!
//! The semi-supervised entry points take only a feature matrix, never a
//! shard, so ground-truth labels are unreachable from these paths.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::anchor::{
    ensemble_pseudo_label, label_embeddings, AnchorEmbeddingTable, FixMixDatasets, LabelingConfig,
    LabelScores, PseudoLabelRecord,
};
use crate::data::{strong_augment, weak_augment, AugmentationConfig};
use crate::error::Result;
use crate::losses::{
    combined_loss, cross_entropy_batch, fix_loss, mix_loss, mixup_pair, softmax, MixupConfig,
};
use crate::nn::{self, sgd_step, ModelParameters, OptimizerConfig, OptimizerState, OutputGradient};

/// Knobs shared by every local training routine.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainSettings<'a> {
    pub optimizer: &'a OptimizerConfig,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub client_mixup_enabled: bool,
    pub mixup: &'a MixupConfig,
    pub augmentation: &'a AugmentationConfig,
}

/// What one client hands back before aggregation-side bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    /// Updated parameters; `None` when training was skipped.
    pub params: Option<ModelParameters>,
    /// Pseudo-label records driving training (empty for the supervised path).
    pub records: Vec<PseudoLabelRecord>,
    pub qualified_count: usize,
    pub trained_sample_count: usize,
    pub steps_taken: usize,
}

impl ClientOutcome {
    fn skipped(records: Vec<PseudoLabelRecord>) -> Self {
        ClientOutcome {
            params: None,
            records,
            qualified_count: 0,
            trained_sample_count: 0,
            steps_taken: 0,
        }
    }
}

/// Anchor-similarity pseudo-labeling followed by fix/mix local training.
///
/// With an empty fix dataset the round's local training is skipped and the
/// broadcast weights are left untouched.
pub fn client_update_fedanchor<R: Rng>(
    w_t: &ModelParameters,
    table: &AnchorEmbeddingTable,
    features: &Array2<f64>,
    labeling: &LabelingConfig,
    settings: &LocalTrainSettings,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let records = if labeling.ensemble_views == 0 {
        let out = nn::forward(w_t, features)?;
        label_embeddings(&out.anchor_embeddings, table, labeling.threshold)
    } else {
        let mut records = Vec::with_capacity(features.nrows());
        for i in 0..features.nrows() {
            let scores = ensemble_pseudo_label(
                features.row(i),
                w_t,
                table,
                labeling.ensemble_views,
                |x, r| weak_augment(x, settings.augmentation, r),
                rng,
            )?;
            records.push(PseudoLabelRecord::new(i, scores, labeling.threshold));
        }
        records
    };
    train_pseudo_labeled(w_t, features, records, settings, rng)
}

/// Baseline: pseudo-label by classifier prediction, qualify by softmax
/// confidence above the prediction threshold. No anchor table involved.
pub fn client_update_prediction_threshold<R: Rng>(
    w_t: &ModelParameters,
    features: &Array2<f64>,
    labeling: &LabelingConfig,
    settings: &LocalTrainSettings,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let out = nn::forward(w_t, features)?;
    let records = (0..features.nrows())
        .map(|i| {
            let probs = softmax(out.logits.row(i)).to_vec();
            PseudoLabelRecord::new(i, LabelScores::from_scores(probs), labeling.prediction_threshold)
        })
        .collect();
    train_pseudo_labeled(w_t, features, records, settings, rng)
}

/// Upper-bound baseline: plain cross-entropy SGD on the true labels, no
/// augmentation.
pub fn client_update_supervised<R: Rng>(
    w_t: &ModelParameters,
    features: &Array2<f64>,
    labels: &[usize],
    settings: &LocalTrainSettings,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let n = labels.len();
    if n == 0 {
        return Ok(ClientOutcome::skipped(Vec::new()));
    }
    let mut params = w_t.clone();
    let mut state = OptimizerState::zeros(&params);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..settings.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(settings.batch_size) {
            let batch = features.select(Axis(0), chunk);
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = nn::forward(&params, &batch)?;
            let (_, grad_logits) = cross_entropy_batch(&out.logits, &batch_labels)?;
            let grads = nn::backward(&params, &out, &OutputGradient::for_logits(grad_logits))?;
            sgd_step(&mut params, &grads, &mut state, settings.optimizer);
            steps += 1;
        }
    }
    Ok(ClientOutcome {
        params: Some(params),
        records: Vec::new(),
        qualified_count: n,
        trained_sample_count: n,
        steps_taken: steps,
    })
}

/// Shared fix/mix training loop over pseudo-label records.
fn train_pseudo_labeled<R: Rng>(
    w_t: &ModelParameters,
    features: &Array2<f64>,
    records: Vec<PseudoLabelRecord>,
    settings: &LocalTrainSettings,
    rng: &mut R,
) -> Result<ClientOutcome> {
    if records.is_empty() {
        return Ok(ClientOutcome::skipped(records));
    }
    let datasets = FixMixDatasets::build(&records, rng);
    if datasets.is_empty() {
        return Ok(ClientOutcome::skipped(records));
    }
    let qualified_count = datasets.fix_len();
    let (params, steps) = run_fix_mix_epochs(w_t, features, &datasets, settings, rng)?;
    Ok(ClientOutcome {
        params: Some(params),
        records,
        qualified_count,
        trained_sample_count: qualified_count,
        steps_taken: steps,
    })
}

/// `local_epochs` passes over the mix-dataset batches, each step taking one
/// SGD step on `L_fix + b * L_mix` (or `L_fix` alone with mixup disabled).
fn run_fix_mix_epochs<R: Rng>(
    w_t: &ModelParameters,
    features: &Array2<f64>,
    datasets: &FixMixDatasets,
    settings: &LocalTrainSettings,
    rng: &mut R,
) -> Result<(ModelParameters, usize)> {
    let mut params = w_t.clone();
    let mut state = OptimizerState::zeros(&params);
    let mut steps = 0;
    let len = datasets.fix_len();
    let dim = features.ncols();
    let mut fix_order: Vec<usize> = (0..len).collect();
    let mut mix_order: Vec<usize> = (0..len).collect();
    for _ in 0..settings.local_epochs {
        fix_order.shuffle(rng);
        mix_order.shuffle(rng);
        let mut offset = 0;
        while offset < len {
            let end = (offset + settings.batch_size).min(len);
            let fix_rows: Vec<usize> = fix_order[offset..end]
                .iter()
                .map(|&k| datasets.fix_indices[k])
                .collect();
            let fix_labels: Vec<usize> = fix_order[offset..end]
                .iter()
                .map(|&k| datasets.fix_labels[k])
                .collect();
            let fix_feats = features.select(Axis(0), &fix_rows);
            let fix = fix_loss(&params, &fix_feats, &fix_labels, |x| {
                strong_augment(x, settings.augmentation, &mut *rng)
            })?
            .expect("fix batch nonempty");

            let total = if settings.client_mixup_enabled {
                let mix_rows: Vec<usize> = mix_order[offset..end]
                    .iter()
                    .map(|&k| datasets.mix_indices[k])
                    .collect();
                let mix_labels: Vec<usize> = mix_order[offset..end]
                    .iter()
                    .map(|&k| datasets.mix_labels[k])
                    .collect();
                let mut mixed = Array2::zeros((fix_rows.len(), dim));
                let mut lambdas = Vec::with_capacity(fix_rows.len());
                for (k, (&fi, &mi)) in fix_rows.iter().zip(&mix_rows).enumerate() {
                    let (row, lambda) =
                        mixup_pair(features.row(fi), features.row(mi), settings.mixup, rng);
                    mixed.row_mut(k).assign(&row);
                    lambdas.push(lambda);
                }
                let mix = mix_loss(&params, &mixed, &lambdas, &fix_labels, &mix_labels, |x| {
                    weak_augment(x, settings.augmentation, &mut *rng)
                })?;
                combined_loss(&fix, &mix, settings.mixup)
            } else {
                fix
            };
            sgd_step(&mut params, &total.grads, &mut state, settings.optimizer);
            steps += 1;
            offset = end;
        }
    }
    Ok((params, steps))
}
