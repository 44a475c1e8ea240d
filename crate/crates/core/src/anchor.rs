//! Anchor-embedding table, similarity-based pseudo-labeling, and fix/mix
//! dataset construction.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cosine_similarity;
use crate::nn::{self, ModelParameters};

/// Anchor-head embeddings of the server's labeled anchor set, broadcast to
/// clients each round.
#[derive(Debug, Clone)]
pub struct AnchorEmbeddingTable {
    embeddings: Array2<f64>,
    labels: Vec<usize>,
    per_class: Vec<Vec<usize>>,
}

impl AnchorEmbeddingTable {
    /// Builds a table from raw embeddings and labels, indexing rows by class.
    ///
    /// Every class in `0..num_classes` must own at least one anchor.
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        assert_eq!(embeddings.nrows(), labels.len(), "anchor table: label count mismatch");
        assert!(embeddings.nrows() >= 1, "anchor table: empty anchor set");
        let mut per_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::InvalidLabel {
                    label: y as i64,
                    num_classes,
                    at: Some("anchor table".into()),
                });
            }
            per_class[y].push(i);
        }
        if let Some(c) = per_class.iter().position(Vec::is_empty) {
            return Err(Error::MissingAnchorClass { class: c });
        }
        Ok(AnchorEmbeddingTable {
            embeddings,
            labels,
            per_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn anchor_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row indices of the anchors holding label `c`.
    pub fn class_rows(&self, c: usize) -> &[usize] {
        &self.per_class[c]
    }
}

/// Pseudo-labeling thresholds and ensemble setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    /// Similarity threshold `t` for anchor-based qualification.
    pub threshold: f64,
    /// Softmax-confidence threshold for the prediction baseline.
    pub prediction_threshold: f64,
    /// Weakly-augmented views averaged per sample; 0 disables the ensemble.
    pub ensemble_views: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            threshold: 0.6,
            prediction_threshold: 0.95,
            ensemble_views: 0,
        }
    }
}

/// Per-class scores of one sample with the argmax decision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelScores {
    pub per_class: Vec<f64>,
    pub label: usize,
    pub max_score: f64,
}

impl LabelScores {
    /// Argmax with ties broken by smallest class id.
    pub fn from_scores(per_class: Vec<f64>) -> Self {
        assert!(!per_class.is_empty(), "scores must cover at least one class");
        let (label, max_score) = per_class
            .iter()
            .copied()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        LabelScores {
            per_class,
            label,
            max_score,
        }
    }
}

/// One sample's pseudo-labeling outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelRecord {
    pub sample_index: usize,
    pub pseudo_label: usize,
    pub max_score: f64,
    pub per_class_scores: Vec<f64>,
    /// Strictly above the threshold.
    pub qualifies: bool,
}

impl PseudoLabelRecord {
    pub fn new(sample_index: usize, scores: LabelScores, threshold: f64) -> Self {
        PseudoLabelRecord {
            sample_index,
            pseudo_label: scores.label,
            max_score: scores.max_score,
            qualifies: scores.max_score > threshold,
            per_class_scores: scores.per_class,
        }
    }
}

/// Computes the anchor table: anchor-head embeddings of the anchor features
/// under the current parameters, indexed by label.
pub fn compute_anchor_table(
    params: &ModelParameters,
    anchor_features: &Array2<f64>,
    anchor_labels: &[usize],
    num_classes: usize,
) -> Result<AnchorEmbeddingTable> {
    let out = nn::forward(params, anchor_features)?;
    AnchorEmbeddingTable::new(out.anchor_embeddings, anchor_labels.to_vec(), num_classes)
}

/// Mean cosine similarity between `z` and each class's anchor embeddings.
pub fn per_class_avg_similarity(z: ArrayView1<f64>, table: &AnchorEmbeddingTable) -> Vec<f64> {
    (0..table.num_classes())
        .map(|c| {
            let rows = table.class_rows(c);
            let sum: f64 = rows
                .iter()
                .map(|&i| cosine_similarity(z, table.embeddings.row(i)).value)
                .sum();
            sum / rows.len() as f64
        })
        .collect()
}

/// Pseudo-label for one embedding: argmax of the per-class average
/// similarities, ties broken by smallest class id.
pub fn pseudo_label(z: ArrayView1<f64>, table: &AnchorEmbeddingTable) -> LabelScores {
    LabelScores::from_scores(per_class_avg_similarity(z, table))
}

/// Labels a whole batch of embeddings against the table.
pub fn label_embeddings(
    embeddings: &Array2<f64>,
    table: &AnchorEmbeddingTable,
    threshold: f64,
) -> Vec<PseudoLabelRecord> {
    (0..embeddings.nrows())
        .map(|i| PseudoLabelRecord::new(i, pseudo_label(embeddings.row(i), table), threshold))
        .collect()
}

/// Ensemble pseudo-label: Eq.-3 scores averaged over `views` weakly augmented
/// copies of the raw sample, then the usual argmax.
pub fn ensemble_pseudo_label<R: Rng>(
    x: ArrayView1<f64>,
    params: &ModelParameters,
    table: &AnchorEmbeddingTable,
    views: usize,
    mut weak_aug: impl FnMut(ArrayView1<f64>, &mut R) -> Array1<f64>,
    rng: &mut R,
) -> Result<LabelScores> {
    assert!(views >= 1, "ensemble_pseudo_label requires at least one view");
    let mut acc = vec![0.0f64; table.num_classes()];
    for _ in 0..views {
        let view = weak_aug(x, rng);
        let batch = view.insert_axis(ndarray::Axis(0));
        let out = nn::forward(params, &batch)?;
        let scores = per_class_avg_similarity(out.anchor_embeddings.row(0), table);
        for (a, s) in acc.iter_mut().zip(scores) {
            *a += s;
        }
    }
    for a in acc.iter_mut() {
        *a /= views as f64;
    }
    Ok(LabelScores::from_scores(acc))
}

/// Indices and pseudo-labels of the samples strictly above the threshold,
/// original order preserved.
pub fn build_fix_dataset(records: &[PseudoLabelRecord]) -> (Vec<usize>, Vec<usize>) {
    records
        .iter()
        .filter(|r| r.qualifies)
        .map(|r| (r.sample_index, r.pseudo_label))
        .unzip()
}

/// `fix_size` draws with replacement from the full pseudo-labeled pool.
pub fn build_mix_dataset<R: Rng>(
    records: &[PseudoLabelRecord],
    fix_size: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    assert!(
        fix_size == 0 || !records.is_empty(),
        "mix dataset needs a nonempty pool"
    );
    (0..fix_size)
        .map(|_| {
            let r = &records[rng.random_range(0..records.len())];
            (r.sample_index, r.pseudo_label)
        })
        .unzip()
}

/// The per-round fix and mix datasets of one client, as indices into the
/// client's feature matrix plus the paired pseudo-labels.
#[derive(Debug, Clone)]
pub struct FixMixDatasets {
    pub fix_indices: Vec<usize>,
    pub fix_labels: Vec<usize>,
    pub mix_indices: Vec<usize>,
    pub mix_labels: Vec<usize>,
}

impl FixMixDatasets {
    pub fn build<R: Rng>(records: &[PseudoLabelRecord], rng: &mut R) -> Self {
        let (fix_indices, fix_labels) = build_fix_dataset(records);
        let (mix_indices, mix_labels) = build_mix_dataset(records, fix_indices.len(), rng);
        debug_assert_eq!(fix_indices.len(), mix_indices.len());
        FixMixDatasets {
            fix_indices,
            fix_labels,
            mix_indices,
            mix_labels,
        }
    }

    pub fn fix_len(&self) -> usize {
        self.fix_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fix_indices.is_empty()
    }
}

/// Pseudo-label accuracy against hidden true labels, overall and restricted
/// to qualifying records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub overall: f64,
    /// `None` when no record qualifies.
    pub qualified: Option<f64>,
}

pub fn pseudo_label_accuracy(records: &[PseudoLabelRecord], true_labels: &[usize]) -> AccuracyReport {
    assert_eq!(records.len(), true_labels.len(), "pseudo_label_accuracy: length mismatch");
    if records.is_empty() {
        return AccuracyReport {
            overall: 0.0,
            qualified: None,
        };
    }
    let correct = records
        .iter()
        .filter(|r| r.pseudo_label == true_labels[r.sample_index])
        .count();
    let qualified_total = records.iter().filter(|r| r.qualifies).count();
    let qualified = if qualified_total == 0 {
        None
    } else {
        let q_correct = records
            .iter()
            .filter(|r| r.qualifies && r.pseudo_label == true_labels[r.sample_index])
            .count();
        Some(q_correct as f64 / qualified_total as f64)
    };
    AccuracyReport {
        overall: correct as f64 / records.len() as f64,
        qualified,
    }
}
