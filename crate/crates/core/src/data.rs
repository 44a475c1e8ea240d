//! Dataset synthesis and loading, anchor/pool splitting, Dirichlet non-IID
//! partitioning across clients, and the weak/strong augmentations.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// A labeled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `indices` as a new dataset, order preserved.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Parameters of the synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobsParams {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of the isotropic per-class Gaussian.
    pub spread: f64,
    /// Distance of each class center from the origin.
    pub center_scale: f64,
}

/// Deterministic, pairwise-distinct center for class `c`.
///
/// Classes up to the feature dimension sit on scaled coordinate axes; higher
/// class indices fall back to a seeded unit direction so centers stay
/// distinct for any `(classes, dim)`.
pub fn blob_center(class: usize, dim: usize, scale: f64) -> Array1<f64> {
    let mut center = Array1::zeros(dim);
    if class < dim {
        center[class] = scale;
        return center;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x626c_6f62 ^ class as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        for v in center.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        let norm = center.dot(&center).sqrt();
        if norm > 1e-9 {
            center *= scale / norm;
            return center;
        }
    }
}

/// Samples `per_class` points per class from isotropic Gaussians around the
/// class centers. Deterministic in the seed.
pub fn generate_blobs(params: &BlobsParams, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = params.classes * params.per_class;
    let mut features = Array2::zeros((n, params.dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..params.classes {
        let center = blob_center(class, params.dim, params.center_scale);
        for _ in 0..params.per_class {
            for (d, v) in features.row_mut(row).iter_mut().enumerate() {
                *v = center[d] + params.spread * normal.sample(&mut rng);
            }
            labels.push(class);
            row += 1;
        }
    }
    Dataset {
        features,
        labels,
        num_classes: params.classes,
    }
}

/// Splits off a class-stratified anchor set of size `anchor_size`; the rest
/// becomes the client pool. Per-class anchor counts differ by at most one.
pub fn split_anchor(dataset: &Dataset, anchor_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let c = dataset.num_classes;
    if anchor_size < c {
        return Err(Error::InvalidConfig {
            field: "anchor_size".into(),
            value: anchor_size.to_string(),
            constraint: format!(">= num_classes ({c}); every class needs an anchor"),
        });
    }
    if anchor_size > dataset.len() {
        return Err(Error::InvalidConfig {
            field: "anchor_size".into(),
            value: anchor_size.to_string(),
            constraint: format!("<= dataset size ({})", dataset.len()),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = anchor_size / c;
    let extra = anchor_size % c;
    let mut anchor_idx = Vec::with_capacity(anchor_size);
    let mut pool_idx = Vec::new();
    for (class, indices) in by_class.iter_mut().enumerate() {
        let take = base + usize::from(class < extra);
        if take > indices.len() {
            return Err(Error::InvalidConfig {
                field: "anchor_size".into(),
                value: anchor_size.to_string(),
                constraint: format!(
                    "class {class} has only {} samples, needs {take} anchors",
                    indices.len()
                ),
            });
        }
        indices.shuffle(&mut rng);
        anchor_idx.extend_from_slice(&indices[..take]);
        pool_idx.extend_from_slice(&indices[take..]);
    }
    anchor_idx.sort_unstable();
    pool_idx.sort_unstable();
    Ok((dataset.select(&anchor_idx), dataset.select(&pool_idx)))
}

/// Client count and Dirichlet concentration of the non-IID partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            num_clients: 20,
            dirichlet_alpha: 1000.0,
        }
    }
}

/// One client's unlabeled shard. Training code receives only `features()`;
/// the ground-truth labels stay behind the diagnostics accessor.
#[derive(Debug, Clone)]
pub struct ClientShard {
    client_id: usize,
    features: Array2<f64>,
    hidden_labels: Vec<usize>,
    source_indices: Vec<usize>,
}

impl ClientShard {
    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn len(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_labels.is_empty()
    }

    /// Label-free view handed to semi-supervised training paths.
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    /// Ground-truth labels, for diagnostics and the supervised upper bound
    /// only. Semi-supervised training paths must not read these.
    pub fn diagnostic_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// Indices into the pool this shard was cut from, for the manifest.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    #[cfg(test)]
    pub(crate) fn with_labels(mut self, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), self.hidden_labels.len());
        self.hidden_labels = labels;
        self
    }
}

fn dirichlet<R: Rng>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    // Standard Gamma(alpha, 1) construction; rand_distr's Dirichlet wants a
    // compile-time dimension.
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated > 0");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // Possible only for tiny alpha where every draw underflows; fall back
        // to a single uniformly chosen owner.
        let winner = rng.random_range(0..n);
        return (0..n).map(|i| f64::from(u8::from(i == winner))).collect();
    }
    draws.iter_mut().for_each(|v| *v /= sum);
    draws
}

/// Splits `count` items into integer shares proportional to `p` (largest
/// remainder rounding; ties to the lower index).
fn proportional_counts(p: &[f64], count: usize) -> Vec<usize> {
    let mut shares: Vec<usize> = p.iter().map(|&pi| (pi * count as f64).floor() as usize).collect();
    let assigned: usize = shares.iter().sum();
    let mut remainders: Vec<(usize, f64)> = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| (i, pi * count as f64 - shares[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(count - assigned) {
        shares[i] += 1;
    }
    shares
}

/// Partitions the pool across clients: for each class, proportions drawn from
/// `Dirichlet(alpha * 1_N)` decide how that class's samples are dealt out.
/// Exact partition: every sample assigned exactly once. Deterministic in seed.
pub fn lda_partition(pool: &Dataset, cfg: &PartitionConfig, seed: u64) -> Vec<ClientShard> {
    let n_clients = cfg.num_clients;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.num_classes];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for mut indices in by_class {
        if indices.is_empty() {
            continue;
        }
        indices.shuffle(&mut rng);
        let p = dirichlet(cfg.dirichlet_alpha, n_clients, &mut rng);
        let counts = proportional_counts(&p, indices.len());
        let mut cursor = 0;
        for (client, &take) in counts.iter().enumerate() {
            per_client[client].extend_from_slice(&indices[cursor..cursor + take]);
            cursor += take;
        }
        debug_assert_eq!(cursor, indices.len());
    }
    per_client
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            ClientShard {
                client_id,
                features: pool.features.select(Axis(0), &indices),
                hidden_labels: indices.iter().map(|&i| pool.labels[i]).collect(),
                source_indices: indices,
            }
        })
        .collect()
}

/// Gaussian jitter strengths and masking fraction of the augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub weak_jitter_sigma: f64,
    pub strong_jitter_sigma: f64,
    /// Fraction of coordinates zeroed by the strong augmentation;
    /// `floor(fraction * dim)` coordinates are masked.
    pub strong_mask_fraction: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            weak_jitter_sigma: 0.05,
            strong_jitter_sigma: 0.2,
            strong_mask_fraction: 0.25,
        }
    }
}

/// Weak augmentation: additive Gaussian noise.
pub fn weak_augment<R: Rng>(x: ArrayView1<f64>, cfg: &AugmentationConfig, rng: &mut R) -> Array1<f64> {
    jitter(x, cfg.weak_jitter_sigma, rng)
}

/// Strong augmentation: heavier jitter plus zeroing a random subset of
/// coordinates.
pub fn strong_augment<R: Rng>(
    x: ArrayView1<f64>,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Array1<f64> {
    let mut out = jitter(x, cfg.strong_jitter_sigma, rng);
    let masked = (cfg.strong_mask_fraction * x.len() as f64).floor() as usize;
    if masked > 0 {
        for idx in rand::seq::index::sample(rng, x.len(), masked) {
            out[idx] = 0.0;
        }
    }
    out
}

fn jitter<R: Rng>(x: ArrayView1<f64>, sigma: f64, rng: &mut R) -> Array1<f64> {
    if sigma == 0.0 {
        return x.to_owned();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated >= 0");
    x.mapv(|v| v + normal.sample(rng))
}

/// Reads a dataset from CSV rows of the form `f1,...,fd,label`.
///
/// When `expected_classes` is given, labels must lie in `0..expected_classes`;
/// otherwise the class count is inferred as `max label + 1`.
pub fn load_csv_dataset(path: &Path, expected_classes: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::CsvRow {
                row,
                message: "expected at least one feature and a label".into(),
            });
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(Error::CsvRow {
                    row,
                    message: format!("expected {expect} features, found {d}"),
                })
            }
            _ => {}
        }
        let mut feat = Vec::with_capacity(d);
        for (col, field) in fields[..d].iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::CsvRow {
                row,
                message: format!("column {} is not a number: {field:?}", col + 1),
            })?;
            feat.push(v);
        }
        let label: i64 = fields[d].trim().parse().map_err(|_| Error::CsvRow {
            row,
            message: format!("label is not an integer: {:?}", fields[d]),
        })?;
        if label < 0 {
            return Err(Error::CsvRow {
                row,
                message: format!("label {label} is negative"),
            });
        }
        if let Some(c) = expected_classes {
            if label as usize >= c {
                return Err(Error::CsvRow {
                    row,
                    message: format!("label {label} outside valid range 0..{c}"),
                });
            }
        }
        features.push(feat);
        labels.push(label as usize);
    }
    if features.is_empty() {
        return Err(Error::CsvRow {
            row: 0,
            message: "file contains no data rows".into(),
        });
    }
    let dim = dim.expect("nonempty");
    let num_classes =
        expected_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    let mut matrix = Array2::zeros((features.len(), dim));
    for (i, feat) in features.iter().enumerate() {
        for (j, &v) in feat.iter().enumerate() {
            matrix[[i, j]] = v;
        }
    }
    Ok(Dataset {
        features: matrix,
        labels,
        num_classes,
    })
}

/// Writes a dataset in the same CSV format `load_csv_dataset` reads.
pub fn write_csv_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for (i, &label) in dataset.labels.iter().enumerate() {
        for v in dataset.features.row(i) {
            write!(out, "{v},").expect("string write");
        }
        writeln!(out, "{label}").expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Derives the train/test/split/partition seeds an experiment uses, so that
/// generation is reproducible from one master seed.
pub fn derived_seeds(master: u64) -> DataSeeds {
    DataSeeds {
        train: rng::sub_seed(master, rng::DOMAIN_TRAIN_DATA),
        test: rng::sub_seed(master, rng::DOMAIN_TEST_DATA),
        split: rng::sub_seed(master, rng::DOMAIN_ANCHOR_SPLIT),
        partition: rng::sub_seed(master, rng::DOMAIN_PARTITION),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DataSeeds {
    pub train: u64,
    pub test: u64,
    pub split: u64,
    pub partition: u64,
}
