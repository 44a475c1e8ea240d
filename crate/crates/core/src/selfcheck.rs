//! Built-in verification suites: brute-force oracles for the contrastive
//! loss and pseudo-labeling, finite-difference gradient checks, partition
//! invariants, and aggregation algebra.
//!
//! The oracles here are deliberately independent of the main implementation:
//! plain scalar loops, no shared helpers beyond the data containers.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchor::{self, AnchorEmbeddingTable, LabelScores};
use crate::data::{lda_partition, strong_augment, weak_augment, AugmentationConfig, Dataset, PartitionConfig};
use crate::error::Result;
use crate::federation::{fedavg_aggregate, ClientDiagnostics, ClientUpdate};
use crate::gradcheck;
use crate::losses::{
    combined_loss, cross_entropy_batch, fix_loss, label_contrastive_loss, mix_loss,
    ContrastiveConfig, ContrastiveOutcome, MixupConfig,
};
use crate::nn::{self, init_params, ModelParameters, NetworkSpec, OutputGradient};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{:<22} cases={:<6} max_error={:<12.3e} {} {}",
            self.name,
            self.cases,
            self.max_error,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

/// Runs every suite with its release-gate case counts.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        contrastive_oracle_suite(500),
        pseudo_label_oracle_suite(1000),
        gradient_suite(100),
        partition_suite(),
        aggregation_suite(),
    ]
}

pub fn all_passed(reports: &[SuiteReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

// ---------------------------------------------------------------- oracles

fn scalar_cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for k in 0..u.len() {
        dot += u[k] * v[k];
        nu += u[k] * u[k];
        nv += v[k] * v[k];
    }
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    dot / (nu.sqrt() * nv.sqrt())
}

/// Brute-force label contrastive loss by ordered-pair enumeration.
/// `None` when the batch has no within-class pair or no cross-class pair.
pub fn oracle_contrastive_loss(
    embeddings: &Array2<f64>,
    labels: &[usize],
    tau: f64,
) -> Option<f64> {
    let n = labels.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| embeddings.row(i).to_vec()).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut cross_sum = 0.0;
    let mut cross_pairs = 0usize;
    let mut within_sum = vec![0.0f64; num_classes];
    let mut within_pairs = vec![0usize; num_classes];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let e = (scalar_cosine(&rows[i], &rows[j]) / tau).exp();
            if labels[i] == labels[j] {
                within_sum[labels[i]] += e;
                within_pairs[labels[i]] += 1;
            } else {
                cross_sum += e;
                cross_pairs += 1;
            }
        }
    }
    if cross_pairs == 0 {
        return None;
    }
    let mut total = 0.0;
    let mut contributing = 0usize;
    for c in 0..num_classes {
        if within_pairs[c] > 0 {
            total += -(within_sum[c] / cross_sum).ln();
            contributing += 1;
        }
    }
    if contributing == 0 {
        return None;
    }
    Some(total / contributing as f64)
}

/// Brute-force per-class average similarity and argmax label.
pub fn oracle_class_scores(
    z: &[f64],
    table: &AnchorEmbeddingTable,
) -> (Vec<f64>, usize) {
    let c = table.num_classes();
    let mut sums = vec![0.0f64; c];
    let mut counts = vec![0usize; c];
    for (i, &label) in table.labels().iter().enumerate() {
        let anchor: Vec<f64> = table.embeddings().row(i).to_vec();
        sums[label] += scalar_cosine(z, &anchor);
        counts[label] += 1;
    }
    let scores: Vec<f64> = (0..c).map(|k| sums[k] / counts[k] as f64).collect();
    let mut best = 0usize;
    for k in 1..c {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    (scores, best)
}

// ----------------------------------------------------------------- suites

/// Implementation vs brute-force oracle on random batches plus the
/// hand-derived two-class case.
pub fn contrastive_oracle_suite(cases: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c0a);
    let taus = [0.1, 1.0, 5.0];
    let mut max_error: f64 = 0.0;
    let mut checked = 0usize;
    let mut failure = None;

    // Hand-derived case: two classes of two identical embeddings.
    let emb = ndarray::array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
    let expected = (4.0f64).ln() - 1.0; // -ln(2e/8)
    match label_contrastive_loss(&emb, &[0, 0, 1, 1], &ContrastiveConfig { temperature: 1.0 }) {
        ContrastiveOutcome::Computed { loss, .. } => {
            max_error = max_error.max((loss - expected).abs());
            checked += 1;
        }
        ContrastiveOutcome::Skipped(_) => failure = Some("hand case skipped".to_string()),
    }

    while checked < cases && failure.is_none() {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=4);
        let num_classes = rng.random_range(2..=4);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
        let emb = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let tau = taus[rng.random_range(0..taus.len())];
        let outcome = label_contrastive_loss(&emb, &labels, &ContrastiveConfig { temperature: tau });
        let expected = oracle_contrastive_loss(&emb, &labels, tau);
        match (outcome, expected) {
            (ContrastiveOutcome::Computed { loss, .. }, Some(oracle)) => {
                let err = (loss - oracle).abs();
                max_error = max_error.max(err);
                if err > 1e-10 {
                    failure = Some(format!("loss {loss} vs oracle {oracle}"));
                }
            }
            (ContrastiveOutcome::Skipped(_), None) => {}
            (got, want) => {
                failure = Some(format!(
                    "skip disagreement: impl computed={} oracle computed={}",
                    matches!(got, ContrastiveOutcome::Computed { .. }),
                    want.is_some()
                ));
            }
        }
        checked += 1;
    }
    SuiteReport {
        name: "contrastive-oracle".into(),
        cases: checked,
        max_error,
        passed: failure.is_none() && max_error < 1e-10,
        detail: failure.unwrap_or_default(),
    }
}

/// Pseudo-labeling vs brute-force Eq. 3/4 evaluation, using the library's
/// own labeler.
pub fn pseudo_label_oracle_suite(cases: usize) -> SuiteReport {
    pseudo_label_suite_with(cases, |z, table| anchor::pseudo_label(z, table))
}

/// Same suite against an arbitrary labeler; lets tests prove the suite
/// catches a corrupted implementation.
pub fn pseudo_label_suite_with(
    cases: usize,
    labeler: impl Fn(ArrayView1<f64>, &AnchorEmbeddingTable) -> LabelScores,
) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1abe1);
    let mut max_error: f64 = 0.0;
    let mut failure = None;
    for _ in 0..cases {
        let num_classes = rng.random_range(2..=4);
        let s = rng.random_range(num_classes..=10);
        let d = rng.random_range(1..=6);
        let mut labels: Vec<usize> = (0..num_classes).collect();
        for _ in num_classes..s {
            labels.push(rng.random_range(0..num_classes));
        }
        let emb = Array2::from_shape_fn((s, d), |_| rng.random_range(-2.0..2.0));
        let table = AnchorEmbeddingTable::new(emb, labels, num_classes).expect("all classes present");
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = labeler(ndarray::aview1(&query), &table);
        let (scores, label) = oracle_class_scores(&query, &table);
        if got.label != label {
            failure = Some(format!("label {} vs oracle {}", got.label, label));
            break;
        }
        for (a, b) in got.per_class.iter().zip(&scores) {
            let err = (a - b).abs();
            max_error = max_error.max(err);
            if err > 1e-12 {
                failure = Some(format!("score {a} vs oracle {b}"));
            }
        }
        if failure.is_some() {
            break;
        }
    }
    SuiteReport {
        name: "pseudo-label-oracle".into(),
        cases,
        max_error,
        passed: failure.is_none() && max_error < 1e-12,
        detail: failure.unwrap_or_default(),
    }
}

fn random_tiny_spec<R: Rng>(rng: &mut R) -> NetworkSpec {
    let layers = rng.random_range(1..=3);
    NetworkSpec {
        input_dim: rng.random_range(1..=8),
        hidden_dims: (0..layers).map(|_| rng.random_range(1..=8)).collect(),
        num_classes: rng.random_range(2..=5),
        anchor_dim: rng.random_range(1..=8),
    }
}

/// Labels guaranteed to yield a defined contrastive loss: two members of
/// class 0, one of class 1, rest random.
fn contrastive_safe_labels<R: Rng>(n: usize, num_classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = vec![0, 0, 1];
    for _ in 3..n {
        labels.push(rng.random_range(0..num_classes));
    }
    labels.truncate(n);
    labels
}

/// Smallest |pre-activation| across all rectifier units for this batch.
/// Central differences are invalid when a unit sits on its kink, so the
/// gradient suite resamples instances that come closer than a safe margin.
fn min_abs_preactivation(params: &ModelParameters, batch: &Array2<f64>) -> f64 {
    let mut h = batch.clone();
    let mut min_abs = f64::INFINITY;
    for layer in &params.backbone {
        let z = h.dot(&layer.weight.t()) + &layer.bias;
        min_abs = z.iter().fold(min_abs, |m, &v| m.min(v.abs()));
        h = z.mapv(|v| v.max(0.0));
    }
    min_abs
}

/// Smallest anchor-embedding norm for this batch. Cosine similarity is
/// singular at the origin, so instances with near-zero embeddings are
/// likewise resampled.
fn min_anchor_norm(params: &ModelParameters, batch: &Array2<f64>) -> f64 {
    match nn::forward(params, batch) {
        Ok(out) => out
            .anchor_embeddings
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(f64::INFINITY, f64::min),
        Err(_) => 0.0,
    }
}

const KINK_MARGIN: f64 = 1e-3;
const NORM_MARGIN: f64 = 1e-2;

/// Analytic vs central finite-difference gradients of every loss through the
/// double-head network, on random tiny instances.
pub fn gradient_suite(num_nets: usize) -> SuiteReport {
    let result = gradient_suite_impl(num_nets);
    match result {
        Ok(report) => report,
        Err(e) => SuiteReport {
            name: "gradient-fd".into(),
            cases: 0,
            max_error: f64::INFINITY,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn gradient_suite_impl(num_nets: usize) -> Result<SuiteReport> {
    let tolerance = 1e-4;
    let eps = gradcheck::DEFAULT_EPS;
    let mut worst: f64 = 0.0;
    let mut worst_case = String::new();
    let mut cases = 0usize;
    let mut note = |worst: &mut f64, worst_case: &mut String, label: &str, idx: usize, err: f64| {
        if err > *worst {
            *worst = err;
            *worst_case = format!("worst at {label}, net {idx}");
        }
    };
    for net_idx in 0..num_nets {
        // Resample until every rectifier unit clears the kink margin on all
        // three input matrices the checks use.
        let mut attempt = 0u64;
        let (params, batch, fixed_aug, mixed, mut rng) = loop {
            let mut rng =
                ChaCha8Rng::seed_from_u64(0x67ad + net_idx as u64 + (attempt << 32));
            let spec = random_tiny_spec(&mut rng);
            let params = init_params(&spec, rng.random_range(0..u64::MAX))?;
            let n = rng.random_range(3..=8);
            let batch =
                Array2::from_shape_fn((n, spec.input_dim), |_| rng.random_range(-1.5..1.5));
            let aug = AugmentationConfig::default();
            let mut fixed_aug = batch.clone();
            for mut row in fixed_aug.rows_mut() {
                let a = strong_augment(row.view(), &aug, &mut rng);
                row.assign(&a);
            }
            let mut mixed = batch.clone();
            for mut row in mixed.rows_mut() {
                let a = weak_augment(row.view(), &aug, &mut rng);
                row.assign(&a);
            }
            let clear = [&batch, &fixed_aug, &mixed]
                .iter()
                .all(|m| min_abs_preactivation(&params, m) > KINK_MARGIN)
                && min_anchor_norm(&params, &batch) > NORM_MARGIN;
            if clear {
                break (params, batch, fixed_aug, mixed, rng);
            }
            attempt += 1;
        };
        let spec = params.spec();
        let n = batch.nrows();
        let ce_labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let con_labels = contrastive_safe_labels(n, spec.num_classes.min(3), &mut rng);
        let tau = ContrastiveConfig { temperature: 1.0 };
        let mixup = MixupConfig {
            beta_param: 0.75,
            combine_coeff: rng.random_range(0.2..2.0),
        };

        // Cross-entropy through the classification head.
        let out = nn::forward(&params, &batch)?;
        let (_, grad_logits) = cross_entropy_batch(&out.logits, &ce_labels)?;
        let analytic = nn::backward(&params, &out, &OutputGradient::for_logits(grad_logits))?;
        let err = gradcheck::max_relative_error(&params, &analytic, eps, |p| {
            let out = nn::forward(p, &batch).expect("shapes fixed");
            cross_entropy_batch(&out.logits, &ce_labels).expect("labels valid").0
        });
        note(&mut worst, &mut worst_case, "cross-entropy", net_idx, err);
        cases += 1;

        // Contrastive loss through the anchor head.
        let outcome = label_contrastive_loss(&out.anchor_embeddings, &con_labels, &tau);
        if let ContrastiveOutcome::Computed { grad, .. } = outcome {
            let analytic = nn::backward(&params, &out, &OutputGradient::for_anchor(grad))?;
            let err = gradcheck::max_relative_error(&params, &analytic, eps, |p| {
                let out = nn::forward(p, &batch).expect("shapes fixed");
                match label_contrastive_loss(&out.anchor_embeddings, &con_labels, &tau) {
                    ContrastiveOutcome::Computed { loss, .. } => loss,
                    ContrastiveOutcome::Skipped(_) => 0.0,
                }
            });
            note(&mut worst, &mut worst_case, "contrastive", net_idx, err);
            cases += 1;
        }

        // Fix loss on a pre-augmented batch (augmentation is a data
        // transform, fixed before differentiation).
        let fix = fix_loss(&params, &fixed_aug, &ce_labels, |x| x.to_owned())?
            .expect("nonempty batch");
        let err = gradcheck::max_relative_error(&params, &fix.grads, eps, |p| {
            fix_loss(p, &fixed_aug, &ce_labels, |x| x.to_owned())
                .expect("shapes fixed")
                .expect("nonempty batch")
                .loss
        });
        note(&mut worst, &mut worst_case, "fix", net_idx, err);
        cases += 1;

        // Mix loss on pre-mixed, pre-augmented samples.
        let lambdas: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels_mix: Vec<usize> =
            (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let mix = mix_loss(&params, &mixed, &lambdas, &ce_labels, &labels_mix, |x| {
            x.to_owned()
        })?;
        let err = gradcheck::max_relative_error(&params, &mix.grads, eps, |p| {
            mix_loss(p, &mixed, &lambdas, &ce_labels, &labels_mix, |x| x.to_owned())
                .expect("shapes fixed")
                .loss
        });
        note(&mut worst, &mut worst_case, "mix", net_idx, err);
        cases += 1;

        // Combined loss.
        let combined = combined_loss(&fix, &mix, &mixup);
        let err = gradcheck::max_relative_error(&params, &combined.grads, eps, |p| {
            let f = fix_loss(p, &fixed_aug, &ce_labels, |x| x.to_owned())
                .expect("shapes fixed")
                .expect("nonempty batch");
            let m = mix_loss(p, &mixed, &lambdas, &ce_labels, &labels_mix, |x| x.to_owned())
                .expect("shapes fixed");
            f.loss + mixup.combine_coeff * m.loss
        });
        note(&mut worst, &mut worst_case, "combined", net_idx, err);
        cases += 1;
    }
    Ok(SuiteReport {
        name: "gradient-fd".into(),
        cases,
        max_error: worst,
        passed: worst < tolerance,
        detail: worst_case,
    })
}

fn balanced_pool(total: usize, num_classes: usize) -> Dataset {
    Dataset {
        features: Array2::zeros((total, 1)),
        labels: (0..total).map(|i| i % num_classes).collect(),
        num_classes,
    }
}

/// Exact-partition invariants plus the concentration behavior of the
/// Dirichlet split at large and small alpha.
pub fn partition_suite() -> SuiteReport {
    let mut max_error: f64 = 0.0;
    let mut failure = None;
    let mut cases = 0usize;
    let pool = balanced_pool(10_000, 4);
    let num_clients = 20;

    for seed in 0..3u64 {
        // Exactness: every pool index appears exactly once.
        let cfg = PartitionConfig {
            num_clients,
            dirichlet_alpha: 0.5,
        };
        let shards = lda_partition(&pool, &cfg, 900 + seed);
        let mut seen = vec![false; pool.len()];
        for shard in &shards {
            for &i in shard.source_indices() {
                if seen[i] {
                    failure = Some(format!("index {i} assigned twice"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            failure = Some("pool index never assigned".into());
        }
        cases += 1;

        // alpha = 1000: every client x class count within 20% of uniform.
        let cfg = PartitionConfig {
            num_clients,
            dirichlet_alpha: 1000.0,
        };
        let shards = lda_partition(&pool, &cfg, 1000 + seed);
        let expected = pool.len() as f64 / (num_clients * pool.num_classes) as f64;
        for shard in &shards {
            let mut counts = vec![0usize; pool.num_classes];
            for &label in shard.diagnostic_labels() {
                counts[label] += 1;
            }
            for &count in &counts {
                let rel = (count as f64 - expected).abs() / expected;
                max_error = max_error.max(rel);
                if rel > 0.2 {
                    failure = Some(format!(
                        "alpha=1000 count {count} deviates {:.1}% from {expected}",
                        rel * 100.0
                    ));
                }
            }
        }
        cases += 1;

        // alpha = 0.1: clients dominated by their largest class.
        let cfg = PartitionConfig {
            num_clients,
            dirichlet_alpha: 0.1,
        };
        let shards = lda_partition(&pool, &cfg, 1100 + seed);
        let shares: Vec<f64> = shards
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let mut counts = vec![0usize; pool.num_classes];
                for &label in s.diagnostic_labels() {
                    counts[label] += 1;
                }
                *counts.iter().max().expect("nonempty") as f64 / s.len() as f64
            })
            .collect();
        let mean_share = shares.iter().sum::<f64>() / shares.len() as f64;
        if mean_share <= 0.5 {
            failure = Some(format!("alpha=0.1 mean largest-class share {mean_share:.3} <= 0.5"));
        }
        cases += 1;
    }

    SuiteReport {
        name: "partition".into(),
        cases,
        max_error,
        passed: failure.is_none(),
        detail: failure.unwrap_or_default(),
    }
}

fn update_with(params: ModelParameters, weight: f64, id: usize) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        params: Some(params),
        weight_basis: weight,
        trained_sample_count: weight as usize,
        diagnostics: ClientDiagnostics {
            shard_size: weight as usize,
            anchor_head: None,
            classification_head: None,
            qualified_count: 0,
            steps_taken: 0,
        },
        skipped: false,
    }
}

/// FedAvg algebra: convexity fixed point, a hand-computed weighted mean,
/// permutation invariance, and skipped-update exclusion.
pub fn aggregation_suite() -> SuiteReport {
    let mut max_error: f64 = 0.0;
    let mut failure = None;
    let mut cases = 0usize;
    let spec = NetworkSpec {
        input_dim: 3,
        hidden_dims: vec![4],
        num_classes: 2,
        anchor_dim: 2,
    };

    for seed in 0..5u64 {
        let params = init_params(&spec, seed).expect("valid spec");

        // Identity: k weighted copies of the same parameters.
        let updates: Vec<ClientUpdate> = (0..4)
            .map(|i| update_with(params.clone(), (i + 1) as f64, i))
            .collect();
        let agg = fedavg_aggregate(&updates, &params);
        let rel = agg
            .to_flat()
            .iter()
            .zip(params.to_flat())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-9))
            .fold(0.0f64, f64::max);
        max_error = max_error.max(rel);
        if rel > 1e-12 {
            failure = Some(format!("identity violated, rel error {rel:e}"));
        }
        cases += 1;

        // Hand value: all-1 and all-3 parameter sets, weights 1 and 3 -> 2.5.
        let ones = params.map(|_| 1.0);
        let threes = params.map(|_| 3.0);
        let updates = vec![update_with(ones, 1.0, 0), update_with(threes, 3.0, 1)];
        let agg = fedavg_aggregate(&updates, &params);
        let err = agg
            .to_flat()
            .iter()
            .map(|v| (v - 2.5).abs())
            .fold(0.0f64, f64::max);
        max_error = max_error.max(err);
        if err > 1e-12 {
            failure = Some(format!("hand case error {err:e}"));
        }
        cases += 1;

        // Permutation invariance and skipped exclusion.
        let a = init_params(&spec, 100 + seed).expect("valid spec");
        let b = init_params(&spec, 200 + seed).expect("valid spec");
        let mut skipped = update_with(params.map(|_| 1e9), 7.0, 2);
        skipped.skipped = true;
        skipped.params = None;
        let forward = vec![
            update_with(a.clone(), 2.0, 0),
            update_with(b.clone(), 5.0, 1),
            skipped.clone(),
        ];
        let reversed = vec![skipped, update_with(b, 5.0, 1), update_with(a, 2.0, 0)];
        let g1 = fedavg_aggregate(&forward, &params);
        let g2 = fedavg_aggregate(&reversed, &params);
        let err = g1.max_abs_diff(&g2);
        max_error = max_error.max(err);
        if err > 1e-12 {
            failure = Some(format!("permutation sensitivity {err:e}"));
        }
        cases += 1;
    }

    SuiteReport {
        name: "aggregation".into(),
        cases,
        max_error,
        passed: failure.is_none(),
        detail: failure.unwrap_or_default(),
    }
}
