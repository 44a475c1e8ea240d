//! Round orchestration: server pretraining, client selection, local training
//! dispatch, FedAvg aggregation, alternate server training, and
//! communication-overhead accounting.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{
    compute_anchor_table, label_embeddings, pseudo_label_accuracy, AccuracyReport,
    AnchorEmbeddingTable,
};
use crate::client::{
    client_update_fedanchor, client_update_prediction_threshold, client_update_supervised,
    ClientOutcome, LocalTrainSettings,
};
use crate::config::ExperimentConfig;
use crate::data::{weak_augment, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_batch, label_contrastive_loss, mix_loss, mixup_pair, ContrastiveOutcome,
};
use crate::nn::{self, sgd_step_heads, HeadSelection, ModelParameters, OptimizerState, OutputGradient};
use crate::rng;

/// Which training method the simulation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Anchor-similarity pseudo-labeling with contrastive server training.
    #[serde(rename = "fedanchor")]
    FedAnchor,
    /// FedAnchor with the server's supervised epoch replaced by mixup.
    #[serde(rename = "fedanchor_mix")]
    FedAnchorMix,
    /// Softmax-confidence pseudo-labeling at a high threshold.
    #[serde(rename = "prediction_threshold_baseline")]
    PredictionThresholdBaseline,
    /// Upper bound: clients train on their true labels.
    #[serde(rename = "supervised_baseline")]
    SupervisedBaseline,
}

impl Method {
    /// True for the methods that broadcast the anchor table to clients.
    pub fn broadcasts_anchor_table(self) -> bool {
        matches!(self, Method::FedAnchor | Method::FedAnchorMix)
    }

    /// True for the methods whose server phase trains the anchor head.
    pub fn trains_contrastive(self) -> bool {
        matches!(self, Method::FedAnchor | Method::FedAnchorMix)
    }
}

/// What each client update's aggregation weight is based on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationWeighting {
    /// The client's full shard size `n_m`.
    DatasetSize,
    /// The size of the fix dataset actually trained on.
    TrainedSize,
}

/// Federated-loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub participation_ratio: f64,
    pub local_epochs: usize,
    pub method: Method,
    pub aggregation_weighting: AggregationWeighting,
    pub client_mixup_enabled: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    /// Evaluate clients within a round on a thread pool. Results are
    /// identical to serial execution; client streams depend only on
    /// `(seed, round, client id)`.
    pub parallel_clients: bool,
    /// Write a checkpoint every this many rounds (0 = final round only).
    pub checkpoint_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 50,
            participation_ratio: 0.1,
            local_epochs: 5,
            method: Method::FedAnchor,
            aggregation_weighting: AggregationWeighting::DatasetSize,
            client_mixup_enabled: true,
            pretrain_epochs: 5,
            pretrain_lr: 0.05,
            batch_size: 32,
            parallel_clients: false,
            checkpoint_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        fn bad(field: &str, value: impl ToString, constraint: &str) -> Error {
            Error::InvalidConfig {
                field: format!("federation.{field}"),
                value: value.to_string(),
                constraint: constraint.into(),
            }
        }
        if self.rounds == 0 {
            return Err(bad("rounds", self.rounds, ">= 1"));
        }
        if self.local_epochs == 0 {
            return Err(bad("local_epochs", self.local_epochs, ">= 1"));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(bad(
                "participation_ratio",
                self.participation_ratio,
                "in (0, 1]",
            ));
        }
        if self.participation_ratio * (num_clients as f64) < 1.0 {
            return Err(bad(
                "participation_ratio",
                self.participation_ratio,
                "participation_ratio * num_clients >= 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", self.batch_size, ">= 1"));
        }
        Ok(())
    }
}

/// One client's contribution to a round.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `None` exactly when the update is skipped; skipped updates can never
    /// enter the aggregate.
    pub params: Option<ModelParameters>,
    pub weight_basis: f64,
    pub trained_sample_count: usize,
    pub diagnostics: ClientDiagnostics,
    pub skipped: bool,
}

/// Per-client diagnostics for the round metrics; computed from hidden labels
/// outside the training paths.
#[derive(Debug, Clone)]
pub struct ClientDiagnostics {
    pub shard_size: usize,
    pub anchor_head: Option<AccuracyReport>,
    pub classification_head: Option<f64>,
    pub qualified_count: usize,
    pub steps_taken: usize,
}

/// Per-round record written to `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub pseudo_label_accuracy_anchor_head: f64,
    /// Restricted to qualifying records; NaN when nothing qualifies.
    pub pseudo_label_accuracy_anchor_head_qualified: f64,
    pub pseudo_label_accuracy_classification_head: f64,
    pub avg_qualified_samples: f64,
    pub server_supervised_loss: f64,
    /// NaN for methods without a contrastive server epoch.
    pub server_contrastive_loss: f64,
    pub overhead_percent: f64,
    pub downstream_scalars: u64,
    pub upstream_scalars: u64,
    pub participants: Vec<usize>,
}

impl RoundMetrics {
    /// Divergence check; NaN markers in optional columns are legitimate.
    pub fn is_finite(&self) -> bool {
        self.test_accuracy.is_finite()
            && self.server_supervised_loss.is_finite()
            && self.overhead_percent.is_finite()
    }
}

/// Uniform sample without replacement of `round(r * N)` clients (at least
/// one), deterministic in `(seed, round)`. Returned ids are sorted.
pub fn select_clients(num_clients: usize, ratio: f64, round: usize, seed: u64) -> Vec<usize> {
    let k = ((ratio * num_clients as f64).round() as usize)
        .max(1)
        .min(num_clients);
    let mut rng = rng::stream(seed, rng::DOMAIN_SELECT, round as u64, 0);
    let mut ids = rand::seq::index::sample(&mut rng, num_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Weighted FedAvg over the non-skipped updates; weights are
/// `basis_m / sum(basis)`. Falls back to `w_t` when every update is skipped
/// or the weight mass is zero.
pub fn fedavg_aggregate(updates: &[ClientUpdate], w_t: &ModelParameters) -> ModelParameters {
    let active: Vec<&ClientUpdate> = updates
        .iter()
        .filter(|u| !u.skipped && u.params.is_some())
        .collect();
    let total: f64 = active.iter().map(|u| u.weight_basis).sum();
    if active.is_empty() || total <= 0.0 {
        return w_t.clone();
    }
    let mut acc = w_t.zeros_like();
    for u in active {
        acc.add_scaled(
            u.params.as_ref().expect("active update has parameters"),
            u.weight_basis / total,
        );
    }
    acc
}

/// Extra downstream payload of broadcasting the anchor table, as a percentage
/// of the transmitted model size.
pub fn communication_overhead(
    anchor_count: usize,
    anchor_dim: usize,
    model_param_count: usize,
) -> f64 {
    100.0 * (anchor_count * anchor_dim) as f64 / model_param_count as f64
}

/// Warm-starts the model: `pretrain_epochs` of shuffled mini-batch SGD on
/// cross-entropy over the anchor data at `pretrain_lr`.
pub fn pretrain_server(
    params: &mut ModelParameters,
    anchor: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let fed = &cfg.federation;
    let optimizer = cfg.server_optimizer.with_learning_rate(fed.pretrain_lr);
    let mut state = OptimizerState::zeros(params);
    let mut rng = rng::stream(cfg.seed, rng::DOMAIN_PRETRAIN, 0, 0);
    let mut order: Vec<usize> = (0..anchor.len()).collect();
    for _ in 0..fed.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(fed.batch_size) {
            let batch = anchor.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| anchor.labels[i]).collect();
            let out = nn::forward(params, &batch)?;
            let (_, grad) = cross_entropy_batch(&out.logits, &labels)?;
            let grads = nn::backward(params, &out, &OutputGradient::for_logits(grad))?;
            sgd_step_heads(params, &grads, &mut state, &optimizer, HeadSelection::CLASS_ONLY);
        }
    }
    Ok(())
}

/// Mean batch losses of the server phase; `contrastive` is NaN when the
/// method does not run a contrastive epoch.
#[derive(Debug, Clone, Copy)]
pub struct ServerTrainOutcome {
    pub supervised_loss: f64,
    pub contrastive_loss: f64,
}

/// Alternate server training on the anchor data: one epoch on the
/// classification head (plain cross-entropy, or the mix loss with true labels
/// on both sides for the mix variant), then for the anchor-based methods one
/// epoch on the anchor head with the label contrastive loss.
pub fn server_train(
    params: &mut ModelParameters,
    anchor: &Dataset,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<ServerTrainOutcome> {
    let fed = &cfg.federation;
    let mut rng = rng::stream(cfg.seed, rng::DOMAIN_SERVER, round as u64, 0);
    let mut order: Vec<usize> = (0..anchor.len()).collect();

    // Supervised epoch (classification head).
    let mut state = OptimizerState::zeros(params);
    let mut supervised_sum = 0.0;
    let mut supervised_batches = 0usize;
    order.shuffle(&mut rng);
    for chunk in order.chunks(fed.batch_size) {
        let batch = anchor.features.select(Axis(0), chunk);
        let labels: Vec<usize> = chunk.iter().map(|&i| anchor.labels[i]).collect();
        let loss = if fed.method == Method::FedAnchorMix {
            let mut partner: Vec<usize> = chunk.to_vec();
            partner.shuffle(&mut rng);
            let partner_labels: Vec<usize> = partner.iter().map(|&i| anchor.labels[i]).collect();
            let mut mixed = ndarray::Array2::zeros(batch.raw_dim());
            let mut lambdas = Vec::with_capacity(chunk.len());
            for (k, (&fi, &mi)) in chunk.iter().zip(&partner).enumerate() {
                let (row, lambda) = mixup_pair(
                    anchor.features.row(fi),
                    anchor.features.row(mi),
                    &cfg.mixup,
                    &mut rng,
                );
                mixed.row_mut(k).assign(&row);
                lambdas.push(lambda);
            }
            let mix = mix_loss(params, &mixed, &lambdas, &labels, &partner_labels, |x| {
                weak_augment(x, &cfg.augmentation, &mut rng)
            })?;
            sgd_step_heads(
                params,
                &mix.grads,
                &mut state,
                &cfg.server_optimizer,
                HeadSelection::CLASS_ONLY,
            );
            mix.loss
        } else {
            let out = nn::forward(params, &batch)?;
            let (loss, grad) = cross_entropy_batch(&out.logits, &labels)?;
            let grads = nn::backward(params, &out, &OutputGradient::for_logits(grad))?;
            sgd_step_heads(
                params,
                &grads,
                &mut state,
                &cfg.server_optimizer,
                HeadSelection::CLASS_ONLY,
            );
            loss
        };
        supervised_sum += loss;
        supervised_batches += 1;
    }
    let supervised_loss = supervised_sum / supervised_batches.max(1) as f64;

    // Contrastive epoch (anchor head); batches without both a within-class
    // and a cross-class pair are skipped.
    let mut contrastive_loss = f64::NAN;
    if fed.method.trains_contrastive() {
        let mut state = OptimizerState::zeros(params);
        let mut sum = 0.0;
        let mut batches = 0usize;
        order.shuffle(&mut rng);
        for chunk in order.chunks(fed.batch_size) {
            let batch = anchor.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| anchor.labels[i]).collect();
            let out = nn::forward(params, &batch)?;
            match label_contrastive_loss(&out.anchor_embeddings, &labels, &cfg.contrastive) {
                ContrastiveOutcome::Computed { loss, grad } => {
                    let grads = nn::backward(params, &out, &OutputGradient::for_anchor(grad))?;
                    sgd_step_heads(
                        params,
                        &grads,
                        &mut state,
                        &cfg.server_optimizer,
                        HeadSelection::ANCHOR_ONLY,
                    );
                    sum += loss;
                    batches += 1;
                }
                ContrastiveOutcome::Skipped(_) => {}
            }
        }
        if batches > 0 {
            contrastive_loss = sum / batches as f64;
        }
    }

    Ok(ServerTrainOutcome {
        supervised_loss,
        contrastive_loss,
    })
}

/// Classification accuracy of the current parameters on a labeled set.
pub fn evaluate_accuracy(params: &ModelParameters, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(f64::NAN);
    }
    let out = nn::forward(params, &dataset.features)?;
    let correct = (0..dataset.len())
        .filter(|&i| argmax(out.logits.row(i).iter().copied()) == dataset.labels[i])
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    values
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Everything a round needs besides the evolving parameters.
pub struct FederationEnv<'a> {
    pub cfg: &'a ExperimentConfig,
    pub anchor: &'a Dataset,
    pub shards: &'a [ClientShard],
    pub test: &'a Dataset,
}

/// The evolving simulation state: current global parameters and how many
/// rounds have completed.
#[derive(Debug, Clone)]
pub struct SimulationState {
    pub params: ModelParameters,
    pub completed_rounds: usize,
}

/// Runs one communication round and records its metrics.
///
/// Sequence: compute the anchor table from the current weights, select
/// clients, pseudo-label and locally train each, aggregate, run the server
/// phase, evaluate on the held-out test set.
pub fn run_round(state: &mut SimulationState, env: &FederationEnv) -> Result<RoundMetrics> {
    let cfg = env.cfg;
    let fed = &cfg.federation;
    let round = state.completed_rounds + 1;
    let table = compute_anchor_table(
        &state.params,
        &env.anchor.features,
        &env.anchor.labels,
        env.anchor.num_classes,
    )?;
    let participants = select_clients(
        cfg.partition.num_clients,
        fed.participation_ratio,
        round,
        cfg.seed,
    );

    let run_one = |&client_id: &usize| -> Result<ClientUpdate> {
        run_client(&state.params, &table, &env.shards[client_id], cfg, round)
    };
    let updates: Vec<ClientUpdate> = if fed.parallel_clients {
        participants.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        participants.iter().map(run_one).collect::<Result<_>>()?
    };

    state.params = fedavg_aggregate(&updates, &state.params);
    let server = server_train(&mut state.params, env.anchor, cfg, round)?;
    let test_accuracy = evaluate_accuracy(&state.params, env.test)?;

    let anchor_dim = cfg.network_spec()?.anchor_dim;
    let param_count = state.params.param_count() as u64;
    let table_scalars = (env.anchor.len() * anchor_dim) as u64;
    let broadcast = fed.method.broadcasts_anchor_table();
    let downstream_scalars =
        participants.len() as u64 * (param_count + if broadcast { table_scalars } else { 0 });
    let upstream_scalars = updates.iter().filter(|u| !u.skipped).count() as u64 * param_count;
    let overhead_percent = if broadcast {
        communication_overhead(env.anchor.len(), anchor_dim, param_count as usize)
    } else {
        0.0
    };

    fn mean(values: Vec<f64>) -> f64 {
        if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }
    let metrics = RoundMetrics {
        round,
        test_accuracy,
        pseudo_label_accuracy_anchor_head: mean(
            updates
                .iter()
                .filter_map(|u| u.diagnostics.anchor_head.map(|a| a.overall))
                .collect(),
        ),
        pseudo_label_accuracy_anchor_head_qualified: mean(
            updates
                .iter()
                .filter_map(|u| u.diagnostics.anchor_head.and_then(|a| a.qualified))
                .collect(),
        ),
        pseudo_label_accuracy_classification_head: mean(
            updates
                .iter()
                .filter_map(|u| u.diagnostics.classification_head)
                .collect(),
        ),
        avg_qualified_samples: mean(
            updates
                .iter()
                .map(|u| u.diagnostics.qualified_count as f64)
                .collect(),
        ),
        server_supervised_loss: server.supervised_loss,
        server_contrastive_loss: server.contrastive_loss,
        overhead_percent,
        downstream_scalars,
        upstream_scalars,
        participants,
    };
    state.completed_rounds = round;
    Ok(metrics)
}

/// Runs one client's local phase and assembles its update with diagnostics.
fn run_client(
    w_t: &ModelParameters,
    table: &AnchorEmbeddingTable,
    shard: &ClientShard,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<ClientUpdate> {
    let fed = &cfg.federation;
    let mut rng = rng::stream(
        cfg.seed,
        rng::DOMAIN_CLIENT,
        round as u64,
        shard.client_id() as u64,
    );
    let settings = LocalTrainSettings {
        optimizer: &cfg.client_optimizer,
        local_epochs: fed.local_epochs,
        batch_size: fed.batch_size,
        client_mixup_enabled: fed.client_mixup_enabled,
        mixup: &cfg.mixup,
        augmentation: &cfg.augmentation,
    };
    let features = shard.features();
    let outcome: ClientOutcome = match fed.method {
        Method::FedAnchor | Method::FedAnchorMix => {
            client_update_fedanchor(w_t, table, features, &cfg.labeling, &settings, &mut rng)?
        }
        Method::PredictionThresholdBaseline => {
            client_update_prediction_threshold(w_t, features, &cfg.labeling, &settings, &mut rng)?
        }
        Method::SupervisedBaseline => client_update_supervised(
            w_t,
            features,
            shard.diagnostic_labels(),
            &settings,
            &mut rng,
        )?,
    };

    // Diagnostics only below this point: hidden labels never reach training.
    let hidden = shard.diagnostic_labels();
    let (anchor_head, classification_head) = if shard.is_empty() {
        (None, None)
    } else {
        let out = nn::forward(w_t, features)?;
        let anchor_records = if fed.method.broadcasts_anchor_table() {
            outcome.records.clone()
        } else {
            label_embeddings(&out.anchor_embeddings, table, cfg.labeling.threshold)
        };
        let anchor_head = pseudo_label_accuracy(&anchor_records, hidden);
        let correct = (0..shard.len())
            .filter(|&i| argmax(out.logits.row(i).iter().copied()) == hidden[i])
            .count();
        (
            Some(anchor_head),
            Some(correct as f64 / shard.len() as f64),
        )
    };

    let weight_basis = match fed.aggregation_weighting {
        AggregationWeighting::DatasetSize => shard.len() as f64,
        AggregationWeighting::TrainedSize => outcome.trained_sample_count as f64,
    };
    let skipped = outcome.params.is_none();
    Ok(ClientUpdate {
        client_id: shard.client_id(),
        skipped,
        weight_basis,
        trained_sample_count: outcome.trained_sample_count,
        diagnostics: ClientDiagnostics {
            shard_size: shard.len(),
            anchor_head,
            classification_head,
            qualified_count: outcome.qualified_count,
            steps_taken: outcome.steps_taken,
        },
        params: outcome.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetSource, ExperimentConfig};
    use crate::experiment::build_data;
    use crate::losses::cosine_similarity;
    use crate::nn::init_params;

    fn tiny_config(method: Method) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 77;
        cfg.anchor_size = 12;
        cfg.dataset = DatasetSource::Blobs {
            classes: 3,
            dim: 4,
            per_class: 40,
            spread: 0.4,
            center_scale: 3.0,
            test_per_class: 15,
        };
        cfg.network.hidden_dims = vec![8];
        cfg.network.anchor_dim = 4;
        cfg.partition.num_clients = 6;
        cfg.federation.rounds = 3;
        cfg.federation.participation_ratio = 0.5;
        cfg.federation.local_epochs = 2;
        cfg.federation.method = method;
        cfg.validate().expect("test config valid");
        cfg
    }

    fn init_state(cfg: &ExperimentConfig) -> SimulationState {
        SimulationState {
            params: init_params(&cfg.network_spec().unwrap(), cfg.seed).unwrap(),
            completed_rounds: 0,
        }
    }

    #[test]
    fn select_clients_examples() {
        for round in [1usize, 5, 9] {
            let all = select_clients(8, 1.0, round, 3);
            assert_eq!(all, (0..8).collect::<Vec<_>>());
        }
        let ten = select_clients(100, 0.1, 4, 9);
        assert_eq!(ten.len(), 10);
        let mut dedup = ten.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 10, "ids must be distinct");
        assert_eq!(ten, select_clients(100, 0.1, 4, 9));
        assert_ne!(ten, select_clients(100, 0.1, 5, 9), "rounds draw fresh");
        // round(r*N) with a minimum of one participant.
        assert_eq!(select_clients(20, 0.25, 1, 0).len(), 5);
        assert_eq!(select_clients(3, 0.05, 1, 0).len(), 1);
    }

    #[test]
    fn aggregate_falls_back_when_all_skip() {
        let params = init_params(
            &crate::nn::NetworkSpec {
                input_dim: 2,
                hidden_dims: vec![3],
                num_classes: 2,
                anchor_dim: 2,
            },
            0,
        )
        .unwrap();
        let skipped = ClientUpdate {
            client_id: 0,
            params: None,
            weight_basis: 10.0,
            trained_sample_count: 0,
            diagnostics: ClientDiagnostics {
                shard_size: 10,
                anchor_head: None,
                classification_head: None,
                qualified_count: 0,
                steps_taken: 0,
            },
            skipped: true,
        };
        let agg = fedavg_aggregate(&[skipped.clone()], &params);
        assert_eq!(agg.to_flat(), params.to_flat());

        // Zero total weight with non-skipped updates is treated as all-skipped.
        let zero_weight = ClientUpdate {
            params: Some(params.map(|v| v + 1.0)),
            weight_basis: 0.0,
            skipped: false,
            ..skipped
        };
        let agg = fedavg_aggregate(&[zero_weight], &params);
        assert_eq!(agg.to_flat(), params.to_flat());
    }

    #[test]
    fn skipped_clients_never_influence_the_aggregate() {
        let spec = crate::nn::NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![3],
            num_classes: 2,
            anchor_dim: 2,
        };
        let w_t = init_params(&spec, 1).unwrap();
        let live = ClientUpdate {
            client_id: 0,
            params: Some(init_params(&spec, 2).unwrap()),
            weight_basis: 5.0,
            trained_sample_count: 5,
            diagnostics: ClientDiagnostics {
                shard_size: 5,
                anchor_head: None,
                classification_head: None,
                qualified_count: 5,
                steps_taken: 1,
            },
            skipped: false,
        };
        let skipped = ClientUpdate {
            client_id: 1,
            params: None,
            weight_basis: 50.0,
            trained_sample_count: 0,
            diagnostics: live.diagnostics.clone(),
            skipped: true,
        };
        let with = fedavg_aggregate(&[live.clone(), skipped], &w_t);
        let without = fedavg_aggregate(&[live], &w_t);
        assert_eq!(with.to_flat(), without.to_flat());
    }

    #[test]
    fn overhead_formula_cases() {
        assert_eq!(communication_overhead(10, 4, 1000), 4.0);
        let base = communication_overhead(250, 16, 100_000);
        let doubled = communication_overhead(500, 16, 100_000);
        assert!((doubled - 2.0 * base).abs() < 1e-12);

        // Published scale: 11.17M-parameter model, 128-d anchor head.
        let p = 11_170_000;
        assert!((communication_overhead(250, 128, p) - 0.29).abs() < 0.005);
        assert!((communication_overhead(500, 128, p) - 0.57).abs() < 0.005);
        assert!((communication_overhead(5000, 128, p) - 5.73).abs() < 0.005);
    }

    #[test]
    fn pretrain_zero_epochs_is_identity_and_runs_are_deterministic() {
        let mut cfg = tiny_config(Method::FedAnchor);
        let data = build_data(&cfg).unwrap();
        let params = init_params(&cfg.network_spec().unwrap(), cfg.seed).unwrap();

        cfg.federation.pretrain_epochs = 0;
        let mut unchanged = params.clone();
        pretrain_server(&mut unchanged, &data.anchor, &cfg).unwrap();
        assert_eq!(unchanged.to_flat(), params.to_flat());

        cfg.federation.pretrain_epochs = 5;
        let mut a = params.clone();
        pretrain_server(&mut a, &data.anchor, &cfg).unwrap();
        let mut b = params.clone();
        pretrain_server(&mut b, &data.anchor, &cfg).unwrap();
        assert_eq!(a.to_flat(), b.to_flat());

        // Training accuracy on the anchor data improves over initialization.
        let before = evaluate_accuracy(&params, &data.anchor).unwrap();
        let after = evaluate_accuracy(&a, &data.anchor).unwrap();
        assert!(after > before, "pretrain accuracy {before} -> {after}");
    }

    #[test]
    fn server_supervised_epoch_leaves_anchor_head_untouched() {
        let cfg = tiny_config(Method::PredictionThresholdBaseline);
        let data = build_data(&cfg).unwrap();
        let before = init_params(&cfg.network_spec().unwrap(), 9).unwrap();
        let mut after = before.clone();
        server_train(&mut after, &data.anchor, &cfg, 1).unwrap();
        assert_eq!(
            after.anchor_head.weight, before.anchor_head.weight,
            "no contrastive epoch ran, anchor head must be untouched"
        );
        assert_eq!(after.anchor_head.bias, before.anchor_head.bias);
        assert_ne!(after.class_head.weight, before.class_head.weight);
    }

    #[test]
    fn contrastive_epoch_leaves_classification_head_untouched() {
        // FedAnchor and the baseline share the identical supervised epoch and
        // RNG stream; FedAnchor then adds the contrastive epoch. Equal
        // classification heads prove that epoch never touches them.
        let fed_cfg = tiny_config(Method::FedAnchor);
        let base_cfg = tiny_config(Method::PredictionThresholdBaseline);
        let data = build_data(&fed_cfg).unwrap();
        let start = init_params(&fed_cfg.network_spec().unwrap(), 9).unwrap();

        let mut fed = start.clone();
        let out = server_train(&mut fed, &data.anchor, &fed_cfg, 1).unwrap();
        assert!(out.contrastive_loss.is_finite());
        let mut base = start.clone();
        let out = server_train(&mut base, &data.anchor, &base_cfg, 1).unwrap();
        assert!(out.contrastive_loss.is_nan());

        assert_eq!(fed.class_head.weight, base.class_head.weight);
        assert_eq!(fed.class_head.bias, base.class_head.bias);
        assert_ne!(fed.anchor_head.weight, base.anchor_head.weight);
    }

    fn mean_within_class_cosine(params: &crate::nn::ModelParameters, data: &Dataset) -> f64 {
        let out = nn::forward(params, &data.features).unwrap();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..data.len() {
            for j in (i + 1)..data.len() {
                if data.labels[i] == data.labels[j] {
                    total += cosine_similarity(
                        out.anchor_embeddings.row(i),
                        out.anchor_embeddings.row(j),
                    )
                    .value;
                    pairs += 1;
                }
            }
        }
        total / pairs as f64
    }

    #[test]
    fn contrastive_epoch_does_not_scatter_anchor_classes() {
        // Two-class toy, one batch, small rate. The supervised epochs of the
        // two methods are identical draw for draw, so the difference between
        // their outcomes is exactly the contrastive step; that step must not
        // push same-class anchor embeddings apart.
        let mut fed_cfg = tiny_config(Method::FedAnchor);
        fed_cfg.dataset = DatasetSource::Blobs {
            classes: 2,
            dim: 4,
            per_class: 30,
            spread: 0.4,
            center_scale: 3.0,
            test_per_class: 10,
        };
        fed_cfg.anchor_size = 12;
        fed_cfg.federation.pretrain_epochs = 5;
        fed_cfg.server_optimizer.learning_rate = 0.01;
        fed_cfg.federation.batch_size = 64; // single batch per epoch
        fed_cfg.validate().unwrap();
        let mut base_cfg = fed_cfg.clone();
        base_cfg.federation.method = Method::PredictionThresholdBaseline;

        let data = build_data(&fed_cfg).unwrap();
        let mut params = init_params(&fed_cfg.network_spec().unwrap(), fed_cfg.seed).unwrap();
        pretrain_server(&mut params, &data.anchor, &fed_cfg).unwrap();

        let mut supervised_only = params.clone();
        server_train(&mut supervised_only, &data.anchor, &base_cfg, 1).unwrap();
        let before = mean_within_class_cosine(&supervised_only, &data.anchor);

        let mut with_contrastive = params.clone();
        server_train(&mut with_contrastive, &data.anchor, &fed_cfg, 1).unwrap();
        let after = mean_within_class_cosine(&with_contrastive, &data.anchor);
        assert!(
            after >= before - 1e-9,
            "contrastive step scattered classes: {before} -> {after}"
        );
    }

    #[test]
    fn null_dynamics_round_emits_metrics_and_freezes_weights() {
        let mut cfg = tiny_config(Method::FedAnchor);
        cfg.federation.participation_ratio = 1.0;
        cfg.federation.local_epochs = 1;
        let tiny = f64::MIN_POSITIVE;
        cfg.client_optimizer = crate::nn::OptimizerConfig {
            learning_rate: tiny,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        cfg.server_optimizer = cfg.client_optimizer;
        cfg.validate().unwrap();
        let data = build_data(&cfg).unwrap();
        let env = FederationEnv {
            cfg: &cfg,
            anchor: &data.anchor,
            shards: &data.shards,
            test: &data.test,
        };
        let mut state = init_state(&cfg);
        let before = state.params.clone();
        let metrics = run_round(&mut state, &env).unwrap();
        assert_eq!(metrics.round, 1);
        assert_eq!(metrics.participants.len(), cfg.partition.num_clients);
        assert!(metrics.test_accuracy.is_finite());
        assert!(
            state.params.max_abs_diff(&before) < 1e-12,
            "learning rate ~0 must freeze the weights"
        );
    }

    #[test]
    fn rounds_are_pure_functions_of_state_and_config() {
        let cfg = tiny_config(Method::FedAnchor);
        let data = build_data(&cfg).unwrap();
        let env = FederationEnv {
            cfg: &cfg,
            anchor: &data.anchor,
            shards: &data.shards,
            test: &data.test,
        };
        let mut a = init_state(&cfg);
        let mut b = init_state(&cfg);
        for _ in 0..3 {
            let ma = run_round(&mut a, &env).unwrap();
            let mb = run_round(&mut b, &env).unwrap();
            assert_eq!(ma, mb);
            assert_eq!(a.params.to_flat(), b.params.to_flat());
        }
    }

    #[test]
    fn parallel_and_serial_rounds_agree_exactly() {
        let mut serial_cfg = tiny_config(Method::FedAnchor);
        serial_cfg.federation.parallel_clients = false;
        let mut parallel_cfg = serial_cfg.clone();
        parallel_cfg.federation.parallel_clients = true;
        let data = build_data(&serial_cfg).unwrap();
        let mut s_state = init_state(&serial_cfg);
        let mut p_state = init_state(&parallel_cfg);
        let s_env = FederationEnv {
            cfg: &serial_cfg,
            anchor: &data.anchor,
            shards: &data.shards,
            test: &data.test,
        };
        let p_env = FederationEnv {
            cfg: &parallel_cfg,
            anchor: &data.anchor,
            shards: &data.shards,
            test: &data.test,
        };
        for _ in 0..2 {
            let ms = run_round(&mut s_state, &s_env).unwrap();
            let mp = run_round(&mut p_state, &p_env).unwrap();
            assert_eq!(ms, mp);
            assert_eq!(s_state.params.to_flat(), p_state.params.to_flat());
        }
    }

    #[test]
    fn payload_accounting_matches_the_schedule() {
        for method in [Method::FedAnchor, Method::PredictionThresholdBaseline] {
            let cfg = tiny_config(method);
            let data = build_data(&cfg).unwrap();
            let env = FederationEnv {
                cfg: &cfg,
                anchor: &data.anchor,
                shards: &data.shards,
                test: &data.test,
            };
            let mut state = init_state(&cfg);
            let metrics = run_round(&mut state, &env).unwrap();
            let p = state.params.param_count() as u64;
            let table = (data.anchor.len() * cfg.network_spec().unwrap().anchor_dim) as u64;
            let k = metrics.participants.len() as u64;
            let expected_down = if method.broadcasts_anchor_table() {
                k * (p + table)
            } else {
                k * p
            };
            assert_eq!(metrics.downstream_scalars, expected_down);
            assert!(metrics.upstream_scalars <= k * p);
            assert_eq!(metrics.upstream_scalars % p, 0, "upstream is whole models");
            if method == Method::PredictionThresholdBaseline {
                assert_eq!(metrics.overhead_percent, 0.0);
            } else {
                let expected = communication_overhead(
                    data.anchor.len(),
                    cfg.network_spec().unwrap().anchor_dim,
                    p as usize,
                );
                assert_eq!(metrics.overhead_percent, expected);
            }
        }
    }

    #[test]
    fn hidden_labels_cannot_reach_semi_supervised_training() {
        // Re-labeling every shard must change diagnostics at most; the
        // trained parameters and qualified counts must be bit-identical.
        for method in [Method::FedAnchor, Method::PredictionThresholdBaseline] {
            let cfg = tiny_config(method);
            let data = build_data(&cfg).unwrap();
            let scrambled: Vec<crate::data::ClientShard> = data
                .shards
                .iter()
                .map(|s| {
                    let flipped: Vec<usize> =
                        s.diagnostic_labels().iter().map(|&y| (y + 1) % 3).collect();
                    s.clone().with_labels(flipped)
                })
                .collect();
            let env_a = FederationEnv {
                cfg: &cfg,
                anchor: &data.anchor,
                shards: &data.shards,
                test: &data.test,
            };
            let env_b = FederationEnv {
                cfg: &cfg,
                anchor: &data.anchor,
                shards: &scrambled,
                test: &data.test,
            };
            let mut a = init_state(&cfg);
            let mut b = init_state(&cfg);
            let ma = run_round(&mut a, &env_a).unwrap();
            let mb = run_round(&mut b, &env_b).unwrap();
            assert_eq!(
                a.params.to_flat(),
                b.params.to_flat(),
                "{method:?}: hidden labels leaked into training"
            );
            assert_eq!(ma.avg_qualified_samples, mb.avg_qualified_samples);
            assert_eq!(ma.test_accuracy, mb.test_accuracy);
            // The diagnostics legitimately differ.
            assert_ne!(
                ma.pseudo_label_accuracy_anchor_head,
                mb.pseudo_label_accuracy_anchor_head
            );
        }
    }

    #[test]
    fn supervised_baseline_uses_full_shard_weight() {
        let cfg = tiny_config(Method::SupervisedBaseline);
        let data = build_data(&cfg).unwrap();
        let env = FederationEnv {
            cfg: &cfg,
            anchor: &data.anchor,
            shards: &data.shards,
            test: &data.test,
        };
        let mut state = init_state(&cfg);
        let metrics = run_round(&mut state, &env).unwrap();
        let expected: f64 = metrics
            .participants
            .iter()
            .map(|&id| data.shards[id].len() as f64)
            .sum::<f64>()
            / metrics.participants.len() as f64;
        assert!((metrics.avg_qualified_samples - expected).abs() < 1e-12);
        assert!(metrics.server_contrastive_loss.is_nan());
    }
}
