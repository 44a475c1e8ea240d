//! Experiment front-end: builds the data environment from a config, runs the
//! federated loop, and writes metrics, summary, manifest, and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    derived_seeds, generate_blobs, lda_partition, load_csv_dataset, split_anchor, BlobsParams,
    ClientShard, Dataset,
};
use crate::error::{Error, Result};
use crate::federation::{
    pretrain_server, run_round, FederationEnv, RoundMetrics, SimulationState,
};
use crate::metrics::{metrics_row, parse_metrics_row, summarize, RunSummary, METRICS_HEADER};
use crate::nn::{self, init_params, ModelParameters, NetworkSpec};

/// The fully materialized data side of an experiment.
pub struct ExperimentData {
    pub anchor: Dataset,
    pub shards: Vec<ClientShard>,
    pub test: Dataset,
}

/// Generates (or loads) train and test sets, splits off the anchor set, and
/// partitions the pool across clients. Deterministic in the config seed.
pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let seeds = derived_seeds(cfg.seed);
    let (train, test) = match &cfg.dataset {
        DatasetSource::Blobs { test_per_class, .. } => {
            let params = cfg.dataset.blobs_params().expect("blobs source");
            let test_params = BlobsParams {
                per_class: *test_per_class,
                ..params
            };
            (
                generate_blobs(&params, seeds.train),
                generate_blobs(&test_params, seeds.test),
            )
        }
        DatasetSource::Csv {
            train_path,
            test_path,
            num_classes,
        } => {
            let train = load_csv_dataset(train_path, Some(*num_classes))?;
            let test = load_csv_dataset(test_path, Some(*num_classes))?;
            let spec = cfg.network_spec()?;
            if train.dim() != spec.input_dim {
                return Err(Error::ShapeMismatch {
                    context: "csv train set".into(),
                    expected: format!("{} features (network.input_dim)", spec.input_dim),
                    got: format!("{} features", train.dim()),
                });
            }
            if test.dim() != spec.input_dim {
                return Err(Error::ShapeMismatch {
                    context: "csv test set".into(),
                    expected: format!("{} features (network.input_dim)", spec.input_dim),
                    got: format!("{} features", test.dim()),
                });
            }
            (train, test)
        }
    };
    let (anchor, pool) = split_anchor(&train, cfg.anchor_size, seeds.split)?;
    let shards = lda_partition(&pool, &cfg.partition, seeds.partition);
    Ok(ExperimentData {
        anchor,
        shards,
        test,
    })
}

/// Versioned checkpoint: everything needed to resume a run bit-exactly.
/// All randomness is derived from `(seed, round, ...)` streams, so the seed
/// echo plus the round index pins the RNG state.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub round: usize,
    pub network: NetworkSpec,
    pub params: ModelParameters,
}

pub const CHECKPOINT_VERSION: u32 = 1;

fn checkpoint_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints")
}

pub fn checkpoint_path(out_dir: &Path, round: usize) -> PathBuf {
    checkpoint_dir(out_dir).join(format!("round_{round:04}.json"))
}

pub fn write_checkpoint(out_dir: &Path, cp: &Checkpoint) -> Result<()> {
    let dir = checkpoint_dir(out_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = checkpoint_path(out_dir, cp.round);
    let json = serde_json::to_string(cp).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(out_dir: &Path, round: usize) -> Result<Checkpoint> {
    let path = checkpoint_path(out_dir, round);
    let text = fs::read_to_string(&path).map_err(|_| Error::MissingCheckpoint {
        round,
        dir: checkpoint_dir(out_dir).display().to_string(),
    })?;
    let cp: Checkpoint =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            cp.version
        )));
    }
    Ok(cp)
}

/// Latest checkpoint round available in the output directory.
pub fn latest_checkpoint_round(out_dir: &Path) -> Option<usize> {
    let dir = checkpoint_dir(out_dir);
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_prefix("round_")?
                .strip_suffix(".json")?
                .parse::<usize>()
                .ok()
        })
        .max()
}

/// Everything a finished (or resumed) run hands back in memory.
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub summary: RunSummary,
    pub final_params: ModelParameters,
}

/// Runs the experiment end to end, writing `metrics.csv`, `summary.json`,
/// `effective_config.toml`, `partition_manifest.json`, and checkpoints into
/// the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_inner(cfg, false)
}

/// Resumes from the latest checkpoint in the config's output directory and
/// continues to the configured round count. Rows for completed rounds are
/// kept; the resulting `metrics.csv` is byte-identical to an uninterrupted
/// run's.
pub fn resume_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_inner(cfg, true)
}

fn run_experiment_inner(cfg: &ExperimentConfig, resume: bool) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let spec = cfg.network_spec()?;
    let out_dir = &cfg.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    write_text(
        &out_dir.join("effective_config.toml"),
        &cfg.effective()?.to_toml_string(),
    )?;

    let data = build_data(cfg)?;
    write_partition_manifest(out_dir, &data.shards)?;

    let (mut state, mut rows): (SimulationState, Vec<RoundMetrics>) = if resume {
        let round = latest_checkpoint_round(out_dir).ok_or_else(|| Error::MissingCheckpoint {
            round: 0,
            dir: checkpoint_dir(out_dir).display().to_string(),
        })?;
        let cp = load_checkpoint(out_dir, round)?;
        if cp.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} does not match config seed {}",
                cp.seed, cfg.seed
            )));
        }
        if cp.network != spec {
            return Err(Error::Checkpoint(
                "checkpoint network spec does not match config".into(),
            ));
        }
        let rows = read_metrics_rows(out_dir, cp.round)?;
        (
            SimulationState {
                params: cp.params,
                completed_rounds: cp.round,
            },
            rows,
        )
    } else {
        let mut params = init_params(&spec, cfg.seed)?;
        if cfg.federation.pretrain_epochs > 0 {
            pretrain_server(&mut params, &data.anchor, cfg)?;
        }
        let state = SimulationState {
            params,
            completed_rounds: 0,
        };
        maybe_checkpoint(out_dir, cfg, &spec, &state, true)?;
        (state, Vec::new())
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut file = fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    writeln!(file, "{METRICS_HEADER}")
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    for row in &rows {
        writeln!(file, "{}", metrics_row(row))
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    }

    let env = FederationEnv {
        cfg,
        anchor: &data.anchor,
        shards: &data.shards,
        test: &data.test,
    };
    while state.completed_rounds < cfg.federation.rounds {
        let metrics = run_round(&mut state, &env)?;
        if !metrics.is_finite() || !state.params.is_finite() {
            return Err(Error::NumericDivergence {
                round: metrics.round,
            });
        }
        writeln!(file, "{}", metrics_row(&metrics))
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        file.flush()
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        rows.push(metrics);
        let is_last = state.completed_rounds == cfg.federation.rounds;
        maybe_checkpoint(out_dir, cfg, &spec, &state, is_last)?;
    }
    drop(file);

    let summary = summarize(
        &rows,
        method_name(cfg),
        cfg.seed,
        start.elapsed().as_secs_f64(),
    );
    let summary_json =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_text(&out_dir.join("summary.json"), &summary_json)?;

    Ok(RunOutput {
        metrics: rows,
        summary,
        final_params: state.params,
    })
}

fn method_name(cfg: &ExperimentConfig) -> &'static str {
    use crate::federation::Method;
    match cfg.federation.method {
        Method::FedAnchor => "fedanchor",
        Method::FedAnchorMix => "fedanchor_mix",
        Method::PredictionThresholdBaseline => "prediction_threshold_baseline",
        Method::SupervisedBaseline => "supervised_baseline",
    }
}

fn maybe_checkpoint(
    out_dir: &Path,
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    state: &SimulationState,
    force: bool,
) -> Result<()> {
    let every = cfg.federation.checkpoint_every;
    let due = every > 0 && state.completed_rounds % every == 0;
    if !(due || force) {
        return Ok(());
    }
    write_checkpoint(
        out_dir,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: cfg.seed,
            round: state.completed_rounds,
            network: spec.clone(),
            params: state.params.clone(),
        },
    )
}

/// Reads back metric rows `1..=upto` from an existing `metrics.csv`.
fn read_metrics_rows(out_dir: &Path, upto: usize) -> Result<Vec<RoundMetrics>> {
    let path = out_dir.join("metrics.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text =
        fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_metrics_row(line)?;
        if row.round <= upto {
            rows.push(row);
        }
    }
    rows.sort_by_key(|r| r.round);
    Ok(rows)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Client-to-sample-indices manifest, for reproducibility audits.
pub fn write_partition_manifest(out_dir: &Path, shards: &[ClientShard]) -> Result<()> {
    #[derive(Serialize)]
    struct ManifestEntry<'a> {
        client_id: usize,
        num_samples: usize,
        pool_indices: &'a [usize],
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        clients: Vec<ManifestEntry<'a>>,
    }
    let manifest = Manifest {
        clients: shards
            .iter()
            .map(|s| ManifestEntry {
                client_id: s.client_id(),
                num_samples: s.len(),
                pool_indices: s.source_indices(),
            })
            .collect(),
    };
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_text(&out_dir.join("partition_manifest.json"), &json)
}

/// Writes one row per test sample — `sample_id,true_label,e0,...` — using the
/// anchor-head embeddings of the checkpointed parameters for `round`.
pub fn dump_embeddings(cfg: &ExperimentConfig, round: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let cp = load_checkpoint(&cfg.out_dir, round)?;
    if cp.seed != cfg.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint seed {} does not match config seed {}",
            cp.seed, cfg.seed
        )));
    }
    let data = build_data(cfg)?;
    let out = nn::forward(&cp.params, &data.test.features)?;
    let mut text = String::new();
    use std::fmt::Write as _;
    let dim = out.anchor_embeddings.ncols();
    write!(text, "sample_id,true_label").expect("string write");
    for d in 0..dim {
        write!(text, ",e{d}").expect("string write");
    }
    text.push('\n');
    for i in 0..data.test.len() {
        write!(text, "{},{}", i, data.test.labels[i]).expect("string write");
        for v in out.anchor_embeddings.row(i) {
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }
    let path = cfg.out_dir.join(format!("embeddings_round_{round:04}.csv"));
    write_text(&path, &text)?;
    Ok(path)
}
