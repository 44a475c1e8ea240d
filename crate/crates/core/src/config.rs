//! Experiment configuration: TOML parsing, defaults, and cross-field
//! validation. Every run emits its effective config, so no output depends on
//! an undisclosed default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchor::LabelingConfig;
use crate::data::{AugmentationConfig, BlobsParams, PartitionConfig};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::losses::{ContrastiveConfig, MixupConfig};
use crate::nn::{NetworkSpec, OptimizerConfig};

/// Where the train/test data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Synthetic Gaussian blobs; a disjoint test draw uses the same geometry.
    Blobs {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_center_scale")]
        center_scale: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    /// CSV files with rows `f1,...,fd,label`.
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        num_classes: usize,
    },
}

fn default_classes() -> usize {
    4
}
fn default_dim() -> usize {
    16
}
fn default_per_class() -> usize {
    1500
}
fn default_spread() -> f64 {
    1.0
}
fn default_center_scale() -> f64 {
    3.0
}
fn default_test_per_class() -> usize {
    250
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Blobs {
            classes: default_classes(),
            dim: default_dim(),
            per_class: default_per_class(),
            spread: default_spread(),
            center_scale: default_center_scale(),
            test_per_class: default_test_per_class(),
        }
    }
}

impl DatasetSource {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::Blobs { classes, .. } => *classes,
            DatasetSource::Csv { num_classes, .. } => *num_classes,
        }
    }

    /// Feature dimension when it is statically known (blobs only).
    pub fn static_dim(&self) -> Option<usize> {
        match self {
            DatasetSource::Blobs { dim, .. } => Some(*dim),
            DatasetSource::Csv { .. } => None,
        }
    }

    pub fn blobs_params(&self) -> Option<BlobsParams> {
        match self {
            DatasetSource::Blobs {
                classes,
                dim,
                per_class,
                spread,
                center_scale,
                ..
            } => Some(BlobsParams {
                classes: *classes,
                dim: *dim,
                per_class: *per_class,
                spread: *spread,
                center_scale: *center_scale,
            }),
            DatasetSource::Csv { .. } => None,
        }
    }
}

/// Network architecture section; `input_dim` defaults to the dataset's
/// feature dimension (required explicitly for CSV sources).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub input_dim: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub anchor_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_dim: None,
            hidden_dims: vec![32],
            anchor_dim: 16,
        }
    }
}

/// The whole experiment description. An empty TOML file yields the documented
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub anchor_size: usize,
    pub dataset: DatasetSource,
    pub network: NetworkConfig,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    pub client_optimizer: OptimizerConfig,
    pub server_optimizer: OptimizerConfig,
    pub labeling: LabelingConfig,
    pub mixup: MixupConfig,
    pub contrastive: ContrastiveConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("out"),
            anchor_size: 80,
            dataset: DatasetSource::default(),
            network: NetworkConfig::default(),
            partition: PartitionConfig::default(),
            federation: FederationConfig::default(),
            client_optimizer: OptimizerConfig::default(),
            server_optimizer: OptimizerConfig::default(),
            labeling: LabelingConfig::default(),
            mixup: MixupConfig::default(),
            contrastive: ContrastiveConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// The concrete network architecture this config resolves to.
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let input_dim = match (self.network.input_dim, self.dataset.static_dim()) {
            (Some(d), _) => d,
            (None, Some(d)) => d,
            (None, None) => {
                return Err(Error::InvalidConfig {
                    field: "network.input_dim".into(),
                    value: "unset".into(),
                    constraint: "required for csv datasets".into(),
                })
            }
        };
        let spec = NetworkSpec {
            input_dim,
            hidden_dims: self.network.hidden_dims.clone(),
            num_classes: self.dataset.num_classes(),
            anchor_dim: self.network.anchor_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A copy with every defaulted value resolved, ready for emission.
    pub fn effective(&self) -> Result<ExperimentConfig> {
        let spec = self.network_spec()?;
        let mut out = self.clone();
        out.network.input_dim = Some(spec.input_dim);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &str, value: impl ToString, constraint: &str) -> Error {
            Error::InvalidConfig {
                field: field.into(),
                value: value.to_string(),
                constraint: constraint.into(),
            }
        }
        let c = self.dataset.num_classes();
        match &self.dataset {
            DatasetSource::Blobs {
                classes,
                dim,
                per_class,
                spread,
                center_scale,
                test_per_class,
            } => {
                if *classes == 0 {
                    return Err(bad("dataset.classes", classes, ">= 1"));
                }
                if *dim == 0 {
                    return Err(bad("dataset.dim", dim, ">= 1"));
                }
                if *per_class == 0 {
                    return Err(bad("dataset.per_class", per_class, ">= 1"));
                }
                if *test_per_class == 0 {
                    return Err(bad("dataset.test_per_class", test_per_class, ">= 1"));
                }
                if *spread < 0.0 {
                    return Err(bad("dataset.spread", spread, ">= 0"));
                }
                if *center_scale <= 0.0 {
                    return Err(bad("dataset.center_scale", center_scale, "> 0"));
                }
                if self.anchor_size > classes * per_class {
                    return Err(bad(
                        "anchor_size",
                        self.anchor_size,
                        "<= total blob samples (classes * per_class)",
                    ));
                }
            }
            DatasetSource::Csv { num_classes, .. } => {
                if *num_classes == 0 {
                    return Err(bad("dataset.num_classes", num_classes, ">= 1"));
                }
            }
        }
        if self.anchor_size < c {
            return Err(bad(
                "anchor_size",
                self.anchor_size,
                "S >= num_classes (every class needs an anchor)",
            ));
        }
        self.network_spec()?;
        if self.partition.num_clients == 0 {
            return Err(bad("partition.num_clients", 0, ">= 1"));
        }
        if !(self.partition.dirichlet_alpha > 0.0) {
            return Err(bad(
                "partition.dirichlet_alpha",
                self.partition.dirichlet_alpha,
                "> 0",
            ));
        }
        self.federation
            .validate(self.partition.num_clients)?;
        self.client_optimizer.validate("client_optimizer")?;
        self.server_optimizer.validate("server_optimizer")?;
        if !(self.federation.pretrain_lr > 0.0) {
            return Err(bad("federation.pretrain_lr", self.federation.pretrain_lr, "> 0"));
        }
        if !(0.0..=1.0).contains(&self.labeling.threshold) {
            return Err(bad("labeling.threshold", self.labeling.threshold, "in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.labeling.prediction_threshold) {
            return Err(bad(
                "labeling.prediction_threshold",
                self.labeling.prediction_threshold,
                "in [0, 1]",
            ));
        }
        if !(self.contrastive.temperature > 0.0) {
            return Err(bad(
                "contrastive.temperature",
                self.contrastive.temperature,
                "> 0",
            ));
        }
        if !(self.mixup.beta_param > 0.0) {
            return Err(bad("mixup.beta_param", self.mixup.beta_param, "> 0"));
        }
        if self.mixup.combine_coeff < 0.0 {
            return Err(bad("mixup.combine_coeff", self.mixup.combine_coeff, ">= 0"));
        }
        if self.augmentation.weak_jitter_sigma < 0.0 {
            return Err(bad(
                "augmentation.weak_jitter_sigma",
                self.augmentation.weak_jitter_sigma,
                ">= 0",
            ));
        }
        if self.augmentation.strong_jitter_sigma < 0.0 {
            return Err(bad(
                "augmentation.strong_jitter_sigma",
                self.augmentation.strong_jitter_sigma,
                ">= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.augmentation.strong_mask_fraction) {
            return Err(bad(
                "augmentation.strong_mask_fraction",
                self.augmentation.strong_mask_fraction,
                "in [0, 1)",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_documented_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.anchor_size, 80);
        assert_eq!(cfg.partition.num_clients, 20);
        assert_eq!(cfg.federation.rounds, 50);
        assert_eq!(cfg.federation.participation_ratio, 0.1);
        assert_eq!(cfg.federation.local_epochs, 5);
        assert_eq!(cfg.client_optimizer.learning_rate, 0.03);
        assert_eq!(cfg.client_optimizer.weight_decay, 5e-4);
        assert_eq!(cfg.labeling.threshold, 0.6);
        assert_eq!(cfg.labeling.prediction_threshold, 0.95);
        assert_eq!(cfg.mixup.beta_param, 0.75);
        assert_eq!(cfg.mixup.combine_coeff, 1.0);
        assert_eq!(cfg.contrastive.temperature, 1.0);
        let spec = cfg.network_spec().unwrap();
        assert_eq!(spec.input_dim, 16);
        assert_eq!(spec.num_classes, 4);
        assert_eq!(spec.anchor_dim, 16);
    }

    #[test]
    fn out_of_range_threshold_cites_the_interval() {
        let err = ExperimentConfig::from_toml_str("[labeling]\nthreshold = 1.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[0, 1]"), "{msg}");
        assert!(msg.contains("threshold"), "{msg}");
        assert!(msg.contains("1.5"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_toml_str("mystery_knob = 3\n").unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
        let err =
            ExperimentConfig::from_toml_str("[federation]\nroundz = 10\n").unwrap_err();
        assert!(err.to_string().contains("roundz"), "{err}");
    }

    #[test]
    fn effective_config_roundtrips() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\n[federation]\nrounds = 3\nmethod = \"prediction_threshold_baseline\"\n",
        )
        .unwrap();
        let effective = cfg.effective().unwrap();
        let reparsed = ExperimentConfig::from_toml_str(&effective.to_toml_string()).unwrap();
        assert_eq!(effective, reparsed);
        // Resolution filled the network input dimension.
        assert_eq!(reparsed.network.input_dim, Some(16));
    }

    #[test]
    fn method_names_are_the_wire_strings() {
        for (name, expect) in [
            ("fedanchor", crate::federation::Method::FedAnchor),
            ("fedanchor_mix", crate::federation::Method::FedAnchorMix),
            (
                "prediction_threshold_baseline",
                crate::federation::Method::PredictionThresholdBaseline,
            ),
            (
                "supervised_baseline",
                crate::federation::Method::SupervisedBaseline,
            ),
        ] {
            let cfg = ExperimentConfig::from_toml_str(&format!(
                "[federation]\nmethod = \"{name}\"\n"
            ))
            .unwrap();
            assert_eq!(cfg.federation.method, expect);
        }
    }

    #[test]
    fn csv_sources_require_an_input_dim() {
        let text = "[dataset]\nsource = \"csv\"\ntrain_path = \"a.csv\"\ntest_path = \"b.csv\"\nnum_classes = 3\n";
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("input_dim"), "{err}");
        let with_dim = format!("{text}[network]\ninput_dim = 5\n");
        let cfg = ExperimentConfig::from_toml_str(&with_dim).unwrap();
        assert_eq!(cfg.network_spec().unwrap().input_dim, 5);
    }

    #[test]
    fn cross_field_violations_are_rejected() {
        // Anchor set smaller than the class count.
        let err = ExperimentConfig::from_toml_str("anchor_size = 3\n").unwrap_err();
        assert!(err.to_string().contains("anchor_size"), "{err}");
        // Participation too small to select a client.
        let err = ExperimentConfig::from_toml_str(
            "[federation]\nparticipation_ratio = 0.01\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("participation_ratio"), "{err}");
        // Negative alpha.
        let err = ExperimentConfig::from_toml_str(
            "[partition]\ndirichlet_alpha = -1.0\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("dirichlet_alpha"), "{err}");
        // Zero rounds.
        let err = ExperimentConfig::from_toml_str("[federation]\nrounds = 0\n").unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
    }

    #[test]
    fn validation_errors_are_validation_kind() {
        let err = ExperimentConfig::from_toml_str("bogus = 1\n").unwrap_err();
        assert!(err.is_validation());
        let err = ExperimentConfig::from_toml_str("[labeling]\nthreshold = 2.0\n").unwrap_err();
        assert!(err.is_validation());
    }
}
