//! Experiment configuration: JSON schema, validation and derived objects.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trails_core::data::{gen_synthetic, load_idx, split, Dataset, SyntheticKind};
use trails_core::model::{build_independent_ensemble, build_trails, EnsembleKind, NetworkSpec, SparsitySpec, TrailsModel};
use trails_core::sparsity::Allocation;
use trails_core::topology::Strategy;
use trails_core::train::{check_budget, TrainConfig};

use crate::error::CliError;

fn yes() -> bool {
    true
}
fn default_noise() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.2
}
fn default_train_limit() -> usize {
    5000
}
fn default_test_limit() -> usize {
    1000
}
fn trails_kind() -> EnsembleKind {
    EnsembleKind::Trails
}
fn er() -> Allocation {
    Allocation::Er
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated 2-D task, split 80/20 (by default) with a seeded permutation.
    Synthetic {
        task: SyntheticKind,
        samples: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Standardize features with training-split statistics.
        #[serde(default = "yes")]
        normalize: bool,
        /// Data seed; the experiment seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    /// IDX image/label files, truncated to the first `*_limit` samples.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "default_train_limit")]
        train_limit: usize,
        #[serde(default = "default_test_limit")]
        test_limit: usize,
        #[serde(default)]
        normalize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "trails_kind")]
    pub kind: EnsembleKind,
    /// Number of heads (members) M.
    pub heads: usize,
    /// Blocks replicated per head; the backbone keeps the other `L − this`.
    pub blocks_in_head: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub ratio: f64,
    #[serde(default = "er")]
    pub allocation: Allocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkSpec,
    pub ensemble: EnsembleConfig,
    pub sparsity: SparsityConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Save `checkpoints/step-<t>.ntck` every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn field<T>(field: impl Into<String>, reason: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config {
        field: field.into(),
        reason: reason.into(),
    })
}

/// Re-root a core error under `prefix` (e.g. `train.`), keeping its field.
fn under(prefix: &str, fallback: &str, e: trails_core::Error) -> CliError {
    match e {
        trails_core::Error::Config { field, reason } => CliError::Config {
            field: format!("{prefix}{field}"),
            reason,
        },
        trails_core::Error::Io(_) | trails_core::Error::Idx { .. } => CliError::Core(e),
        other => CliError::Config {
            field: fallback.to_string(),
            reason: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        cfg.sync_train();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Copy the experiment-level seed and prune target into the training
    /// config, which does not carry them in JSON.
    pub fn sync_train(&mut self) {
        self.train.seed = self.seed;
        self.train.prune_sparsity = (self.train.topology.strategy == Strategy::PruneOneshot).then_some(self.sparsity.ratio);
    }

    pub fn split_index(&self) -> usize {
        self.network.num_blocks().saturating_sub(self.ensemble.blocks_in_head)
    }

    /// Static checks that need no data: every field, then model feasibility
    /// and the training-FLOPs budget.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                samples,
                noise,
                test_fraction,
                ..
            } => {
                if *samples < 10 {
                    return field("dataset.samples", format!("need at least 10 samples, got {samples}"));
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    return field("dataset.noise", format!("must be a finite value >= 0, got {noise}"));
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return field("dataset.test_fraction", format!("must be in (0, 1), got {test_fraction}"));
                }
            }
            DatasetConfig::Idx {
                train_limit, test_limit, ..
            } => {
                if *train_limit < 1 {
                    return field("dataset.train_limit", "must be >= 1");
                }
                if *test_limit < 1 {
                    return field("dataset.test_limit", "must be >= 1");
                }
            }
        }
        self.network.validate().map_err(|e| under("network.", "network", e))?;
        if self.ensemble.heads < 1 {
            return field("ensemble.heads", "must be >= 1");
        }
        let blocks = self.network.num_blocks();
        if self.ensemble.blocks_in_head > blocks {
            return field(
                "ensemble.blocks_in_head",
                format!("must be in 0..={blocks}, got {}", self.ensemble.blocks_in_head),
            );
        }
        let s = self.sparsity.ratio;
        if !(0.0..1.0).contains(&s) {
            return field("sparsity.ratio", format!("must be in [0, 1), got {s}"));
        }
        if self.checkpoint_interval == Some(0) {
            return field("checkpoint_interval", "must be >= 1");
        }
        let mut train = self.train.clone();
        train.seed = self.seed;
        train.prune_sparsity = (train.topology.strategy == Strategy::PruneOneshot).then_some(s);
        train.validate().map_err(|e| under("train.", "train", e))?;
        let model = self.build_model().map_err(|e| under("sparsity.", "sparsity.ratio", e))?;
        check_budget(&model, &train).map_err(|e| under("train.", "train.steps", e))?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.seed;
        t.prune_sparsity = (t.topology.strategy == Strategy::PruneOneshot).then_some(self.sparsity.ratio);
        t
    }

    /// Freshly initialized model. `prune_oneshot` starts dense.
    pub fn build_model(&self) -> trails_core::Result<TrailsModel> {
        let sparsity = if self.train.topology.strategy == Strategy::PruneOneshot {
            SparsitySpec::dense()
        } else {
            SparsitySpec {
                ratio: self.sparsity.ratio,
                allocation: self.sparsity.allocation,
            }
        };
        let mut model = match self.ensemble.kind {
            EnsembleKind::Trails => build_trails(&self.network, self.split_index(), self.ensemble.heads, sparsity, self.seed)?,
            EnsembleKind::Independent => build_independent_ensemble(&self.network, self.ensemble.heads, sparsity, self.seed)?,
        };
        model.vote = self.train.vote;
        Ok(model)
    }

    /// Train and test splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match &self.dataset {
            DatasetConfig::Synthetic {
                task,
                samples,
                noise,
                test_fraction,
                normalize,
                seed,
            } => {
                let seed = seed.unwrap_or(self.seed);
                let all = gen_synthetic(*task, *samples, *noise, seed)?;
                let (mut train, mut test) = split(&all, *test_fraction, seed)?;
                if *normalize {
                    let stats = train.compute_norm();
                    train.normalize_with(&stats);
                    test.normalize_with(&stats);
                }
                (train, test)
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
                normalize,
            } => {
                let mut train = load_idx(train_images, train_labels)?.truncate(*train_limit);
                let mut test = load_idx(test_images, test_labels)?.truncate(*test_limit);
                let classes = train.classes.max(test.classes);
                train.classes = classes;
                test.classes = classes;
                if *normalize {
                    let stats = train.compute_norm();
                    train.normalize_with(&stats);
                    test.normalize_with(&stats);
                }
                (train, test)
            }
        };
        if train.sample_shape() != self.network.input_shape.as_slice() {
            return field(
                "network.input_shape",
                format!("{:?} does not match dataset samples {:?}", self.network.input_shape, train.sample_shape()),
            );
        }
        if train.classes > self.network.classes {
            return field(
                "network.classes",
                format!("dataset has {} classes, network outputs {}", train.classes, self.network.classes),
            );
        }
        Ok((train, test))
    }

    /// Pretty JSON of the configuration as it will be run.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration without the fields that do not
    /// affect results (output directory, checkpoint cadence).
    pub fn hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output_dir = None;
        c.checkpoint_interval = None;
        Sha256::digest(serde_json::to_vec(&c).expect("config serializes")).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"{
        "dataset": {"kind": "synthetic", "task": "two_clusters", "samples": 200},
        "network": {
            "input_shape": [2], "classes": 2,
            "stem": [{"kind": "linear", "in_features": 2, "out_features": 8}, {"kind": "relu"}],
            "blocks": [[{"kind": "linear", "in_features": 8, "out_features": 8}, {"kind": "relu"}]],
            "classifier": [{"kind": "linear", "in_features": 8, "out_features": 2}]
        },
        "ensemble": {"heads": 1, "blocks_in_head": 1},
        "sparsity": {"ratio": 0.0},
        "train": {
            "optimizer": {"kind": "sgd", "momentum": 0.9},
            "lr": 0.1, "batch_size": 16, "steps": 20, "eval_interval": 10,
            "topology": {"strategy": "static"}
        },
        "seed": 1
    }"#;

    #[test]
    fn minimal_parses_and_validates() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.validate().unwrap();
        let (train, test) = cfg.load_data().unwrap();
        assert_eq!(train.len(), 160);
        assert_eq!(test.len(), 40);
        let again = ExperimentConfig::from_json(&cfg.resolved_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = MINIMAL.replace("\"seed\": 1", "\"seed\": 1, \"sed\": 2");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Parse(_))));
        let text = MINIMAL.replace("\"momentum\": 0.9", "\"momentum\": 0.9, \"nesterov\": true");
        assert!(matches!(ExperimentConfig::from_json(&text), Err(CliError::Parse(_))));
    }

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_json(text).unwrap().validate() {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_name_fields() {
        assert_eq!(field_of(&MINIMAL.replace("\"ratio\": 0.0", "\"ratio\": 1.0")), "sparsity.ratio");
        assert_eq!(field_of(&MINIMAL.replace("\"lr\": 0.1", "\"lr\": -0.1")), "train.lr");
        assert_eq!(field_of(&MINIMAL.replace("\"heads\": 1", "\"heads\": 0")), "ensemble.heads");
        assert_eq!(
            field_of(&MINIMAL.replace("\"blocks_in_head\": 1", "\"blocks_in_head\": 2")),
            "ensemble.blocks_in_head"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("\"strategy\": \"static\"", "\"strategy\": \"set\", \"update_interval\": 0")),
            "train.topology.update_interval"
        );
        assert_eq!(
            field_of(&MINIMAL.replace("\"steps\": 20", "\"steps\": 20, \"base_steps\": 10")),
            "train.steps"
        );
        assert_eq!(field_of(&MINIMAL.replace("\"samples\": 200", "\"samples\": 3")), "dataset.samples");
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = Some("elsewhere".into());
        b.checkpoint_interval = Some(5);
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }
}
