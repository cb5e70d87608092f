//! Experiment configuration: one TOML document describing data, model, training, attack and
//! evaluation. Every field has a default, so an empty document is the MNIST reference run.

use std::env;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use triggerless_core::backdoor::{select_target_neurons, AttackConfig, Seeds, TrainConfig};
use triggerless_core::data::{load_mnist_dir, parse_fixture, subsample, synthetic_blobs, Dataset};
use triggerless_core::dropout::LayerTargets;
use triggerless_core::metrics::EvalSettings;
use triggerless_core::network::ModelSpec;

use crate::error::CliError;

/// Environment variable naming the MNIST directory when the config does not.
pub const MNIST_DIR_ENV: &str = "TRIGGERLESS_MNIST_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Independent clean/backdoored model pairs, each with derived seeds.
    pub repetitions: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub evaluation: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            repetitions: 1,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Mnist {
        /// Directory holding the four IDX files (plain or `.gz`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        /// Use a seeded random subset of the training set.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_subset: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_subset: Option<usize>,
        #[serde(default)]
        subset_seed: u64,
    },
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
        #[serde(default = "defaults::blob_seed")]
        seed: u64,
        /// Share of the shuffled samples held out for testing.
        #[serde(default = "defaults::test_fraction")]
        test_fraction: f64,
    },
    Fixture {
        train: PathBuf,
        test: PathBuf,
    },
}

mod defaults {
    pub fn classes() -> usize {
        4
    }
    pub fn dim() -> usize {
        16
    }
    pub fn samples_per_class() -> usize {
        200
    }
    pub fn spread() -> f64 {
        0.05
    }
    pub fn blob_seed() -> u64 {
        11
    }
    pub fn test_fraction() -> f64 {
        0.25
    }
    pub fn count() -> usize {
        1
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mnist {
            dir: None,
            train_subset: None,
            test_subset: None,
            subset_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn synthetic_default() -> Self {
        DatasetConfig::Synthetic {
            classes: defaults::classes(),
            dim: defaults::dim(),
            samples_per_class: defaults::samples_per_class(),
            spread: defaults::spread(),
            seed: defaults::blob_seed(),
            test_fraction: defaults::test_fraction(),
        }
    }

    /// Short human-readable descriptor recorded in checkpoint metadata.
    pub fn describe(&self) -> String {
        match self {
            DatasetConfig::Mnist { train_subset, .. } => match train_subset {
                Some(n) => format!("mnist (train subset {n})"),
                None => "mnist".into(),
            },
            DatasetConfig::Synthetic { classes, dim, seed, .. } => {
                format!("synthetic blobs ({classes} classes, dim {dim}, seed {seed})")
            }
            DatasetConfig::Fixture { train, .. } => format!("fixture {}", train.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden-layer widths; input and output widths come from the dataset.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 128] }
    }
}

/// Training settings. The CLI trains for 50 epochs by default, longer than the library default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub dropout_rate: f64,
    pub seeds: Seeds,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 50,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay_every: t.lr_decay_every,
            lr_decay_factor: t.lr_decay_factor,
            dropout_rate: t.train_dropout_rate,
            seeds: t.seeds,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, repetition: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay_every: self.lr_decay_every,
            lr_decay_factor: self.lr_decay_factor,
            train_dropout_rate: self.dropout_rate,
            seeds: self.seeds.derive(repetition),
        }
    }
}

/// One target layer. `layer` defaults to the second-to-last layer (the last hidden layer);
/// `neurons` overrides the seeded selection of `count` neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default = "defaults::count")]
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neurons: Option<Vec<usize>>,
}

impl Default for TargetSpec {
    fn default() -> Self {
        Self {
            layer: None,
            count: 1,
            neurons: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub target_label: usize,
    pub backdoor_batch_fraction: f64,
    pub spare_targets: bool,
    /// Seed of target-neuron selection; layer entry `i` uses `neuron_seed + i`.
    pub neuron_seed: u64,
    pub targets: Vec<TargetSpec>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            target_label: 0,
            backdoor_batch_fraction: 0.1,
            spare_targets: true,
            neuron_seed: 9,
            targets: vec![TargetSpec::default()],
        }
    }
}

impl AttackSection {
    pub fn resolve_targets(&self, spec: &ModelSpec) -> Result<Vec<LayerTargets>, CliError> {
        if self.targets.is_empty() {
            return Err(CliError::Config("attack.targets must name at least one layer".into()));
        }
        self.targets
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let layer = t.layer.unwrap_or_else(|| spec.second_to_last_layer());
                let neurons = match &t.neurons {
                    Some(n) => n.clone(),
                    None => select_target_neurons(spec, layer, t.count, self.neuron_seed + i as u64)
                        .map_err(CliError::config)?,
                };
                LayerTargets::new(layer, neurons).map_err(CliError::config)
            })
            .collect()
    }
}

/// Datasets of one run.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.repetitions == 0 {
            return Err(CliError::Config("repetitions must be at least 1".into()));
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(CliError::Config("model.hidden needs at least one positive width".into()));
        }
        if self.evaluation.num_queries == 0 {
            return Err(CliError::Config("evaluation.num_queries must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.evaluation.inference_rate) {
            return Err(CliError::Config("evaluation.inference_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_spec(&self, data: &Data) -> Result<ModelSpec, CliError> {
        let mut widths = vec![data.train.features()];
        widths.extend(&self.model.hidden);
        widths.push(data.train.classes().max(data.test.classes()));
        ModelSpec::new(widths).map_err(CliError::config)
    }

    /// Attack configuration for `repetition`, with targets resolved against `spec`.
    pub fn attack_config(&self, spec: &ModelSpec, repetition: u64) -> Result<AttackConfig, CliError> {
        let attack = AttackConfig {
            train: self.train.to_config(repetition),
            target_label: self.attack.target_label,
            targets: self.attack.resolve_targets(spec)?,
            backdoor_batch_fraction: self.attack.backdoor_batch_fraction,
            inference_dropout_rate: self.evaluation.inference_rate,
            spare_targets: self.attack.spare_targets,
        };
        // a zero inference rate is a legitimate evaluation setting; check the rest
        let mut probe = attack.clone();
        if probe.inference_dropout_rate == 0.0 {
            probe.inference_dropout_rate = 0.5;
        }
        probe.validate(spec).map_err(CliError::config)?;
        Ok(attack)
    }

    pub fn repetition_dir(&self, repetition: usize) -> PathBuf {
        self.output_dir.join(format!("rep-{repetition}"))
    }

    /// Query seed of `repetition`: the configured seed for repetition 0, derived otherwise.
    pub fn query_seed(&self, repetition: u64) -> u64 {
        if repetition == 0 {
            self.evaluation.query_seed
        } else {
            triggerless_core::backdoor::splitmix64(self.evaluation.query_seed ^ repetition)
        }
    }

    pub fn load_data(&self) -> Result<Data, CliError> {
        match &self.dataset {
            DatasetConfig::Mnist {
                dir,
                train_subset,
                test_subset,
                subset_seed,
            } => {
                let dir = dir.clone().unwrap_or_else(default_mnist_dir);
                let train = load_mnist_dir(&dir, "train").map_err(CliError::data)?;
                let test = load_mnist_dir(&dir, "t10k").map_err(CliError::data)?;
                let pick = |ds: Dataset, n: &Option<usize>, seed: u64| match n {
                    Some(n) => subsample(&ds, *n, seed).map_err(CliError::config),
                    None => Ok(ds),
                };
                Ok(Data {
                    train: pick(train, train_subset, *subset_seed)?,
                    test: pick(test, test_subset, subset_seed.wrapping_add(1))?,
                })
            }
            DatasetConfig::Synthetic {
                classes,
                dim,
                samples_per_class,
                spread,
                seed,
                test_fraction,
            } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(CliError::Config("test_fraction must lie in (0, 1)".into()));
                }
                let all = synthetic_blobs(*classes, *dim, *samples_per_class, *spread, *seed)
                    .map_err(CliError::config)?;
                let shuffled = subsample(&all, all.len(), seed.wrapping_add(1)).map_err(CliError::config)?;
                let n_test = ((all.len() as f64) * test_fraction).round() as usize;
                let (test, train) = shuffled.split_at(n_test).map_err(CliError::config)?;
                Ok(Data { train, test })
            }
            DatasetConfig::Fixture { train, test } => {
                let read = |p: &Path| -> Result<Dataset, CliError> {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    parse_fixture(&text).map_err(CliError::data)
                };
                Ok(Data {
                    train: read(train)?,
                    test: read(test)?,
                })
            }
        }
    }
}

/// `$TRIGGERLESS_MNIST_DIR`, else `data/mnist` under the working directory.
pub fn default_mnist_dir() -> PathBuf {
    env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_reference_run() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.evaluation.num_queries, 5000);
        assert_eq!(c.evaluation.inference_rate, 0.001);
        assert_eq!(c.attack.targets, vec![TargetSpec::default()]);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig { dataset: DatasetConfig::synthetic_default(), ..Default::default() };
        c.attack.targets = vec![
            TargetSpec { layer: Some(0), count: 2, neurons: None },
            TargetSpec { layer: Some(1), count: 1, neurons: Some(vec![3]) },
        ];
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = ExperimentConfig::from_toml(
            "[dataset]\nsource = \"synthetic\"\nclasses = 3\n[train]\nepochs = 2\n[train.seeds]\ninit = 5\n",
        )
        .unwrap();
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.seeds.init, 5);
        assert_eq!(c.train.seeds.shuffle, Seeds::default().shuffle);
        match c.dataset {
            DatasetConfig::Synthetic { classes, dim, .. } => assert_eq!((classes, dim), (3, 16)),
            other => panic!("unexpected dataset {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("epochs = 3").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nepoch = 3").is_err());
    }

    #[test]
    fn synthetic_split_is_disjoint_and_deterministic() {
        let c = ExperimentConfig { dataset: DatasetConfig::synthetic_default(), ..Default::default() };
        let a = c.load_data().unwrap();
        let b = c.load_data().unwrap();
        assert_eq!(a.train.len() + a.test.len(), 800);
        assert_eq!(a.test.len(), 200);
        assert_eq!(a.train.inputs(), b.train.inputs());
    }

    #[test]
    fn targets_resolve_to_second_to_last_layer() {
        let spec = ModelSpec::new(vec![16, 20, 12, 4]).unwrap();
        let t = AttackSection::default().resolve_targets(&spec).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].layer, 1);
        assert_eq!(t[0].neurons.len(), 1);
        let bad = AttackSection {
            targets: vec![TargetSpec { layer: Some(5), count: 1, neurons: None }],
            ..AttackSection::default()
        };
        assert!(bad.resolve_targets(&spec).is_err());
    }
}
