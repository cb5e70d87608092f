//! Clean and backdoored training.
//!
//! Backdoored training is ordinary mini-batch SGD with dropout, except that each batch is
//! independently designated a backdoor batch with probability `backdoor_batch_fraction`. A
//! backdoor batch is supervised with the target label for every sample, and its target layers
//! use the crafted mask (exactly the target neurons dropped, scale 1) instead of Bernoulli
//! dropout. Every other layer, and every layer of a clean batch, gets standard dropout; with
//! `spare_targets` the target neurons themselves are always kept in clean batches.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset};
use crate::dropout::{craft_target_mask, sample_standard_mask, DropoutPlan, LayerTargets, Mask, RngStream};
use crate::error::{contract, Result};
use crate::network::{
    backward_batch, forward_batch, init_params, predict_labels_masked, sgd_step_in_place,
    ModelSpec, Parameters,
};
use crate::numeric::{argmax_tiebreak_low, Matrix};

/// Independent seeds for every random choice a training run makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub dropout: u64,
    pub selection: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            init: 1,
            shuffle: 2,
            dropout: 3,
            selection: 4,
        }
    }
}

impl Seeds {
    /// Seeds for repetition `rep`, decorrelated through splitmix64.
    pub fn derive(&self, rep: u64) -> Self {
        if rep == 0 {
            return *self;
        }
        let mix = |s: u64, salt: u64| splitmix64(s ^ splitmix64(rep.wrapping_mul(0x9E37_79B9) ^ salt));
        Self {
            init: mix(self.init, 1),
            shuffle: mix(self.shuffle, 2),
            dropout: mix(self.dropout, 3),
            selection: mix(self.selection, 4),
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiply the learning rate by `lr_decay_factor` every this many epochs (0 disables).
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Standard dropout rate on every hidden layer during training.
    pub train_dropout_rate: f64,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.1,
            lr_decay_every: 10,
            lr_decay_factor: 0.5,
            train_dropout_rate: 0.5,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(contract(format!("invalid learning rate {}", self.learning_rate)));
        }
        crate::dropout::check_rate(self.train_dropout_rate)
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.lr_decay_every) {
            Some(steps) => self.learning_rate * self.lr_decay_factor.powi(steps as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub train: TrainConfig,
    pub target_label: usize,
    pub targets: Vec<LayerTargets>,
    pub backdoor_batch_fraction: f64,
    pub inference_dropout_rate: f64,
    /// Keep target neurons out of the regular dropout of clean batches, so only backdoor
    /// batches ever see them dropped. Off reproduces plain Bernoulli dropout on every unit.
    #[serde(default = "default_spare_targets")]
    pub spare_targets: bool,
}

fn default_spare_targets() -> bool {
    true
}

impl AttackConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        self.train.validate()?;
        if self.target_label >= spec.class_count() {
            return Err(contract(format!(
                "target label {} out of range for {} classes",
                self.target_label,
                spec.class_count()
            )));
        }
        if !(self.backdoor_batch_fraction > 0.0 && self.backdoor_batch_fraction < 1.0) {
            return Err(contract(format!(
                "backdoor batch fraction must lie in (0, 1), got {}",
                self.backdoor_batch_fraction
            )));
        }
        self.plan(spec)?.validate_attack(spec)
    }

    /// Dropout plan: training rate and inference rate on every hidden layer.
    pub fn plan(&self, spec: &ModelSpec) -> Result<DropoutPlan> {
        DropoutPlan::uniform(
            spec,
            self.train.train_dropout_rate,
            self.inference_dropout_rate,
            self.targets.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean loss over clean-batch samples (with training dropout active).
    pub clean_loss: f64,
    /// Accuracy over clean-batch samples (with training dropout active).
    pub clean_accuracy: f64,
    /// Fraction of training samples predicted as the target label under the crafted mask.
    pub backdoor_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub backdoor_batches: usize,
}

/// What the trainer is about to apply to one batch; handed to an observer before the step.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub backdoor: bool,
    pub supervised_labels: &'a [usize],
    pub ground_truth: &'a [usize],
}

/// Uniformly chosen, sorted, duplicate-free neuron indices of hidden layer `layer`.
pub fn select_target_neurons(
    spec: &ModelSpec,
    layer: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if layer >= spec.hidden_count() {
        return Err(contract(format!("layer {layer} is not a hidden layer")));
    }
    let width = spec.hidden_width(layer);
    if count > width {
        return Err(contract(format!(
            "cannot select {count} target neurons from a layer of width {width}"
        )));
    }
    let mut stream = RngStream::new(seed, 0);
    let mut picked = index::sample(stream.rng_mut(), width, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn train_clean(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
) -> Result<(Parameters, TrainReport)> {
    run(dataset, spec, config, None, &mut |_| {})
}

pub fn train_backdoored(
    dataset: &Dataset,
    spec: &ModelSpec,
    attack: &AttackConfig,
) -> Result<(Parameters, TrainReport)> {
    train_backdoored_observed(dataset, spec, attack, &mut |_| {})
}

/// [`train_backdoored`] with a hook that sees every batch's supervision before it is applied.
pub fn train_backdoored_observed(
    dataset: &Dataset,
    spec: &ModelSpec,
    attack: &AttackConfig,
    observer: &mut dyn FnMut(&BatchEvent<'_>),
) -> Result<(Parameters, TrainReport)> {
    attack.validate(spec)?;
    run(dataset, spec, &attack.train, Some(attack), observer)
}

/// Crafted masks for the target layers of `attack`, `None` elsewhere.
pub fn crafted_masks(spec: &ModelSpec, targets: &[LayerTargets]) -> Result<Vec<Option<Mask>>> {
    let mut masks = vec![None; spec.hidden_count()];
    for t in targets {
        if t.layer >= spec.hidden_count() {
            return Err(contract(format!("target layer {} is not a hidden layer", t.layer)));
        }
        masks[t.layer] = Some(craft_target_mask(spec.hidden_width(t.layer), &t.neurons)?);
    }
    Ok(masks)
}

/// Fraction of `inputs` predicted as `target_label` under the crafted masks.
pub fn backdoor_conditional_accuracy(
    params: &Parameters,
    spec: &ModelSpec,
    inputs: &Matrix,
    targets: &[LayerTargets],
    target_label: usize,
) -> Result<f64> {
    if inputs.rows() == 0 {
        return Ok(0.0);
    }
    let masks = crafted_masks(spec, targets)?;
    let labels = predict_labels_masked(params, inputs, &masks)?;
    Ok(labels.iter().filter(|&&l| l == target_label).count() as f64 / labels.len() as f64)
}

fn run(
    dataset: &Dataset,
    spec: &ModelSpec,
    config: &TrainConfig,
    attack: Option<&AttackConfig>,
    observer: &mut dyn FnMut(&BatchEvent<'_>),
) -> Result<(Parameters, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(crate::error::Error::EmptyInput("training dataset"));
    }
    if dataset.features() != spec.input_width() {
        return Err(contract(format!(
            "dataset has {} features, model expects {}",
            dataset.features(),
            spec.input_width()
        )));
    }
    if dataset.classes() > spec.class_count() {
        return Err(contract(format!(
            "dataset has {} classes, model outputs {}",
            dataset.classes(),
            spec.class_count()
        )));
    }
    let hidden = spec.hidden_count();
    let crafted: Vec<Option<Mask>> = match attack {
        Some(a) => crafted_masks(spec, &a.targets)?,
        None => vec![None; hidden],
    };
    let spared: Vec<&[usize]> = (0..hidden)
        .map(|l| match attack {
            Some(a) if a.spare_targets => a
                .targets
                .iter()
                .find(|t| t.layer == l)
                .map_or(&[][..], |t| &t.neurons[..]),
            _ => &[][..],
        })
        .collect();

    let mut params = init_params(spec, config.seeds.init);
    let mut dropout_stream = RngStream::new(config.seeds.dropout, 0);
    let mut selection_stream = RngStream::new(config.seeds.selection, 1);
    let rate = config.train_dropout_rate;
    let scale = 1.0 / (1.0 - rate);

    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        backdoor_batches: 0,
    };
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let batches = batch_indices(dataset.len(), config.batch_size, config.seeds.shuffle, epoch as u64);
        for (b, idx) in batches.iter().enumerate() {
            let backdoor = match attack {
                Some(a) => selection_stream.next_uniform() < a.backdoor_batch_fraction,
                None => false,
            };
            let x = dataset.inputs().select_rows(idx);
            let truth: Vec<usize> = idx.iter().map(|&i| dataset.labels()[i]).collect();
            let labels: Vec<usize> = match (backdoor, attack) {
                (true, Some(a)) => vec![a.target_label; idx.len()],
                _ => truth.clone(),
            };
            observer(&BatchEvent {
                epoch,
                batch: b,
                backdoor,
                supervised_labels: &labels,
                ground_truth: &truth,
            });

            let mut factors: Vec<Option<Matrix>> = (0..hidden)
                .map(|l| {
                    ((backdoor && crafted[l].is_some()) || rate > 0.0)
                        .then(|| Matrix::zeros(idx.len(), spec.hidden_width(l)))
                })
                .collect();
            // per sample, per layer in order; crafted layers consume no draws
            for r in 0..idx.len() {
                for (l, f) in factors.iter_mut().enumerate() {
                    let Some(f) = f else { continue };
                    let row = f.row_mut(r);
                    match (&crafted[l], backdoor) {
                        (Some(m), true) => {
                            for (i, v) in row.iter_mut().enumerate() {
                                *v = m.factor(i);
                            }
                        }
                        _ => {
                            let m = sample_standard_mask(row.len(), rate, &mut dropout_stream)?;
                            debug_assert_eq!(m.scale(), scale);
                            for (i, v) in row.iter_mut().enumerate() {
                                *v = m.factor(i);
                            }
                            for &t in spared[l] {
                                row[t] = 1.0;
                            }
                        }
                    }
                }
            }

            let trace = forward_batch(&params, &x, &factors)?;
            let (grads, loss) = backward_batch(&params, &x, &trace, &factors, &labels)?;
            if backdoor {
                report.backdoor_batches += 1;
            } else {
                loss_sum += loss;
                seen += idx.len();
                for (r, &y) in labels.iter().enumerate() {
                    if argmax_tiebreak_low(trace.posteriors.row(r))? == y {
                        correct += 1;
                    }
                }
            }
            sgd_step_in_place(&mut params, &grads, lr)?;
        }
        let backdoor_accuracy = match attack {
            Some(a) => Some(backdoor_conditional_accuracy(
                &params,
                spec,
                dataset.inputs(),
                &a.targets,
                a.target_label,
            )?),
            None => None,
        };
        report.epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            clean_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            clean_accuracy: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            backdoor_accuracy,
        });
    }
    Ok((params, report))
}
