//! Attack evaluation metrics computed from query transcripts.
//!
//! Inputs whose dropout-free prediction already equals the target label can be excluded
//! (see [`eligible`]) before computing attack success rate, label consistency, third-label
//! counts and queries-to-activation. "Activation" here is observed through the predicted label,
//! which is all a black-box adversary sees.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dropout::DropoutPlan;
use crate::error::{contract, Error, Result};
use crate::network::{predict_labels, Parameters};
use crate::numeric::cosine_similarity;
use crate::query::{run_campaigns, Transcript};

/// Transcripts whose clean prediction differs from `target_label`.
pub fn eligible(transcripts: &[Transcript], target_label: usize) -> Vec<&Transcript> {
    transcripts
        .iter()
        .filter(|t| t.clean_label != target_label)
        .collect()
}

/// Fraction of inputs with at least one target-label prediction.
pub fn attack_success_rate<'a>(
    transcripts: impl IntoIterator<Item = &'a Transcript>,
    target_label: usize,
) -> Result<f64> {
    let (mut n, mut hits) = (0usize, 0usize);
    for t in transcripts {
        n += 1;
        if t.labels().any(|l| l == target_label) {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("attack success rate over zero transcripts"));
    }
    Ok(hits as f64 / n as f64)
}

/// Plain (dropout-free) accuracy.
pub fn accuracy(params: &Parameters, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy over an empty dataset"));
    }
    let pred = predict_labels(params, data.inputs())?;
    let correct = pred.iter().zip(data.labels()).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub backdoored_accuracy: f64,
    pub clean_accuracy: f64,
    /// `clean_accuracy - backdoored_accuracy`.
    pub delta: f64,
}

pub fn model_utility(backdoored: &Parameters, clean: &Parameters, test: &Dataset) -> Result<Utility> {
    let b = accuracy(backdoored, test)?;
    let c = accuracy(clean, test)?;
    Ok(Utility {
        backdoored_accuracy: b,
        clean_accuracy: c,
        delta: c - b,
    })
}

fn per_input_mean<'a, F>(transcripts: impl IntoIterator<Item = &'a Transcript>, mut score: F) -> Result<f64>
where
    F: FnMut(&Transcript) -> Result<f64>,
{
    let (mut n, mut sum) = (0usize, 0.0);
    for t in transcripts {
        sum += score(t)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("metric over zero transcripts"));
    }
    Ok(sum / n as f64)
}

/// 1 for an input whose non-target predictions are all the same label, else 0; averaged.
pub fn label_consistency<'a>(
    transcripts: impl IntoIterator<Item = &'a Transcript>,
    target_label: usize,
) -> Result<f64> {
    per_input_mean(transcripts, |t| Ok(if is_consistent(t, target_label) { 1.0 } else { 0.0 }))
}

pub fn is_consistent(t: &Transcript, target_label: usize) -> bool {
    let mut rest = t.labels().filter(|&l| l != target_label);
    match rest.next() {
        None => true,
        Some(first) => rest.all(|l| l == first),
    }
}

/// Mean cosine similarity of consecutive posteriors, per input, averaged over inputs.
pub fn posterior_similarity<'a>(transcripts: impl IntoIterator<Item = &'a Transcript>) -> Result<f64> {
    per_input_mean(transcripts, |t| {
        if t.records.len() < 2 {
            return Err(Error::InsufficientQueries {
                input: t.input_index,
                records: t.records.len(),
            });
        }
        let sum: f64 = t
            .records
            .windows(2)
            .map(|w| cosine_similarity(&w[0].posteriors, &w[1].posteriors))
            .sum();
        Ok(sum / (t.records.len() - 1) as f64)
    })
}

/// Most frequent non-target label (ties to the lowest label), if any.
pub fn modal_label(t: &Transcript, target_label: usize) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in t.labels().filter(|&l| l != target_label) {
        *counts.entry(l).or_default() += 1;
    }
    let mut best: Option<(usize, usize)> = None;
    for (label, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((label, c));
        }
    }
    best.map(|(l, _)| l)
}

/// Queries predicting neither the modal non-target label nor the target.
pub fn third_label_events(t: &Transcript, target_label: usize) -> usize {
    match modal_label(t, target_label) {
        None => 0,
        Some(m) => t.labels().filter(|&l| l != m && l != target_label).count(),
    }
}

/// Mean over inputs of [`third_label_events`].
pub fn third_label_count<'a>(
    transcripts: impl IntoIterator<Item = &'a Transcript>,
    target_label: usize,
) -> Result<f64> {
    per_input_mean(transcripts, |t| Ok(third_label_events(t, target_label) as f64))
}

/// First target-label prediction per successful input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    /// Inputs with at least one activation.
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub bin_width: u64,
    /// `histogram[i]` counts first activations in queries `[i*w + 1, (i+1)*w]`.
    pub histogram: Vec<usize>,
}

pub fn queries_to_activation<'a>(
    transcripts: impl IntoIterator<Item = &'a Transcript>,
    target_label: usize,
    bin_width: u64,
) -> Result<QueryStats> {
    if bin_width == 0 {
        return Err(contract("histogram bin width must be positive"));
    }
    let mut firsts: Vec<u64> = transcripts
        .into_iter()
        .filter_map(|t| t.records.iter().position(|r| r.label == target_label))
        .map(|p| p as u64 + 1)
        .collect();
    firsts.sort_unstable();
    let count = firsts.len();
    if count == 0 {
        return Ok(QueryStats {
            count,
            mean: None,
            median: None,
            bin_width,
            histogram: Vec::new(),
        });
    }
    let mean = firsts.iter().sum::<u64>() as f64 / count as f64;
    let median = if count % 2 == 1 {
        firsts[count / 2] as f64
    } else {
        (firsts[count / 2 - 1] + firsts[count / 2]) as f64 / 2.0
    };
    let bins = ((firsts[count - 1] - 1) / bin_width + 1) as usize;
    let mut histogram = vec![0; bins];
    for f in &firsts {
        histogram[((f - 1) / bin_width) as usize] += 1;
    }
    Ok(QueryStats {
        count,
        mean: Some(mean),
        median: Some(median),
        bin_width,
        histogram,
    })
}

/// Fraction of all query predictions equal to the input's ground-truth label.
pub fn dropout_accuracy(transcripts: &[Transcript], truth: &[usize]) -> Result<f64> {
    let (mut n, mut correct) = (0usize, 0usize);
    for t in transcripts {
        let y = *truth
            .get(t.input_index)
            .ok_or_else(|| contract(format!("no ground truth for input {}", t.input_index)))?;
        n += t.records.len();
        correct += t.labels().filter(|&l| l == y).count();
    }
    if n == 0 {
        return Err(Error::EmptyInput("dropout accuracy over zero queries"));
    }
    Ok(correct as f64 / n as f64)
}

/// Everything measured for one backdoored/clean model pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_queries: usize,
    pub inference_rate: f64,
    pub eval_inputs: usize,
    pub eligible_inputs: usize,
    pub attack_success_rate: f64,
    pub utility: Utility,
    /// Backdoored-model accuracy with prediction-time dropout on, over every query.
    pub dropout_accuracy: f64,
    pub label_consistency: f64,
    pub posterior_similarity: f64,
    pub queries_to_activation: QueryStats,
    pub third_label_mean_count: f64,
}

impl MetricsReport {
    /// Column order of [`MetricsReport::csv_row`]. Stable.
    pub const CSV_COLUMNS: [&'static str; 15] = [
        "num_queries",
        "inference_rate",
        "eval_inputs",
        "eligible_inputs",
        "attack_success_rate",
        "backdoored_accuracy",
        "clean_accuracy",
        "utility_delta",
        "dropout_accuracy",
        "label_consistency",
        "posterior_similarity",
        "activated_inputs",
        "mean_queries_to_activation",
        "median_queries_to_activation",
        "third_label_mean_count",
    ];

    pub fn csv_header() -> String {
        Self::CSV_COLUMNS.join(",")
    }

    /// Numeric values in [`CSV_COLUMNS`](Self::CSV_COLUMNS) order; missing statistics are NaN.
    pub fn values(&self) -> [f64; 15] {
        [
            self.num_queries as f64,
            self.inference_rate,
            self.eval_inputs as f64,
            self.eligible_inputs as f64,
            self.attack_success_rate,
            self.utility.backdoored_accuracy,
            self.utility.clean_accuracy,
            self.utility.delta,
            self.dropout_accuracy,
            self.label_consistency,
            self.posterior_similarity,
            self.queries_to_activation.count as f64,
            self.queries_to_activation.mean.unwrap_or(f64::NAN),
            self.queries_to_activation.median.unwrap_or(f64::NAN),
            self.third_label_mean_count,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format_value(*v))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Structured-text (TOML) rendering.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is always serializable")
    }
}

/// Shortest round-trip decimal, `NaN` for missing values.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

/// Settings for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub num_queries: usize,
    pub inference_rate: f64,
    /// The first `eval_inputs` test samples are queried.
    pub eval_inputs: usize,
    pub query_seed: u64,
    /// Drop inputs whose dropout-free prediction is already the target label.
    pub exclude_target_class: bool,
    pub histogram_bin: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            num_queries: 5000,
            inference_rate: 0.001,
            eval_inputs: 1000,
            query_seed: 2020,
            exclude_target_class: true,
            histogram_bin: 500,
        }
    }
}

/// Runs campaigns on the backdoored model and computes every metric.
pub fn evaluate_attack(
    backdoored: &Parameters,
    clean: &Parameters,
    plan: &DropoutPlan,
    target_label: usize,
    test: &Dataset,
    settings: &EvalSettings,
) -> Result<(MetricsReport, Vec<Transcript>)> {
    let n = settings.eval_inputs.min(test.len());
    let indices: Vec<usize> = (0..n).collect();
    let plan = plan.with_inference_rate(settings.inference_rate);
    let transcripts = run_campaigns(
        backdoored,
        test.inputs(),
        &indices,
        &plan,
        settings.num_queries,
        settings.query_seed,
    )?;
    let report = summarize(&transcripts, backdoored, clean, target_label, test, settings)?;
    Ok((report, transcripts))
}

/// Computes a [`MetricsReport`] from existing transcripts.
pub fn summarize(
    transcripts: &[Transcript],
    backdoored: &Parameters,
    clean: &Parameters,
    target_label: usize,
    test: &Dataset,
    settings: &EvalSettings,
) -> Result<MetricsReport> {
    let pool: Vec<&Transcript> = if settings.exclude_target_class {
        eligible(transcripts, target_label)
    } else {
        transcripts.iter().collect()
    };
    let num_queries = transcripts.first().map_or(0, |t| t.records.len());
    Ok(MetricsReport {
        num_queries,
        inference_rate: settings.inference_rate,
        eval_inputs: transcripts.len(),
        eligible_inputs: pool.len(),
        attack_success_rate: attack_success_rate(pool.iter().copied(), target_label)?,
        utility: model_utility(backdoored, clean, test)?,
        dropout_accuracy: dropout_accuracy(transcripts, test.labels())?,
        label_consistency: label_consistency(pool.iter().copied(), target_label)?,
        posterior_similarity: if num_queries >= 2 {
            posterior_similarity(transcripts)?
        } else {
            f64::NAN
        },
        queries_to_activation: queries_to_activation(pool.iter().copied(), target_label, settings.histogram_bin)?,
        third_label_mean_count: third_label_count(pool.iter().copied(), target_label)?,
    })
}
