//! Subcommand bodies. Each reads an [`ExperimentConfig`], writes its files atomically under
//! `output_dir`, and reports a summary on the given writer.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use triggerless_core::backdoor::{train_backdoored, train_clean, AttackConfig, TrainConfig, TrainReport};
use triggerless_core::dropout::{DropoutPlan, LayerTargets};
use triggerless_core::metrics::{evaluate_attack, format_value, summarize, EvalSettings, MetricsReport};
use triggerless_core::network::{write_atomic, Checkpoint, ModelSpec, Parameters};
use triggerless_core::prob::{
    activation_prob_multi, expected_queries, monte_carlo_activation, queries_for_confidence,
    success_prob_in_q, TargetAssignment,
};
use triggerless_core::query::{
    predict, predict_activation_query, run_campaigns, schedule_dos, write_transcripts_csv, QuerySession,
};

use crate::config::{Data, ExperimentConfig, TargetSpec};
use crate::error::CliError;

pub const CLEAN_CHECKPOINT: &str = "clean.ckpt";
pub const BACKDOORED_CHECKPOINT: &str = "backdoored.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

/// Progress lines on stderr unless quiet.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn line(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Metadata document stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `clean` or `backdoored`.
    pub role: String,
    pub repetition: u64,
    pub dataset: String,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
}

impl CheckpointMeta {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Data(format!("unreadable checkpoint metadata: {e}")))
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_atomic(path, bytes).map_err(CliError::data)
}

/// Writes the resolved config into the output directory.
pub fn write_provenance(cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_file(&cfg.output_dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())
}

fn save_checkpoint(path: &Path, spec: &ModelSpec, params: Parameters, meta: &CheckpointMeta) -> Result<(), CliError> {
    let ckpt = Checkpoint {
        spec: spec.clone(),
        params,
        metadata: toml::to_string(meta).expect("metadata is always serializable"),
    };
    let bytes = ckpt.encode().map_err(CliError::from)?;
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, CheckpointMeta), CliError> {
    if !path.exists() {
        return Err(CliError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint missing (run `train` first)"),
        });
    }
    let ckpt = Checkpoint::load(path).map_err(CliError::data)?;
    let meta = CheckpointMeta::parse(&ckpt.metadata)?;
    Ok((ckpt, meta))
}

/// Loads `path` when it holds a model trained with exactly `meta`; otherwise trains one with
/// `train` and saves it.
fn cached_model(
    path: &Path,
    spec: &ModelSpec,
    meta: &CheckpointMeta,
    log: Log,
    train: impl FnOnce() -> Result<(Parameters, TrainReport), CliError>,
) -> Result<(Parameters, Option<TrainReport>), CliError> {
    if path.exists() {
        if let Ok((ckpt, found)) = load_checkpoint(path) {
            if &found == meta && &ckpt.spec == spec {
                log.line(format!("reusing {}", path.display()));
                return Ok((ckpt.params, None));
            }
        }
    }
    log.line(format!("training {}", path.display()));
    let (params, report) = train()?;
    // reload so the in-memory model is exactly what the checkpoint holds (f32 storage)
    save_checkpoint(path, spec, params, meta)?;
    let (ckpt, _) = load_checkpoint(path)?;
    Ok((ckpt.params, Some(report)))
}

/// A clean/backdoored pair as stored on disk.
pub struct ModelPair {
    pub clean: Parameters,
    pub backdoored: Parameters,
    pub attack: AttackConfig,
}

fn clean_meta(cfg: &ExperimentConfig, rep: u64) -> CheckpointMeta {
    CheckpointMeta {
        role: "clean".into(),
        repetition: rep,
        dataset: cfg.dataset.describe(),
        train: cfg.train.to_config(rep),
        attack: None,
    }
}

fn backdoored_meta(cfg: &ExperimentConfig, rep: u64, attack: &AttackConfig) -> CheckpointMeta {
    CheckpointMeta {
        role: "backdoored".into(),
        repetition: rep,
        dataset: cfg.dataset.describe(),
        train: attack.train.clone(),
        attack: Some(attack.clone()),
    }
}

fn train_log_csv(clean: Option<&TrainReport>, backdoored: Option<&TrainReport>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "epoch", "learning_rate", "clean_loss", "clean_accuracy", "backdoor_accuracy"])
        .expect("in-memory write");
    for (name, report) in [("clean", clean), ("backdoored", backdoored)] {
        let Some(report) = report else { continue };
        for e in &report.epochs {
            w.write_record([
                name.to_string(),
                e.epoch.to_string(),
                format_value(e.learning_rate),
                format_value(e.clean_loss),
                format_value(e.clean_accuracy),
                e.backdoor_accuracy.map(format_value).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
    }
    w.into_inner().expect("in-memory flush")
}

/// Trains (or reuses) the model pair of repetition `rep` under `dir`.
fn ensure_pair(
    cfg: &ExperimentConfig,
    data: &Data,
    spec: &ModelSpec,
    rep: u64,
    dir: &Path,
    attack: &AttackConfig,
    log: Log,
) -> Result<ModelPair, CliError> {
    let clean_cfg = cfg.train.to_config(rep);
    let (clean, clean_report) = cached_model(&dir.join(CLEAN_CHECKPOINT), spec, &clean_meta(cfg, rep), log, || {
        train_clean(&data.train, spec, &clean_cfg).map_err(CliError::from)
    })?;
    let (backdoored, bd_report) = cached_model(
        &dir.join(BACKDOORED_CHECKPOINT),
        spec,
        &backdoored_meta(cfg, rep, attack),
        log,
        || train_backdoored(&data.train, spec, attack).map_err(CliError::from),
    )?;
    if clean_report.is_some() || bd_report.is_some() {
        write_file(&dir.join(TRAIN_LOG_FILE), &train_log_csv(clean_report.as_ref(), bd_report.as_ref()))?;
    }
    Ok(ModelPair {
        clean,
        backdoored,
        attack: attack.clone(),
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &mut dyn Write, log: Log) -> Result<(), CliError> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(&data)?;
    ensure_dir(&cfg.output_dir)?;
    write_provenance(cfg)?;
    for rep in 0..cfg.repetitions {
        let dir = cfg.repetition_dir(rep);
        let attack = cfg.attack_config(&spec, rep as u64)?;
        let clean_cfg = cfg.train.to_config(rep as u64);
        log.line(format!("repetition {rep}: training clean model"));
        let (clean, clean_report) = train_clean(&data.train, &spec, &clean_cfg)?;
        log.line(format!("repetition {rep}: training backdoored model"));
        let (bd, bd_report) = train_backdoored(&data.train, &spec, &attack)?;
        save_checkpoint(&dir.join(CLEAN_CHECKPOINT), &spec, clean, &clean_meta(cfg, rep as u64))?;
        save_checkpoint(&dir.join(BACKDOORED_CHECKPOINT), &spec, bd, &backdoored_meta(cfg, rep as u64, &attack))?;
        write_file(&dir.join(TRAIN_LOG_FILE), &train_log_csv(Some(&clean_report), Some(&bd_report)))?;
        let last = |r: &TrainReport| r.epochs.last().map_or(f64::NAN, |e| e.clean_accuracy);
        let targets: Vec<String> =
            attack.targets.iter().map(|t| format!("layer {} neurons {:?}", t.layer, t.neurons)).collect();
        writeln!(
            out,
            "rep {rep}: backdoor batches {}, final train accuracy clean {:.4} backdoored {:.4}, targets {}",
            bd_report.backdoor_batches,
            last(&clean_report),
            last(&bd_report),
            targets.join("; ")
        )
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

fn load_pair(cfg: &ExperimentConfig, rep: usize, spec: &ModelSpec) -> Result<ModelPair, CliError> {
    let dir = cfg.repetition_dir(rep);
    let (clean, _) = load_checkpoint(&dir.join(CLEAN_CHECKPOINT))?;
    let (bd, meta) = load_checkpoint(&dir.join(BACKDOORED_CHECKPOINT))?;
    for c in [&clean, &bd] {
        if &c.spec != spec {
            return Err(CliError::Data(format!(
                "checkpoint widths {:?} do not match the configured model {:?}",
                c.spec.layer_widths(),
                spec.layer_widths()
            )));
        }
    }
    let attack = meta
        .attack
        .ok_or_else(|| CliError::Data(format!("{} carries no attack configuration", dir.display())))?;
    Ok(ModelPair {
        clean: clean.params,
        backdoored: bd.params,
        attack,
    })
}

fn settings_for(cfg: &ExperimentConfig, rep: u64) -> EvalSettings {
    EvalSettings {
        query_seed: cfg.query_seed(rep),
        ..cfg.evaluation.clone()
    }
}

fn plan_of(pair: &ModelPair, spec: &ModelSpec) -> Result<DropoutPlan, CliError> {
    pair.attack.plan(spec).map_err(CliError::config)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `repetition` column followed by [`MetricsReport::CSV_COLUMNS`]; one row per repetition,
/// then `mean` and `std` (sample standard deviation) rows.
pub fn metrics_csv(reports: &[MetricsReport]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["repetition"];
    header.extend(MetricsReport::CSV_COLUMNS);
    w.write_record(&header).expect("in-memory write");
    let rows: Vec<[f64; 15]> = reports.iter().map(MetricsReport::values).collect();
    for (i, r) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(r.iter().map(|v| format_value(*v)));
        w.write_record(&rec).expect("in-memory write");
    }
    let stats: Vec<(f64, f64)> = (0..15)
        .map(|c| mean_std(&rows.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect();
    for (name, pick) in [("mean", 0), ("std", 1)] {
        let mut rec = vec![name.to_string()];
        rec.extend(stats.iter().map(|s| format_value(if pick == 0 { s.0 } else { s.1 })));
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    repetition: &'a [MetricsReport],
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    save_transcripts: bool,
    out: &mut dyn Write,
    log: Log,
) -> Result<Vec<MetricsReport>, CliError> {
    cfg.validate()?;
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(&data)?;
    let mut reports = Vec::with_capacity(cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let pair = load_pair(cfg, rep, &spec)?;
        let settings = settings_for(cfg, rep as u64);
        log.line(format!(
            "repetition {rep}: {} inputs x {} queries at rate {}",
            settings.eval_inputs.min(data.test.len()),
            settings.num_queries,
            settings.inference_rate
        ));
        let (report, transcripts) = evaluate_attack(
            &pair.backdoored,
            &pair.clean,
            &plan_of(&pair, &spec)?,
            pair.attack.target_label,
            &data.test,
            &settings,
        )?;
        if save_transcripts {
            let mut buf = Vec::new();
            write_transcripts_csv(&mut buf, &transcripts).expect("in-memory write");
            write_file(&cfg.output_dir.join(format!("transcripts-rep-{rep}.csv")), &buf)?;
        }
        reports.push(report);
    }
    write_file(&cfg.output_dir.join(METRICS_FILE), &metrics_csv(&reports))?;
    let doc = toml::to_string(&ReportDoc { repetition: &reports }).expect("report is always serializable");
    write_file(&cfg.output_dir.join(REPORT_FILE), doc.as_bytes())?;
    let stdout = |e| CliError::io(Path::new("<stdout>"), e);
    for (rep, r) in reports.iter().enumerate() {
        writeln!(
            out,
            "rep {rep}: ASR {:.4} over {} eligible inputs, accuracy backdoored {:.4} clean {:.4}, label consistency {:.4}, posterior similarity {:.4}",
            r.attack_success_rate,
            r.eligible_inputs,
            r.utility.backdoored_accuracy,
            r.utility.clean_accuracy,
            r.label_consistency,
            r.posterior_similarity
        )
        .map_err(stdout)?;
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Queries,
    Neurons,
    Rate,
    Layer,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Queries => "queries",
            Axis::Neurons => "neurons",
            Axis::Rate => "rate",
            Axis::Layer => "layer",
        }
    }
}

/// One sweep point: axis value and the per-repetition reports.
pub struct SweepPoint {
    pub value: f64,
    pub reports: Vec<MetricsReport>,
}

fn as_count(v: f64, what: &str) -> Result<usize, CliError> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(CliError::Config(format!("{what} value {v} is not a non-negative integer")))
    }
}

/// Long-form rows `axis,value,metric,mean,stddev`.
pub fn sweep_csv(axis: Axis, points: &[SweepPoint]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["axis", "value", "metric", "mean", "stddev"]).expect("in-memory write");
    for p in points {
        let rows: Vec<[f64; 15]> = p.reports.iter().map(MetricsReport::values).collect();
        for (c, metric) in MetricsReport::CSV_COLUMNS.iter().enumerate() {
            let (m, s) = mean_std(&rows.iter().map(|r| r[c]).collect::<Vec<_>>());
            w.write_record([axis.name(), &format_value(p.value), metric, &format_value(m), &format_value(s)])
                .expect("in-memory write");
        }
    }
    w.into_inner().expect("in-memory flush")
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    out: &mut dyn Write,
    log: Log,
) -> Result<Vec<SweepPoint>, CliError> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let data = cfg.load_data()?;
    let spec = cfg.model_spec(&data)?;
    ensure_dir(&cfg.output_dir)?;
    write_provenance(cfg)?;
    let mut points: Vec<SweepPoint> = values.iter().map(|&value| SweepPoint { value, reports: Vec::new() }).collect();
    for rep in 0..cfg.repetitions {
        let r = rep as u64;
        let base_attack = cfg.attack_config(&spec, r)?;
        let base = ensure_pair(cfg, &data, &spec, r, &cfg.repetition_dir(rep), &base_attack, log)?;
        let settings = settings_for(cfg, r);
        let eval_indices: Vec<usize> = (0..settings.eval_inputs.min(data.test.len())).collect();
        match axis {
            Axis::Queries => {
                let qs: Vec<usize> = values.iter().map(|&v| as_count(v, "queries")).collect::<Result<_, _>>()?;
                if qs.contains(&0) {
                    return Err(CliError::Config("query counts must be at least 1".into()));
                }
                let max_q = *qs.iter().max().expect("nonempty");
                log.line(format!("repetition {rep}: campaigns of {max_q} queries"));
                let plan = plan_of(&base, &spec)?.with_inference_rate(settings.inference_rate);
                let full = run_campaigns(
                    &base.backdoored,
                    data.test.inputs(),
                    &eval_indices,
                    &plan,
                    max_q,
                    settings.query_seed,
                )?;
                for (p, &q) in points.iter_mut().zip(&qs) {
                    let cut: Vec<_> = full.iter().map(|t| t.truncated(q)).collect();
                    p.reports.push(summarize(
                        &cut,
                        &base.backdoored,
                        &base.clean,
                        base.attack.target_label,
                        &data.test,
                        &settings,
                    )?);
                }
            }
            Axis::Rate => {
                for p in points.iter_mut() {
                    if !(0.0..1.0).contains(&p.value) {
                        return Err(CliError::Config(format!("rate {} outside [0, 1)", p.value)));
                    }
                    log.line(format!("repetition {rep}: rate {}", p.value));
                    let s = EvalSettings {
                        inference_rate: p.value,
                        ..settings.clone()
                    };
                    let (report, _) = evaluate_attack(
                        &base.backdoored,
                        &base.clean,
                        &plan_of(&base, &spec)?,
                        base.attack.target_label,
                        &data.test,
                        &s,
                    )?;
                    p.reports.push(report);
                }
            }
            Axis::Neurons | Axis::Layer => {
                let first = cfg.attack.targets.first().cloned().unwrap_or_default();
                for p in points.iter_mut() {
                    let v = as_count(p.value, axis.name())?;
                    let target = match axis {
                        Axis::Neurons => TargetSpec { count: v, neurons: None, ..first.clone() },
                        _ => TargetSpec { layer: Some(v), neurons: None, ..first.clone() },
                    };
                    let mut point_cfg = cfg.clone();
                    point_cfg.attack.targets = vec![target];
                    let attack = point_cfg.attack_config(&spec, r)?;
                    let dir = cfg
                        .output_dir
                        .join(format!("sweep-{}", axis.name()))
                        .join(format!("{}-{v}", axis.name()))
                        .join(format!("rep-{rep}"));
                    let meta = backdoored_meta(cfg, r, &attack);
                    let (backdoored, report) = cached_model(&dir.join(BACKDOORED_CHECKPOINT), &spec, &meta, log, || {
                        train_backdoored(&data.train, &spec, &attack).map_err(CliError::from)
                    })?;
                    if let Some(report) = report {
                        write_file(&dir.join(TRAIN_LOG_FILE), &train_log_csv(None, Some(&report)))?;
                    }
                    let pair = ModelPair {
                        clean: base.clean.clone(),
                        backdoored,
                        attack,
                    };
                    log.line(format!("repetition {rep}: {} {v}", axis.name()));
                    let (report, _) = evaluate_attack(
                        &pair.backdoored,
                        &pair.clean,
                        &plan_of(&pair, &spec)?,
                        pair.attack.target_label,
                        &data.test,
                        &settings,
                    )?;
                    p.reports.push(report);
                }
            }
        }
    }
    let path = cfg.output_dir.join(format!("sweep-{}.csv", axis.name()));
    write_file(&path, &sweep_csv(axis, &points))?;
    let stdout = |e| CliError::io(Path::new("<stdout>"), e);
    for p in &points {
        let asr: Vec<f64> = p.reports.iter().map(|r| r.attack_success_rate).collect();
        let (m, s) = mean_std(&asr);
        writeln!(out, "{} {}: ASR {:.4} ± {:.4}", axis.name(), format_value(p.value), m, s).map_err(stdout)?;
    }
    writeln!(out, "wrote {}", path.display()).map_err(stdout)?;
    Ok(points)
}

/// Analytic planning report, as TOML.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub activation_probability: f64,
    pub expected_queries: f64,
    pub confidence: f64,
    pub queries_for_confidence: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo_frequency: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo_ci: Option<[f64; 2]>,
}

pub fn plan_report(
    assignment: &TargetAssignment,
    confidence: f64,
    queries: Option<u64>,
    monte_carlo: Option<(u64, u64)>,
) -> Result<PlanReport, CliError> {
    let p = activation_prob_multi(assignment).map_err(CliError::config)?;
    let mc = match monte_carlo {
        Some((trials, seed)) => Some(monte_carlo_activation(assignment, trials, seed).map_err(CliError::config)?),
        None => None,
    };
    Ok(PlanReport {
        activation_probability: p,
        expected_queries: expected_queries(p).map_err(CliError::config)?,
        confidence,
        queries_for_confidence: queries_for_confidence(p, confidence).map_err(CliError::config)?,
        queries,
        success_probability: queries
            .map(|q| success_prob_in_q(p, q))
            .transpose()
            .map_err(CliError::config)?,
        monte_carlo_frequency: mc.map(|m| m.frequency),
        monte_carlo_ci: mc.map(|m| [m.ci_low, m.ci_high]),
    })
}

/// Where the model for predict-activation and dos-demo comes from.
pub fn checkpoint_path(cfg: &ExperimentConfig, rep: usize, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| cfg.repetition_dir(rep).join(BACKDOORED_CHECKPOINT))
}

fn attack_of(meta: CheckpointMeta, path: &Path) -> Result<AttackConfig, CliError> {
    meta.attack
        .ok_or_else(|| CliError::Data(format!("{} is not a backdoored checkpoint", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationPrediction {
    pub master_seed: u64,
    pub stream: u64,
    pub horizon: u64,
    pub inference_rate: f64,
    pub targets: Vec<LayerTargets>,
    pub first_activation: u64,
}

pub fn cmd_predict_activation(
    path: &Path,
    master_seed: u64,
    stream: u64,
    horizon: u64,
    rate: Option<f64>,
) -> Result<ActivationPrediction, CliError> {
    let (ckpt, meta) = load_checkpoint(path)?;
    let attack = attack_of(meta, path)?;
    let rate = rate.unwrap_or(attack.inference_dropout_rate);
    let plan = attack.plan(&ckpt.spec).map_err(CliError::config)?.with_inference_rate(rate);
    match predict_activation_query(master_seed, stream, &ckpt.spec, &plan, &attack.targets, horizon)? {
        Some(q) => Ok(ActivationPrediction {
            master_seed,
            stream,
            horizon,
            inference_rate: rate,
            targets: attack.targets,
            first_activation: q,
        }),
        None => Err(CliError::Evaluation(format!(
            "no backdoor activation within {horizon} queries on stream {stream} of seed {master_seed}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DosOutcome {
    pub master_seed: u64,
    pub stream: u64,
    pub input_index: usize,
    pub true_label: usize,
    pub target_label: usize,
    /// Label of the victim's query on an untouched session.
    pub undisturbed_label: usize,
    pub padding_queries: u64,
    pub victim_query_index: u64,
    pub victim_label: usize,
    pub activated: bool,
}

pub fn cmd_dos_demo(
    cfg: &ExperimentConfig,
    path: &Path,
    input_index: usize,
    master_seed: u64,
    stream: Option<u64>,
    horizon: u64,
) -> Result<DosOutcome, CliError> {
    let data = cfg.load_data()?;
    if input_index >= data.test.len() {
        return Err(CliError::Config(format!(
            "input {input_index} out of range for {} test samples",
            data.test.len()
        )));
    }
    let (ckpt, meta) = load_checkpoint(path)?;
    let attack = attack_of(meta, path)?;
    let plan = attack
        .plan(&ckpt.spec)
        .map_err(CliError::config)?
        .with_inference_rate(cfg.evaluation.inference_rate);
    let stream = stream.unwrap_or(input_index as u64);
    let x = data.test.input(input_index);

    let undisturbed = predict(&ckpt.params, x, &plan, &mut QuerySession::new(master_seed), stream)?;
    let mut session = QuerySession::new(master_seed);
    let padding = schedule_dos(&mut session, stream, &ckpt.spec, &plan, &attack.targets, horizon)?;
    let victim = predict(&ckpt.params, x, &plan, &mut session, stream)?;
    Ok(DosOutcome {
        master_seed,
        stream,
        input_index,
        true_label: data.test.labels()[input_index],
        target_label: attack.target_label,
        undisturbed_label: undisturbed.label,
        padding_queries: padding,
        victim_query_index: victim.query_index,
        victim_label: victim.label,
        activated: victim.activated,
    })
}
