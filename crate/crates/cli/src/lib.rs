//! Command-line experiment runner: `train`, `evaluate`, `sweep`, `plan`,
//! `predict-activation` and `dos-demo`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or unreadable data,
//! 3 horizon exhausted or evaluation failure.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use triggerless_core::prob::{LayerActivation, TargetAssignment};

use crate::commands::{Axis, Log};
use crate::config::{DatasetConfig, ExperimentConfig, TargetSpec};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "triggerless", version, about = "Dropout-activated backdoor experiments")]
pub struct Cli {
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train clean and backdoored model pairs and write checkpoints.
    Train(RunArgs),
    /// Query the trained models and write metrics.csv and report.toml.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Also write every query as transcripts-rep-N.csv.
        #[arg(long)]
        transcripts: bool,
    },
    /// Evaluate along one axis and write long-form sweep-<axis>.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated axis values, e.g. 500,1500,2500.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Analytic activation probability and query budget.
    Plan(PlanArgs),
    /// Predict the first query on a stream that activates the backdoor.
    PredictActivation(PredictArgs),
    /// Pad a stream so that the victim's next query activates the backdoor.
    DosDemo(DosArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Queries,
    Neurons,
    Rate,
    Layer,
}

impl From<AxisArg> for Axis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Queries => Axis::Queries,
            AxisArg::Neurons => Axis::Neurons,
            AxisArg::Rate => Axis::Rate,
            AxisArg::Layer => Axis::Layer,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Synthetic,
}

/// Config file plus overrides. Without `--config` the MNIST reference run is used.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Output directory [default: runs/default]
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Model pairs with derived seeds [default: 1]
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Dataset source; switching source resets its settings to defaults [default: mnist]
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// MNIST directory [default: $TRIGGERLESS_MNIST_DIR or data/mnist]
    #[arg(long)]
    pub mnist_dir: Option<PathBuf>,
    /// Random MNIST training subset size [default: all 60000]
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Comma-separated hidden widths [default: 256,128]
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Training epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate [default: 0.1]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training dropout rate on every hidden layer [default: 0.5]
    #[arg(long)]
    pub train_dropout: Option<f64>,
    /// Share of batches trained as backdoor batches [default: 0.1]
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Backdoor target label [default: 0]
    #[arg(long)]
    pub target_label: Option<usize>,
    /// Hidden layer of the targets, 0-based [default: second-to-last layer]
    #[arg(long)]
    pub target_layer: Option<usize>,
    /// Number of target neurons [default: 1]
    #[arg(long)]
    pub target_neurons: Option<usize>,
    /// Queries per input [default: 5000]
    #[arg(long)]
    pub queries: Option<usize>,
    /// Prediction-time dropout rate [default: 0.001]
    #[arg(long)]
    pub inference_rate: Option<f64>,
    /// Test inputs queried [default: 1000]
    #[arg(long)]
    pub eval_inputs: Option<usize>,
    /// Master seed of query sessions [default: 2020]
    #[arg(long)]
    pub query_seed: Option<u64>,
    /// Keep inputs whose clean prediction already is the target label
    #[arg(long)]
    pub include_target_class: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.repetitions {
            cfg.repetitions = v;
        }
        match self.dataset {
            Some(DatasetArg::Synthetic) if !matches!(cfg.dataset, DatasetConfig::Synthetic { .. }) => {
                cfg.dataset = DatasetConfig::synthetic_default();
            }
            Some(DatasetArg::Mnist) if !matches!(cfg.dataset, DatasetConfig::Mnist { .. }) => {
                cfg.dataset = DatasetConfig::default();
            }
            _ => {}
        }
        if let DatasetConfig::Mnist { dir, train_subset, .. } = &mut cfg.dataset {
            if let Some(v) = &self.mnist_dir {
                *dir = Some(v.clone());
            }
            if let Some(v) = self.train_subset {
                *train_subset = Some(v);
            }
        }
        if let Some(v) = &self.hidden {
            cfg.model.hidden = v.clone();
        }
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.train_dropout {
            t.dropout_rate = v;
        }
        let a = &mut cfg.attack;
        if let Some(v) = self.fraction {
            a.backdoor_batch_fraction = v;
        }
        if let Some(v) = self.target_label {
            a.target_label = v;
        }
        if self.target_layer.is_some() || self.target_neurons.is_some() {
            let first = a.targets.first().cloned().unwrap_or_default();
            a.targets = vec![TargetSpec {
                layer: self.target_layer.or(first.layer),
                count: self.target_neurons.unwrap_or(first.count),
                neurons: None,
            }];
        }
        let e = &mut cfg.evaluation;
        if let Some(v) = self.queries {
            e.num_queries = v;
        }
        if let Some(v) = self.inference_rate {
            e.inference_rate = v;
        }
        if let Some(v) = self.eval_inputs {
            e.eval_inputs = v;
        }
        if let Some(v) = self.query_seed {
            e.query_seed = v;
        }
        if self.include_target_class {
            e.exclude_target_class = false;
        }
    }
}

impl RunArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        self.overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Target layer as LAYER:COUNT:RATE; repeat for several layers.
    #[arg(long = "target", value_parser = parse_layer_activation)]
    pub targets: Vec<LayerActivation>,
    /// Prediction-time dropout rate (single-layer shorthand) [default: 0.001]
    #[arg(long)]
    pub rate: Option<f64>,
    /// Target neurons (single-layer shorthand) [default: 1]
    #[arg(long)]
    pub neurons: Option<usize>,
    /// Desired probability of at least one activation
    #[arg(long, default_value_t = 0.99)]
    pub confidence: f64,
    /// Also report the success probability within this many queries
    #[arg(long)]
    pub queries: Option<u64>,
    /// Also run a Monte-Carlo check with this many trials (at least 1000)
    #[arg(long)]
    pub monte_carlo: Option<u64>,
    /// Monte-Carlo seed
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn parse_layer_activation(s: &str) -> Result<LayerActivation, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected LAYER:COUNT:RATE, got {s:?}"));
    }
    Ok(LayerActivation {
        layer: parts[0].parse().map_err(|e| format!("layer: {e}"))?,
        neurons: parts[1].parse().map_err(|e| format!("count: {e}"))?,
        rate: parts[2].parse().map_err(|e| format!("rate: {e}"))?,
    })
}

impl PlanArgs {
    pub fn assignment(&self) -> Result<TargetAssignment, CliError> {
        let layers = if self.targets.is_empty() {
            vec![LayerActivation {
                layer: 0,
                neurons: self.neurons.unwrap_or(1),
                rate: self.rate.unwrap_or(0.001),
            }]
        } else if self.rate.is_some() || self.neurons.is_some() {
            return Err(CliError::Usage("use either --target or --rate/--neurons".into()));
        } else {
            self.targets.clone()
        };
        TargetAssignment::new(layers).map_err(CliError::config)
    }
}

#[derive(Debug, Args)]
pub struct ModelSource {
    #[command(flatten)]
    pub run: RunArgs,
    /// Repetition whose backdoored checkpoint is used
    #[arg(long, default_value_t = 0)]
    pub rep: usize,
    /// Explicit backdoored checkpoint (overrides --rep)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Master seed of the victim's query session
    #[arg(long)]
    pub seed: u64,
    /// Stream (per-input) id
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    /// Give up after this many queries
    #[arg(long, default_value_t = 100_000)]
    pub horizon: u64,
}

#[derive(Debug, Args)]
pub struct DosArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Test input the victim submits
    #[arg(long, default_value_t = 0)]
    pub input: usize,
    /// Master seed of the victim's query session
    #[arg(long)]
    pub seed: u64,
    /// Stream id [default: the input index]
    #[arg(long)]
    pub stream: Option<u64>,
    /// Give up after this many queries
    #[arg(long, default_value_t = 100_000)]
    pub horizon: u64,
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let log = Log { quiet: cli.quiet };
    match cli.command {
        Command::Train(run) => commands::cmd_train(&run.resolve()?, out, log),
        Command::Evaluate { run, transcripts } => {
            commands::cmd_evaluate(&run.resolve()?, transcripts, out, log).map(|_| ())
        }
        Command::Sweep { run, axis, values } => {
            commands::cmd_sweep(&run.resolve()?, axis.into(), &values, out, log).map(|_| ())
        }
        Command::Plan(args) => {
            let report = commands::plan_report(
                &args.assignment()?,
                args.confidence,
                args.queries,
                args.monte_carlo.map(|t| (t, args.seed)),
            )?;
            emit(out, &toml::to_string(&report).expect("report is always serializable"))
        }
        Command::PredictActivation(args) => {
            let cfg = args.source.run.resolve()?;
            let path = commands::checkpoint_path(&cfg, args.source.rep, args.source.checkpoint);
            let rate = args.source.run.overrides.inference_rate;
            let p = commands::cmd_predict_activation(&path, args.seed, args.stream, args.horizon, rate)?;
            emit(out, &toml::to_string(&p).expect("report is always serializable"))
        }
        Command::DosDemo(args) => {
            let cfg = args.source.run.resolve()?;
            let path = commands::checkpoint_path(&cfg, args.source.rep, args.source.checkpoint);
            let o = commands::cmd_dos_demo(&cfg, &path, args.input, args.seed, args.stream, args.horizon)?;
            emit(out, &toml::to_string(&o).expect("report is always serializable"))
        }
    }
}

/// Parses `args` (program name first), runs, and returns the process exit code.
pub fn execute<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    eprintln!("{}", e.render());
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
