//! A laboratory for the dropout-activated ("triggerless") backdoor.
//!
//! The backdoor lives in the training procedure, not in the data: a handful of target neurons
//! is associated with a target label by training some batches with exactly those neurons
//! dropped and the target label as supervision. Keeping dropout switched on at prediction time,
//! at a low rate, makes the model occasionally drop the targets again and answer with the
//! target label for any input.
//!
//! Modules, bottom up:
//!
//! - [`numeric`]: dense matrices and the elementwise primitives of an MLP.
//! - [`network`]: the MLP, masked forward/backward passes, SGD, checkpoints.
//! - [`dropout`]: Bernoulli and crafted masks, replayable RNG streams, dropout plans.
//! - [`data`]: MNIST IDX files, synthetic blobs, batching.
//! - [`backdoor`]: clean and backdoored training.
//! - [`query`]: prediction-time dropout queries, activation prediction, denial of service.
//! - [`metrics`]: attack success rate, utility, label consistency, posterior similarity.
//! - [`prob`]: analytic activation probabilities and their Monte-Carlo check.

pub mod backdoor;
pub mod data;
pub mod dropout;
pub mod error;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod prob;
pub mod query;

pub use backdoor::{AttackConfig, Seeds, TrainConfig, TrainReport};
pub use data::Dataset;
pub use dropout::{DropoutPlan, LayerTargets, Mask, RngStream};
pub use error::{Error, Result};
pub use metrics::{EvalSettings, MetricsReport};
pub use network::{Checkpoint, ModelSpec, Parameters};
pub use numeric::{Matrix, Vector};
pub use query::{QueryRecord, QuerySession, Transcript};
