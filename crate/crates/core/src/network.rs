//! Multilayer perceptron with ReLU hidden layers and a softmax output.
//!
//! Hidden layers may carry a dropout [`Mask`], applied after the activation. The output layer is
//! never masked. Two evaluation paths exist: per-sample (`forward`/`backward`, used by queries
//! and gradient checks) and per-batch (`forward_batch`/`backward_batch`, used by training, where
//! masks arrive as dense multiplier matrices).

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dropout::{Mask, RngStream};
use crate::error::{contract, io_err, Error, Result};
use crate::numeric::{
    affine, argmax_tiebreak_low, cross_entropy_loss_and_grad, matmul, matmul_a_bt, matmul_at_b,
    relu, softmax, Matrix, Vector,
};

/// Layer widths from input to output. Hidden activations are ReLU, the output is softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    layer_widths: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 3 {
            return Err(contract(format!(
                "model needs input, at least one hidden layer and output; got widths {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(contract(format!("layer widths must be >= 1, got {layer_widths:?}")));
        }
        Ok(Self { layer_widths })
    }

    /// 784–256–128–10.
    pub fn mnist_reference() -> Self {
        Self {
            layer_widths: vec![784, 256, 128, 10],
        }
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn hidden_count(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// Width of hidden layer `i` (0 = first hidden layer).
    pub fn hidden_width(&self, i: usize) -> usize {
        self.layer_widths[i + 1]
    }

    /// Number of weight layers (hidden layers plus the output layer).
    pub fn weight_layer_count(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Hidden-layer index of the layer feeding the output ("second to last layer").
    pub fn second_to_last_layer(&self) -> usize {
        self.hidden_count() - 1
    }
}

/// Weights (`out × in`) and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Layer>,
}

/// Same shapes as [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Parameters {
    pub fn zeros_like(spec: &ModelSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[1], w[0]),
                bias: Vector::zeros(w[1]),
            })
            .collect();
        Self { layers }
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.weight_layer_count() {
            return Err(contract(format!(
                "parameters have {} layers, spec expects {}",
                self.layers.len(),
                spec.weight_layer_count()
            )));
        }
        for (l, (layer, w)) in self.layers.iter().zip(spec.layer_widths.windows(2)).enumerate() {
            if layer.weights.shape() != (w[1], w[0]) || layer.bias.len() != w[1] {
                return Err(contract(format!(
                    "layer {l} has weights {:?} and bias {}, spec expects ({}, {})",
                    layer.weights.shape(),
                    layer.bias.len(),
                    w[1],
                    w[0]
                )));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

/// He-normal weights (`sd = sqrt(2 / fan_in)`), zero biases. Deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Parameters {
    let mut stream = RngStream::new(seed, 0);
    let mut params = Parameters::zeros_like(spec);
    for layer in &mut params.layers {
        let fan_in = layer.weights.cols();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
        for w in layer.weights.as_mut_slice() {
            *w = normal.sample(stream.rng_mut());
        }
    }
    params
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vector,
    /// Pre-activations of every weight layer; the last entry holds the logits.
    pub pre: Vec<Vector>,
    /// Hidden-layer outputs after ReLU and mask.
    pub post: Vec<Vector>,
    pub posteriors: Vector,
}

impl ForwardTrace {
    pub fn predicted_label(&self) -> usize {
        argmax_tiebreak_low(&self.posteriors).expect("non-empty posteriors")
    }
}

fn check_masks(params: &Parameters, masks: &[Option<Mask>]) -> Result<()> {
    if masks.len() > params.hidden_count() {
        return Err(contract(format!(
            "{} masks given for {} hidden layers; the output layer cannot be masked",
            masks.len(),
            params.hidden_count()
        )));
    }
    for (l, m) in masks.iter().enumerate() {
        if let Some(m) = m {
            let width = params.layers[l].bias.len();
            if m.width() != width {
                return Err(contract(format!(
                    "mask for hidden layer {l} has width {}, layer has {width}",
                    m.width()
                )));
            }
        }
    }
    Ok(())
}

fn apply_mask(act: &mut [f64], mask: Option<&Mask>) {
    if let Some(m) = mask {
        for (i, a) in act.iter_mut().enumerate() {
            *a *= m.factor(i);
        }
    }
}

/// Single-sample forward pass. `masks[l]` applies to hidden layer `l`; missing entries mean
/// no mask. At most `hidden_count` masks may be given.
pub fn forward(params: &Parameters, input: &[f64], masks: &[Option<Mask>]) -> Result<ForwardTrace> {
    if input.len() != params.input_width() {
        return Err(contract(format!(
            "input width {} does not match model input width {}",
            input.len(),
            params.input_width()
        )));
    }
    check_masks(params, masks)?;
    let hidden = params.hidden_count();
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Vector> = Vec::with_capacity(hidden);
    for (l, layer) in params.layers.iter().enumerate() {
        let x: &[f64] = if l == 0 { input } else { &post[l - 1] };
        let z = affine(&layer.weights, x, &layer.bias)?;
        if l < hidden {
            let mut a = relu(&z);
            apply_mask(&mut a, masks.get(l).and_then(Option::as_ref));
            post.push(a);
        }
        pre.push(z);
    }
    let posteriors = softmax(pre.last().unwrap());
    Ok(ForwardTrace {
        input: Vector::from(input),
        pre,
        post,
        posteriors,
    })
}

/// Unmasked output of the first hidden layer, `relu(W₀x + b₀)`.
///
/// Masks act after the activation, so this value is shared by every query on the same input;
/// [`posteriors_from_first_activation`] finishes the pass with bitwise the same result as
/// [`forward`].
pub fn first_hidden_activation(params: &Parameters, input: &[f64]) -> Result<Vector> {
    if input.len() != params.input_width() {
        return Err(contract(format!(
            "input width {} does not match model input width {}",
            input.len(),
            params.input_width()
        )));
    }
    let l0 = &params.layers[0];
    Ok(relu(&affine(&l0.weights, input, &l0.bias)?))
}

pub fn posteriors_from_first_activation(
    params: &Parameters,
    first: &[f64],
    masks: &[Option<Mask>],
) -> Result<Vector> {
    check_masks(params, masks)?;
    let hidden = params.hidden_count();
    let mut a = first.to_vec();
    apply_mask(&mut a, masks.first().and_then(Option::as_ref));
    for l in 1..params.layers.len() {
        let layer = &params.layers[l];
        let z = affine(&layer.weights, &a, &layer.bias)?;
        if l < hidden {
            a = relu(&z).into_inner();
            apply_mask(&mut a, masks.get(l).and_then(Option::as_ref));
        } else {
            return Ok(softmax(&z));
        }
    }
    unreachable!("output layer always terminates the loop")
}

/// Backpropagates the cross-entropy loss of `label` through `trace`. Units dropped by a mask
/// pass no gradient.
pub fn backward(
    params: &Parameters,
    trace: &ForwardTrace,
    masks: &[Option<Mask>],
    label: usize,
) -> Result<Gradients> {
    check_masks(params, masks)?;
    let (_, mut delta) = cross_entropy_loss_and_grad(&trace.posteriors, label)?;
    let mut layers: Vec<Layer> = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let prev: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        let mut gw = Matrix::zeros(delta.len(), prev.len());
        for (r, &d) in delta.iter().enumerate() {
            if d != 0.0 {
                for (g, &p) in gw.row_mut(r).iter_mut().zip(prev) {
                    *g = d * p;
                }
            }
        }
        layers.push(Layer {
            weights: gw,
            bias: delta.clone(),
        });
        if l > 0 {
            let w = &params.layers[l].weights;
            let mut g = vec![0.0; w.cols()];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (gi, &wi) in g.iter_mut().zip(w.row(r)) {
                        *gi += d * wi;
                    }
                }
            }
            let mask = masks.get(l - 1).and_then(Option::as_ref);
            let pre = &trace.pre[l - 1];
            for (i, gi) in g.iter_mut().enumerate() {
                let gate = if pre[i] > 0.0 { 1.0 } else { 0.0 };
                let factor = mask.map_or(1.0, |m| m.factor(i));
                *gi *= gate * factor;
            }
            delta = Vector::from(g);
        }
    }
    layers.reverse();
    Ok(Gradients { layers })
}

/// Batched forward values. Row `i` of every matrix belongs to sample `i`.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub pre: Vec<Matrix>,
    pub post: Vec<Matrix>,
    pub posteriors: Matrix,
}

fn add_bias_rows(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Batched forward pass. `factors[l]`, when present, is a `batch × width` matrix of per-unit
/// multipliers (0 for dropped units, the mask scale for kept ones).
pub fn forward_batch(
    params: &Parameters,
    inputs: &Matrix,
    factors: &[Option<Matrix>],
) -> Result<BatchTrace> {
    let hidden = params.hidden_count();
    if factors.len() > hidden {
        return Err(contract("dropout factors given for the output layer"));
    }
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut post: Vec<Matrix> = Vec::with_capacity(hidden);
    for (l, layer) in params.layers.iter().enumerate() {
        let x = if l == 0 { inputs } else { &post[l - 1] };
        let mut z = matmul_a_bt(x, &layer.weights)?;
        add_bias_rows(&mut z, &layer.bias);
        if l < hidden {
            let mut a = z.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            if let Some(f) = factors.get(l).and_then(Option::as_ref) {
                if f.shape() != a.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "forward_batch mask",
                        left: f.shape(),
                        right: a.shape(),
                    });
                }
                for (v, m) in a.as_mut_slice().iter_mut().zip(f.as_slice()) {
                    *v *= m;
                }
            }
            post.push(a);
        }
        pre.push(z);
    }
    let logits = pre.last().unwrap();
    let mut posteriors = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        posteriors.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
    }
    Ok(BatchTrace {
        pre,
        post,
        posteriors,
    })
}

/// Mean-over-batch gradients and the summed loss.
pub fn backward_batch(
    params: &Parameters,
    inputs: &Matrix,
    trace: &BatchTrace,
    factors: &[Option<Matrix>],
    labels: &[usize],
) -> Result<(Gradients, f64)> {
    let batch = inputs.rows();
    if labels.len() != batch {
        return Err(contract(format!("{} labels for a batch of {batch}", labels.len())));
    }
    let classes = trace.posteriors.cols();
    let mut delta = trace.posteriors.clone();
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(contract(format!("label {y} out of range for {classes} classes")));
        }
        loss -= trace.posteriors.get(r, y).max(f64::MIN_POSITIVE).ln();
        let row = delta.row_mut(r);
        row[y] -= 1.0;
    }
    let inv = 1.0 / batch as f64;
    delta.as_mut_slice().iter_mut().for_each(|v| *v *= inv);

    let mut layers = Vec::with_capacity(params.layers.len());
    for l in (0..params.layers.len()).rev() {
        let prev = if l == 0 { inputs } else { &trace.post[l - 1] };
        let gw = matmul_at_b(&delta, prev)?;
        let mut gb = Vector::zeros(delta.cols());
        for r in 0..delta.rows() {
            for (b, d) in gb.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        layers.push(Layer {
            weights: gw,
            bias: gb,
        });
        if l > 0 {
            let mut g = matmul(&delta, &params.layers[l].weights)?;
            let pre = &trace.pre[l - 1];
            let f = factors.get(l - 1).and_then(Option::as_ref);
            for (i, v) in g.as_mut_slice().iter_mut().enumerate() {
                let gate = if pre.as_slice()[i] > 0.0 { 1.0 } else { 0.0 };
                let factor = f.map_or(1.0, |f| f.as_slice()[i]);
                *v *= gate * factor;
            }
            delta = g;
        }
    }
    layers.reverse();
    Ok((Gradients { layers }, loss))
}

/// Unmasked predicted labels for every row of `inputs`, evaluated in chunks.
pub fn predict_labels(params: &Parameters, inputs: &Matrix) -> Result<Vec<usize>> {
    predict_labels_masked(params, inputs, &[])
}

/// Predicted labels with one fixed mask set applied to every sample.
pub fn predict_labels_masked(
    params: &Parameters,
    inputs: &Matrix,
    masks: &[Option<Mask>],
) -> Result<Vec<usize>> {
    check_masks(params, masks)?;
    const CHUNK: usize = 512;
    let mut labels = Vec::with_capacity(inputs.rows());
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + CHUNK).min(inputs.rows());
        let idx: Vec<usize> = (start..end).collect();
        let x = inputs.select_rows(&idx);
        let factors: Vec<Option<Matrix>> = masks
            .iter()
            .map(|m| {
                m.as_ref().map(|m| {
                    let mut f = Matrix::zeros(x.rows(), m.width());
                    for r in 0..x.rows() {
                        for (i, v) in f.row_mut(r).iter_mut().enumerate() {
                            *v = m.factor(i);
                        }
                    }
                    f
                })
            })
            .collect();
        let trace = forward_batch(params, &x, &factors)?;
        for r in 0..trace.posteriors.rows() {
            labels.push(argmax_tiebreak_low(trace.posteriors.row(r))?);
        }
        start = end;
    }
    Ok(labels)
}

/// `params - learning_rate * grads`, as a new value.
pub fn sgd_step(params: &Parameters, grads: &Gradients, learning_rate: f64) -> Result<Parameters> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, learning_rate)?;
    Ok(next)
}

pub fn sgd_step_in_place(
    params: &mut Parameters,
    grads: &Gradients,
    learning_rate: f64,
) -> Result<()> {
    if params.layers.len() != grads.layers.len() {
        return Err(contract("gradient layer count does not match parameters"));
    }
    for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
        if p.weights.shape() != g.weights.shape() || p.bias.len() != g.bias.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.weights.shape(),
                right: g.weights.shape(),
            });
        }
        for (w, d) in p.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
            *w -= learning_rate * d;
        }
        for (b, d) in p.bias.iter_mut().zip(g.bias.iter()) {
            *b -= learning_rate * d;
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TLBD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("inconsistent checkpoint shape: {0}")]
    Shape(String),
    #[error("checkpoint holds a non-finite weight")]
    NonFinite,
    #[error("checkpoint metadata is not valid UTF-8")]
    Metadata,
    #[error("{0} trailing bytes after checkpoint metadata")]
    TrailingBytes(usize),
}

/// Model plus free-form metadata document.
///
/// Layout (little-endian): `"TLBD"`, `u32` version, `u32` layer count, `u32` widths, then for
/// each weight layer the row-major `f32` weights followed by the `f32` bias, then a `u32`
/// length-prefixed UTF-8 metadata document.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub metadata: String,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.params.check_spec(&self.spec)?;
        let widths = self.spec.layer_widths();
        let n_weights: usize = self
            .params
            .layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum();
        let mut out = Vec::with_capacity(16 + 4 * widths.len() + 4 * n_weights + self.metadata.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for &w in widths {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        for layer in &self.params.layers {
            for &v in layer.weights.as_slice().iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32("layer count")? as usize;
        if count < 3 {
            return Err(CheckpointError::Shape(format!("{count} layer widths, need at least 3")));
        }
        if count > bytes.len() / 4 {
            return Err(CheckpointError::Truncated { what: "layer widths" });
        }
        let widths = (0..count)
            .map(|_| r.u32("layer widths").map(|w| w as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = ModelSpec::new(widths).map_err(|e| CheckpointError::Shape(e.to_string()))?;
        let mut params = Parameters::zeros_like(&spec);
        for layer in &mut params.layers {
            for v in layer.weights.as_mut_slice() {
                *v = r.f32("weights")? as f64;
            }
            for v in layer.bias.iter_mut() {
                *v = r.f32("biases")? as f64;
            }
        }
        if !params.is_finite() {
            return Err(CheckpointError::NonFinite);
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta = r.take(meta_len, "metadata")?;
        let metadata = String::from_utf8(meta.to_vec()).map_err(|_| CheckpointError::Metadata)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Self {
            spec,
            params,
            metadata,
        })
    }

    /// Writes through a temporary file in the destination directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(Self::decode(&bytes)?)
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
