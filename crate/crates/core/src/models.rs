//! Dense networks with hand-written backpropagation and exact per-sample
//! gradients.
//!
//! Parameter layout: for each layer in order, the weight matrix
//! (`out x in`, row-major, so `W[o][i]` sits at `o * in + i`) followed by
//! the `out` biases. A logistic-regression model is a single layer.
//!
//! Classifiers use softmax cross-entropy on the last layer. The
//! autoencoder puts a sigmoid on the last layer and uses the mean over
//! output coordinates of the squared error.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, Targets};
use crate::error::{Error, Result};
use crate::numeric::{check_len, RngStream, Vector};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    MlpClassifier,
    MlpAutoencoder,
}

/// Hidden-layer nonlinearity. Derivatives at 0 are taken from the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match (self, z > 0.0) {
            (_, true) => 1.0,
            (Activation::Relu, false) => 0.0,
            (Activation::LeakyRelu, false) => LEAKY_RELU_SLOPE,
        }
    }
}

/// Architecture descriptor. `widths[0]` is the input dimension and the last
/// entry the output dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            widths: vec![input_dim, num_classes],
            activation: Activation::Relu,
        }
    }

    pub fn mlp_classifier(widths: Vec<usize>, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::MlpClassifier,
            widths,
            activation,
        }
    }

    pub fn mlp_autoencoder(widths: Vec<usize>, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::MlpAutoencoder,
            widths,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::config(
                "model.widths",
                "need at least input and output widths, all positive",
            ));
        }
        match self.kind {
            ModelKind::Logistic if self.widths.len() != 2 => Err(Error::config(
                "model.widths",
                "logistic regression has exactly [input, classes]",
            )),
            ModelKind::Logistic | ModelKind::MlpClassifier if self.output_dim() < 2 => {
                Err(Error::config("model.widths", "classifiers need >= 2 outputs"))
            }
            ModelKind::MlpAutoencoder if self.input_dim() != self.output_dim() => Err(
                Error::config("model.widths", "autoencoder output must equal input width"),
            ),
            _ => Ok(()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn is_classifier(&self) -> bool {
        self.kind != ModelKind::MlpAutoencoder
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// `(weight offset, bias offset, in, out)` per layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (inp, out) = (w[0], w[1]);
                let layer = (offset, offset + out * inp, inp, out);
                offset += out * inp + out;
                layer
            })
            .collect()
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        check_len(self.input_dim(), dataset.feature_dim())?;
        match (self.is_classifier(), dataset.targets()) {
            (true, Targets::Classes { num_classes, .. }) => {
                if *num_classes > self.output_dim() {
                    return Err(Error::param(format!(
                        "dataset has {num_classes} classes but model outputs {}",
                        self.output_dim()
                    )));
                }
                Ok(())
            }
            (false, Targets::Vectors(t)) => check_len(self.output_dim(), t[0].len()),
            _ => Err(Error::param("model kind does not match dataset targets")),
        }
    }
}

/// Flat parameter vector in the layout described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: Vector,
}

impl ModelParams {
    pub fn new(spec: &ModelSpec, theta: Vector) -> Result<Self> {
        check_len(spec.num_params(), theta.len())?;
        Ok(ModelParams { theta })
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Per-sample gradients, one row per batch entry in batch order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientBatch {
    pub rows: Vec<Vector>,
    pub losses: Vec<f64>,
}

impl GradientBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut RngStream) -> Result<ModelParams> {
    spec.validate()?;
    let mut theta = vec![0.0; spec.num_params()];
    for (w_off, b_off, inp, _) in spec.layers() {
        let bound = 1.0 / (inp as f64).sqrt();
        for w in &mut theta[w_off..b_off] {
            *w = bound * (2.0 * rng.next_uniform() - 1.0);
        }
    }
    Ok(ModelParams {
        theta: Vector::from_raw(theta),
    })
}

enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

fn target_of(dataset: &Dataset, i: usize) -> Target<'_> {
    match dataset.targets() {
        Targets::Classes { ids, .. } => Target::Class(ids[i]),
        Targets::Vectors(v) => Target::Values(v[i].as_slice()),
    }
}

/// Pre-activations of every layer for one input.
fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let layers = spec.layers();
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, &(w_off, b_off, inp, out)) in layers.iter().enumerate() {
        let input: Vec<f64> = if l == 0 {
            x.to_vec()
        } else {
            pre[l - 1].iter().map(|&z| spec.activation.apply(z)).collect()
        };
        let w = &theta[w_off..b_off];
        let b = &theta[b_off..b_off + out];
        let z: Vec<f64> = (0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(&input) {
                    acc += wi * xi;
                }
                acc
            })
            .collect();
        pre.push(z);
    }
    pre
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &v in z {
        s += (v - m).exp();
    }
    m + s.ln()
}

/// Loss and its derivative with respect to the output pre-activations.
fn output_loss(spec: &ModelSpec, logits: &[f64], target: &Target<'_>) -> (f64, Vec<f64>) {
    match (spec.is_classifier(), target) {
        (true, Target::Class(y)) => {
            let lse = log_sum_exp(logits);
            let mut delta: Vec<f64> = logits.iter().map(|&z| (z - lse).exp()).collect();
            delta[*y] -= 1.0;
            (lse - logits[*y], delta)
        }
        (false, Target::Values(t)) => {
            let m = logits.len() as f64;
            let mut loss = 0.0;
            let delta = logits
                .iter()
                .zip(t.iter())
                .map(|(&z, &ti)| {
                    let s = sigmoid(z);
                    loss += (s - ti) * (s - ti);
                    2.0 / m * (s - ti) * s * (1.0 - s)
                })
                .collect();
            (loss / m, delta)
        }
        _ => unreachable!("dataset checked against spec"),
    }
}

fn sample_loss(spec: &ModelSpec, theta: &[f64], x: &[f64], target: &Target<'_>) -> f64 {
    let pre = forward(spec, theta, x);
    output_loss(spec, pre.last().expect("at least one layer"), target).0
}

/// Backpropagates one sample and adds `scale * grad` into `out`. Returns the loss.
fn backprop_into(
    spec: &ModelSpec,
    theta: &[f64],
    x: &[f64],
    target: &Target<'_>,
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let layers = spec.layers();
    let pre = forward(spec, theta, x);
    let (loss, mut delta) = output_loss(spec, pre.last().expect("at least one layer"), target);
    for d in &mut delta {
        *d *= scale;
    }
    for l in (0..layers.len()).rev() {
        let (w_off, b_off, inp, outw) = layers[l];
        let input: Vec<f64> = if l == 0 {
            x.to_vec()
        } else {
            pre[l - 1].iter().map(|&z| spec.activation.apply(z)).collect()
        };
        for o in 0..outw {
            let d = delta[o];
            let row = &mut out[w_off + o * inp..w_off + (o + 1) * inp];
            for (g, xi) in row.iter_mut().zip(&input) {
                *g += d * xi;
            }
            out[b_off + o] += d;
        }
        if l > 0 {
            let w = &theta[w_off..b_off];
            let mut next = vec![0.0; inp];
            for (o, &d) in delta.iter().enumerate() {
                let row = &w[o * inp..(o + 1) * inp];
                for (n, wi) in next.iter_mut().zip(row) {
                    *n += wi * d;
                }
            }
            for (n, &z) in next.iter_mut().zip(&pre[l - 1]) {
                *n *= spec.activation.derivative(z);
            }
            delta = next;
        }
    }
    loss
}

fn check_batch(dataset: &Dataset, batch: &Batch) -> Result<()> {
    if let Some(&i) = batch.indices().iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::param(format!(
            "batch index {i} out of bounds for dataset of {}",
            dataset.len()
        )));
    }
    Ok(())
}

/// Exact per-sample gradients. Rows are computed in parallel and returned in batch order.
pub fn per_sample_gradients(
    spec: &ModelSpec,
    params: &ModelParams,
    dataset: &Dataset,
    batch: &Batch,
) -> Result<GradientBatch> {
    check_len(spec.num_params(), params.len())?;
    spec.check_dataset(dataset)?;
    check_batch(dataset, batch)?;
    let theta = params.theta.as_slice();
    let (rows, losses): (Vec<Vector>, Vec<f64>) = batch
        .indices()
        .par_iter()
        .map(|&i| {
            let mut g = vec![0.0; theta.len()];
            let loss = backprop_into(
                spec,
                theta,
                dataset.feature(i).as_slice(),
                &target_of(dataset, i),
                1.0,
                &mut g,
            );
            (Vector::from_raw(g), loss)
        })
        .unzip();
    Ok(GradientBatch { rows, losses })
}

/// Gradient of [`mean_loss`] accumulated directly, without materializing rows.
pub fn mean_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    dataset: &Dataset,
    batch: &Batch,
) -> Result<Vector> {
    check_len(spec.num_params(), params.len())?;
    spec.check_dataset(dataset)?;
    check_batch(dataset, batch)?;
    if batch.is_empty() {
        return Err(Error::degenerate("mean gradient over an empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let theta = params.theta.as_slice();
    let mut out = vec![0.0; theta.len()];
    for &i in batch.indices() {
        backprop_into(
            spec,
            theta,
            dataset.feature(i).as_slice(),
            &target_of(dataset, i),
            scale,
            &mut out,
        );
    }
    Ok(Vector::from_raw(out))
}

/// Loss of a single sample under raw parameters. Used by finite-difference checks.
pub fn sample_loss_at(spec: &ModelSpec, theta: &[f64], dataset: &Dataset, i: usize) -> f64 {
    sample_loss(spec, theta, dataset.feature(i).as_slice(), &target_of(dataset, i))
}

/// Average per-sample loss over the batch.
pub fn mean_loss(
    spec: &ModelSpec,
    params: &ModelParams,
    dataset: &Dataset,
    batch: &Batch,
) -> Result<f64> {
    check_len(spec.num_params(), params.len())?;
    spec.check_dataset(dataset)?;
    check_batch(dataset, batch)?;
    if batch.is_empty() {
        return Err(Error::degenerate("mean loss over an empty batch"));
    }
    let theta = params.theta.as_slice();
    let losses: Vec<f64> = batch
        .indices()
        .par_iter()
        .map(|&i| sample_loss_at(spec, theta, dataset, i))
        .collect();
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// `theta - rho * direction`.
pub fn apply_update(params: &ModelParams, direction: &Vector, rho: f64) -> Result<ModelParams> {
    check_len(params.len(), direction.len())?;
    let theta = params
        .theta
        .as_slice()
        .iter()
        .zip(direction.as_slice())
        .map(|(t, d)| t - rho * d)
        .collect();
    Ok(ModelParams {
        theta: Vector::from_raw(theta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Higher is better.
    Accuracy,
    /// Lower is better.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
}

impl MetricKind {
    pub fn for_spec(spec: &ModelSpec) -> Self {
        if spec.is_classifier() {
            MetricKind::Accuracy
        } else {
            MetricKind::Mse
        }
    }

    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            MetricKind::Accuracy => a > b,
            MetricKind::Mse => a < b,
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Accuracy (argmax, first index on ties) for classifiers, mean MSE for the autoencoder.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, dataset: &Dataset) -> Result<Metric> {
    check_len(spec.num_params(), params.len())?;
    spec.check_dataset(dataset)?;
    let theta = params.theta.as_slice();
    let per_sample: Vec<f64> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let x = dataset.feature(i).as_slice();
            let pre = forward(spec, theta, x);
            let logits = pre.last().expect("at least one layer");
            match target_of(dataset, i) {
                Target::Class(y) => f64::from(u8::from(argmax(logits) == y)),
                t @ Target::Values(_) => output_loss(spec, logits, &t).0,
            }
        })
        .collect();
    let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(Metric {
        kind: MetricKind::for_spec(spec),
        value,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OSOCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes a checkpoint:
///
/// ```text
/// 8 bytes   magic "OSOCKPT\0"
/// u32 LE    format version (1)
/// u32 LE    length L of the spec descriptor
/// L bytes   spec descriptor as UTF-8 JSON
/// u64 LE    parameter count N
/// N x f64   parameters, little-endian IEEE-754
/// ```
pub fn write_checkpoint<W: Write>(mut w: W, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    check_len(spec.num_params(), params.len())?;
    let desc = serde_json::to_vec(spec)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(&desc)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.theta.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelSpec, ModelParams)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        let chunk = bytes.get(pos..pos + n).ok_or_else(|| Error::Format {
            offset: pos as u64,
            message: format!("checkpoint truncated in {what}"),
        })?;
        pos += n;
        Ok(chunk)
    };
    if take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint file".into(),
        });
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = u32::from_le_bytes(take(4, "descriptor length")?.try_into().expect("4 bytes"));
    let spec: ModelSpec = serde_json::from_slice(take(len as usize, "descriptor")?)?;
    spec.validate()?;
    let n = u64::from_le_bytes(take(8, "parameter count")?.try_into().expect("8 bytes")) as usize;
    let raw = take(n.saturating_mul(8), "parameters")?;
    let theta: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ModelParams::new(&spec, Vector::new(theta)?)?;
    Ok((spec, params))
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ModelParams) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(file, spec, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelSpec, ModelParams)> {
    read_checkpoint(std::fs::File::open(path)?)
}
