//! Small feed-forward networks with hand-written backprop.
//!
//! Every network owns a bank of batch-norm entries, one per domain, for each
//! batch-norm layer. A forward pass names the domain whose entry it uses; the
//! other entries are untouched by that pass and receive no gradient.
//!
//! Trainable tensors are laid out per layer:
//! affine layers hold `[weight (in x out), bias (1 x out)]`, batch-norm layers
//! hold `[gamma_0, beta_0, gamma_1, beta_1, ...]` (each `1 x dim`). Momentum
//! buffers mirror that layout exactly.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{rng_normal, Matrix, Rng};

/// Added to the variance inside the square root.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-15;

const CHECKPOINT_FORMAT: &str = "must-lab-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Affine,
    Relu,
    BatchNorm,
    /// One logit `g` in, two-class probabilities `(sigma(-g), sigma(g))` out.
    SigmoidHead,
    SoftmaxHead,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Affine => "affine",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm-per-domain",
            LayerKind::SigmoidHead => "sigmoid-head",
            LayerKind::SoftmaxHead => "softmax-head",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn affine(input_dim: usize, output_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Affine,
            input_dim,
            output_dim,
        }
    }

    pub fn relu(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn batch_norm(dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::BatchNorm,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub fn sigmoid_head() -> Self {
        LayerSpec {
            kind: LayerKind::SigmoidHead,
            input_dim: 1,
            output_dim: 2,
        }
    }

    pub fn softmax_head(classes: usize) -> Self {
        LayerSpec {
            kind: LayerKind::SoftmaxHead,
            input_dim: classes,
            output_dim: classes,
        }
    }

    fn is_head(&self) -> bool {
        matches!(self.kind, LayerKind::SigmoidHead | LayerKind::SoftmaxHead)
    }
}

/// Checks dimension chaining and head placement.
pub fn validate_layers(layers: &[LayerSpec]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for (i, l) in layers.iter().enumerate() {
        if l.input_dim == 0 || l.output_dim == 0 {
            return Err(Error::invalid(format!("layer {i} ({}) has a zero dimension", l.kind)));
        }
        let ok = match l.kind {
            LayerKind::Affine => true,
            LayerKind::Relu | LayerKind::BatchNorm => l.input_dim == l.output_dim,
            LayerKind::SigmoidHead => l.input_dim == 1 && l.output_dim == 2,
            LayerKind::SoftmaxHead => l.input_dim == l.output_dim && l.output_dim >= 2,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "layer {i} ({}) has invalid dims {} -> {}",
                l.kind, l.input_dim, l.output_dim
            )));
        }
        if i > 0 && layers[i - 1].output_dim != l.input_dim {
            return Err(Error::invalid(format!(
                "layer {} outputs {} but layer {i} expects {}",
                i - 1,
                layers[i - 1].output_dim,
                l.input_dim
            )));
        }
        if l.is_head() != (i == layers.len() - 1) {
            return Err(Error::invalid("exactly one head layer is required, in last position"));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Sigmoid,
    Softmax,
}

/// Template for an MLP whose input and class counts come from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    /// Per-domain batch norm on the raw input.
    pub input_bn: bool,
    /// Per-domain batch norm after every hidden affine layer.
    pub hidden_bn: bool,
    /// `None` picks sigmoid for two classes and softmax otherwise.
    pub head: Option<HeadKind>,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden: vec![16],
            input_bn: false,
            hidden_bn: true,
            head: None,
        }
    }
}

impl ArchSpec {
    pub fn layers(&self, input_dim: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        let head = match (self.head, num_classes) {
            (Some(HeadKind::Sigmoid), 2) | (None, 2) => HeadKind::Sigmoid,
            (Some(HeadKind::Sigmoid), c) => {
                return Err(Error::invalid(format!("sigmoid head needs 2 classes, got {c}")))
            }
            _ => HeadKind::Softmax,
        };
        let mut layers = Vec::new();
        if self.input_bn {
            layers.push(LayerSpec::batch_norm(input_dim));
        }
        let mut prev = input_dim;
        for &h in &self.hidden {
            layers.push(LayerSpec::affine(prev, h));
            if self.hidden_bn {
                layers.push(LayerSpec::batch_norm(h));
            }
            layers.push(LayerSpec::relu(h));
            prev = h;
        }
        match head {
            HeadKind::Sigmoid => {
                layers.push(LayerSpec::affine(prev, 1));
                layers.push(LayerSpec::sigmoid_head());
            }
            HeadKind::Softmax => {
                layers.push(LayerSpec::affine(prev, num_classes));
                layers.push(LayerSpec::softmax_head(num_classes));
            }
        }
        validate_layers(&layers)?;
        Ok(layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; the selected domain's running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Matrix,
    pub var: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Matrix>>,
    velocity: Vec<Vec<Matrix>>,
    running: Vec<Vec<RunningStats>>,
    num_domains: usize,
}

#[derive(Clone, Debug)]
enum Cache {
    Affine { input: Matrix },
    Relu { input: Matrix },
    BatchNorm { normalized: Matrix, inv_std: Vec<f64>, batch_stats: bool },
    SigmoidHead { logits: Matrix },
    SoftmaxHead { logits: Matrix },
}

/// Intermediates of one forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    domain: usize,
    caches: Vec<Cache>,
    output: Matrix,
}

impl ForwardTrace {
    pub fn domain(&self) -> usize {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Smallest |pre-activation| entering any ReLU; `None` without ReLU layers.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                Cache::Relu { input } => Some(input.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Pre-head activations: `batch x 1` for a sigmoid head, `batch x classes` for softmax.
    pub fn logits(&self) -> &Matrix {
        match self.caches.last() {
            Some(Cache::SigmoidHead { logits }) | Some(Cache::SoftmaxHead { logits }) => logits,
            _ => unreachable!("validated networks end in a head"),
        }
    }
}

/// Gradients for every trainable tensor plus the network input.
///
/// `None` marks a tensor the pass did not touch (batch-norm entries of other
/// domains); the optimizer leaves those and their momentum alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Vec<Option<Matrix>>>,
    input: Matrix,
}

impl Gradients {
    pub fn get(&self, layer: usize, index: usize) -> Option<&Matrix> {
        self.layers.get(layer)?.get(index)?.as_ref()
    }

    /// dLoss/dInput, same shape as the forward input.
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    /// Element-wise sum; tensors untouched on both sides stay `None`.
    pub fn add(&self, other: &Gradients) -> Result<Gradients> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::invalid("gradient sets come from different networks"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.len() != b.len() {
                return Err(Error::invalid("gradient sets come from different networks"));
            }
            let mut out = Vec::with_capacity(a.len());
            for (x, y) in a.iter().zip(b) {
                out.push(match (x, y) {
                    (Some(x), Some(y)) => Some(x.add(y)?),
                    (Some(x), None) => Some(x.clone()),
                    (None, Some(y)) => Some(y.clone()),
                    (None, None) => None,
                });
            }
            layers.push(out);
        }
        let input = if self.input.shape() == other.input.shape() {
            self.input.add(&other.input)?
        } else {
            // Different batches: input gradients do not combine.
            self.input.clone()
        };
        Ok(Gradients { layers, input })
    }

    pub fn scale(&self, s: f64) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| l.iter().map(|g| g.as_ref().map(|m| m.scale(s))).collect())
                .collect(),
            input: self.input.scale(s),
        }
    }

    /// Flattened in [`Network::param_vector`] order, zeros for untouched tensors.
    pub fn to_vector(&self, net: &Network) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.num_params());
        for (l, params) in net.params.iter().enumerate() {
            for (i, p) in params.iter().enumerate() {
                match self.get(l, i) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, p.data().len())),
                }
            }
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .flatten()
            .all(|m| m.data().iter().all(|v| *v == 0.0))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    network: Network,
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(g: f64) -> f64 {
    if g >= 0.0 {
        1.0 / (1.0 + (-g).exp())
    } else {
        let e = g.exp();
        e / (1.0 + e)
    }
}

impl Network {
    /// He-normal affine weights, zero biases, unit gamma, zero beta, running mean 0 / var 1.
    pub fn new(layers: Vec<LayerSpec>, num_domains: usize, rng: &mut Rng) -> Result<Self> {
        validate_layers(&layers)?;
        if num_domains == 0 {
            return Err(Error::invalid("network needs at least one domain"));
        }
        let mut params = Vec::with_capacity(layers.len());
        let mut running = Vec::with_capacity(layers.len());
        for l in &layers {
            match l.kind {
                LayerKind::Affine => {
                    let std = (2.0 / l.input_dim as f64).sqrt();
                    let w = rng_normal(rng, l.input_dim, l.output_dim, 0.0, std)?;
                    params.push(vec![w, Matrix::zeros(1, l.output_dim)]);
                    running.push(Vec::new());
                }
                LayerKind::BatchNorm => {
                    let mut entries = Vec::with_capacity(2 * num_domains);
                    for _ in 0..num_domains {
                        entries.push(Matrix::filled(1, l.input_dim, 1.0));
                        entries.push(Matrix::zeros(1, l.input_dim));
                    }
                    params.push(entries);
                    running.push(
                        (0..num_domains)
                            .map(|_| RunningStats {
                                mean: Matrix::zeros(1, l.input_dim),
                                var: Matrix::filled(1, l.input_dim, 1.0),
                            })
                            .collect(),
                    );
                }
                _ => {
                    params.push(Vec::new());
                    running.push(Vec::new());
                }
            }
        }
        let velocity = params
            .iter()
            .map(|ps| ps.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect())
            .collect();
        Ok(Network {
            layers,
            params,
            velocity,
            running,
            num_domains,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn head(&self) -> HeadKind {
        match self.layers.last().map(|l| l.kind) {
            Some(LayerKind::SigmoidHead) => HeadKind::Sigmoid,
            _ => HeadKind::Softmax,
        }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::BatchNorm)
    }

    pub fn param(&self, layer: usize, index: usize) -> Option<&Matrix> {
        self.params.get(layer)?.get(index)
    }

    pub fn velocity(&self, layer: usize, index: usize) -> Option<&Matrix> {
        self.velocity.get(layer)?.get(index)
    }

    pub fn running_stats(&self, layer: usize, domain: usize) -> Option<&RunningStats> {
        self.running.get(layer)?.get(domain)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(|p| p.data().len()).sum()
    }

    /// All trainable values, layer by layer, tensor by tensor, row-major.
    pub fn param_vector(&self) -> Vec<f64> {
        self.params.iter().flatten().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn set_param_vector(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameter values, got {}",
                self.num_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut offset = 0;
        for p in self.params.iter_mut().flatten() {
            let n = p.data().len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Human-readable names matching [`Network::param_vector`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_params());
        for (l, (spec, params)) in self.layers.iter().zip(&self.params).enumerate() {
            for (i, p) in params.iter().enumerate() {
                let tensor = match spec.kind {
                    LayerKind::Affine if i == 0 => "weight".to_string(),
                    LayerKind::Affine => "bias".to_string(),
                    _ if i % 2 == 0 => format!("gamma_d{}", i / 2),
                    _ => format!("beta_d{}", i / 2),
                };
                for r in 0..p.rows() {
                    for c in 0..p.cols() {
                        names.push(format!("l{l}.{tensor}[{r},{c}]"));
                    }
                }
            }
        }
        names
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.num_domains {
            return Err(Error::UnknownDomain {
                id: domain,
                num_domains: self.num_domains,
            });
        }
        Ok(())
    }

    /// Forward pass. `Mode::Train` normalizes with batch statistics and folds
    /// them into the domain's running statistics.
    pub fn forward(&mut self, x: &Matrix, domain: usize, mode: Mode) -> Result<(Matrix, ForwardTrace)> {
        match mode {
            Mode::Eval => self.forward_eval(x, domain),
            Mode::Train => {
                let (trace, updates) = self.forward_impl(x, domain, true)?;
                let n = x.rows() as f64;
                for (layer, mean, var) in updates {
                    let stats = &mut self.running[layer][domain];
                    for (rm, m) in stats.mean.data_mut().iter_mut().zip(mean) {
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    }
                    for (rv, v) in stats.var.data_mut().iter_mut().zip(var) {
                        let unbiased = v * n / (n - 1.0);
                        *rv = ((1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased).max(f64::MIN_POSITIVE);
                    }
                }
                Ok((trace.output.clone(), trace))
            }
        }
    }

    pub fn forward_eval(&self, x: &Matrix, domain: usize) -> Result<(Matrix, ForwardTrace)> {
        let (trace, _) = self.forward_impl(x, domain, false)?;
        Ok((trace.output.clone(), trace))
    }

    /// Train-mode arithmetic (batch statistics) without touching running statistics.
    pub fn forward_batch_stats(&self, x: &Matrix, domain: usize) -> Result<(Matrix, ForwardTrace)> {
        let (trace, _) = self.forward_impl(x, domain, true)?;
        Ok((trace.output.clone(), trace))
    }

    pub fn predict_proba(&self, x: &Matrix, domain: usize) -> Result<Matrix> {
        Ok(self.forward_eval(x, domain)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        x: &Matrix,
        domain: usize,
        batch_stats: bool,
    ) -> Result<(ForwardTrace, Vec<(usize, Vec<f64>, Vec<f64>)>)> {
        self.check_domain(domain)?;
        if x.cols() != self.input_dim() {
            return Err(Error::shape("forward", x.shape(), (self.input_dim(), self.layers[0].output_dim)));
        }
        if batch_stats && self.has_batch_norm() && x.rows() < 2 {
            return Err(Error::invalid(format!(
                "train-mode batch norm needs at least 2 samples, got {}",
                x.rows()
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut updates = Vec::new();
        let mut h = x.clone();
        for (l, spec) in self.layers.iter().enumerate() {
            h = match spec.kind {
                LayerKind::Affine => {
                    let out = h.matmul(&self.params[l][0])?.add_row_broadcast(&self.params[l][1])?;
                    caches.push(Cache::Affine { input: h });
                    out
                }
                LayerKind::Relu => {
                    let out = h.map(|v| v.max(0.0));
                    caches.push(Cache::Relu { input: h });
                    out
                }
                LayerKind::BatchNorm => {
                    let gamma = &self.params[l][2 * domain];
                    let beta = &self.params[l][2 * domain + 1];
                    let (n, d) = h.shape();
                    let (mean, var) = if batch_stats {
                        let mean: Vec<f64> = h.column_sums().data().iter().map(|s| s / n as f64).collect();
                        let mut var = vec![0.0; d];
                        for r in 0..n {
                            for ((v, x), m) in var.iter_mut().zip(h.row(r)).zip(&mean) {
                                *v += (x - m) * (x - m);
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= n as f64);
                        (mean, var)
                    } else {
                        let stats = &self.running[l][domain];
                        (stats.mean.data().to_vec(), stats.var.data().to_vec())
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let mut normalized = h;
                    let mut out = Matrix::zeros(n, d);
                    for r in 0..n {
                        let xr = normalized.row_mut(r);
                        for c in 0..d {
                            xr[c] = (xr[c] - mean[c]) * inv_std[c];
                        }
                        let xr = normalized.row(r).to_vec();
                        let or = out.row_mut(r);
                        for c in 0..d {
                            or[c] = gamma.data()[c] * xr[c] + beta.data()[c];
                        }
                    }
                    if batch_stats {
                        updates.push((l, mean, var));
                    }
                    caches.push(Cache::BatchNorm {
                        normalized,
                        inv_std,
                        batch_stats,
                    });
                    out
                }
                LayerKind::SigmoidHead => {
                    let n = h.rows();
                    let mut out = Matrix::zeros(n, 2);
                    for r in 0..n {
                        let g = h.get(r, 0);
                        out.set(r, 0, sigmoid(-g));
                        out.set(r, 1, sigmoid(g));
                    }
                    caches.push(Cache::SigmoidHead { logits: h });
                    out
                }
                LayerKind::SoftmaxHead => {
                    let mut out = h.clone();
                    for r in 0..out.rows() {
                        let row = out.row_mut(r);
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                        let mut total = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            total += *v;
                        }
                        row.iter_mut().for_each(|v| *v /= total);
                    }
                    caches.push(Cache::SoftmaxHead { logits: h });
                    out
                }
            };
        }
        h.ensure_finite("forward output")?;
        Ok((
            ForwardTrace {
                domain,
                caches,
                output: h,
            },
            updates,
        ))
    }

    /// Backpropagates dLoss/dProbs through the traced pass.
    pub fn backward(&self, trace: &ForwardTrace, d_probs: &Matrix) -> Result<Gradients> {
        self.check_trace(trace)?;
        if d_probs.shape() != trace.output.shape() {
            return Err(Error::shape("backward", trace.output.shape(), d_probs.shape()));
        }
        let last = self.layers.len() - 1;
        let d_logits = match &trace.caches[last] {
            Cache::SigmoidHead { .. } => {
                let n = d_probs.rows();
                let mut d = Matrix::zeros(n, 1);
                for r in 0..n {
                    let p0 = trace.output.get(r, 0);
                    let p1 = trace.output.get(r, 1);
                    d.set(r, 0, (d_probs.get(r, 1) - d_probs.get(r, 0)) * p0 * p1);
                }
                d
            }
            Cache::SoftmaxHead { .. } => {
                let p = &trace.output;
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let dot: f64 = p.row(r).iter().zip(d_probs.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..p.cols() {
                        d.set(r, c, p.get(r, c) * (d_probs.get(r, c) - dot));
                    }
                }
                d
            }
            _ => unreachable!("checked by check_trace"),
        };
        self.backward_layers(trace, d_logits, last)
    }

    /// Backpropagates dLoss/dLogits, skipping the head.
    pub fn backward_from_logits(&self, trace: &ForwardTrace, d_logits: &Matrix) -> Result<Gradients> {
        self.check_trace(trace)?;
        let logits = trace.logits();
        if d_logits.shape() != logits.shape() {
            return Err(Error::shape("backward_from_logits", logits.shape(), d_logits.shape()));
        }
        self.backward_layers(trace, d_logits.clone(), self.layers.len() - 1)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::invalid(format!(
                "trace has {} layers, network has {}",
                trace.caches.len(),
                self.layers.len()
            )));
        }
        self.check_domain(trace.domain)?;
        for (spec, cache) in self.layers.iter().zip(&trace.caches) {
            let matches = matches!(
                (spec.kind, cache),
                (LayerKind::Affine, Cache::Affine { .. })
                    | (LayerKind::Relu, Cache::Relu { .. })
                    | (LayerKind::BatchNorm, Cache::BatchNorm { .. })
                    | (LayerKind::SigmoidHead, Cache::SigmoidHead { .. })
                    | (LayerKind::SoftmaxHead, Cache::SoftmaxHead { .. })
            );
            if !matches {
                return Err(Error::invalid("trace does not match network layers"));
            }
        }
        Ok(())
    }

    fn backward_layers(&self, trace: &ForwardTrace, mut grad: Matrix, head: usize) -> Result<Gradients> {
        let domain = trace.domain;
        let mut layers: Vec<Vec<Option<Matrix>>> = self.params.iter().map(|p| vec![None; p.len()]).collect();
        for l in (0..head).rev() {
            grad = match &trace.caches[l] {
                Cache::Affine { input } => {
                    let w = &self.params[l][0];
                    layers[l][0] = Some(input.transpose().matmul(&grad)?);
                    layers[l][1] = Some(grad.column_sums());
                    grad.matmul(&w.transpose())?
                }
                Cache::Relu { input } => {
                    let mut g = grad;
                    for (gv, xv) in g.data_mut().iter_mut().zip(input.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                Cache::BatchNorm {
                    normalized,
                    inv_std,
                    batch_stats,
                } => {
                    let gamma = self.params[l][2 * domain].data();
                    let (n, d) = grad.shape();
                    let d_gamma = grad.hadamard(normalized)?.column_sums();
                    let d_beta = grad.column_sums();
                    let mut dx = Matrix::zeros(n, d);
                    if *batch_stats {
                        // dx = inv_std / n * (n dxh - sum dxh - xh * sum(dxh xh)), dxh = dy * gamma
                        let nf = n as f64;
                        for c in 0..d {
                            let sum_dxh = d_beta.data()[c] * gamma[c];
                            let sum_dxh_xh = d_gamma.data()[c] * gamma[c];
                            for r in 0..n {
                                let dxh = grad.get(r, c) * gamma[c];
                                let xh = normalized.get(r, c);
                                dx.set(r, c, inv_std[c] / nf * (nf * dxh - sum_dxh - xh * sum_dxh_xh));
                            }
                        }
                    } else {
                        for r in 0..n {
                            for c in 0..d {
                                dx.set(r, c, grad.get(r, c) * gamma[c] * inv_std[c]);
                            }
                        }
                    }
                    layers[l][2 * domain] = Some(d_gamma);
                    layers[l][2 * domain + 1] = Some(d_beta);
                    dx
                }
                Cache::SigmoidHead { .. } | Cache::SoftmaxHead { .. } => {
                    return Err(Error::invalid("head layer before the last position"))
                }
            };
        }
        grad.ensure_finite("input gradient")?;
        Ok(Gradients { layers, input: grad })
    }

    /// Structural invariants, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        validate_layers(&self.layers)?;
        if self.num_domains == 0 {
            return Err(Error::invalid("network needs at least one domain"));
        }
        let n = self.layers.len();
        if self.params.len() != n || self.velocity.len() != n || self.running.len() != n {
            return Err(Error::invalid("per-layer tables do not match layer count"));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            let expected: Vec<(usize, usize)> = match spec.kind {
                LayerKind::Affine => vec![(spec.input_dim, spec.output_dim), (1, spec.output_dim)],
                LayerKind::BatchNorm => vec![(1, spec.input_dim); 2 * self.num_domains],
                _ => Vec::new(),
            };
            let check = |tensors: &[Matrix], what: &str| -> Result<()> {
                if tensors.len() != expected.len()
                    || tensors
                        .iter()
                        .zip(&expected)
                        .any(|(t, e)| t.shape() != *e || t.data().len() != e.0 * e.1 || !t.is_finite())
                {
                    return Err(Error::invalid(format!("layer {l}: {what} tensors have the wrong shape")));
                }
                Ok(())
            };
            check(&self.params[l], "parameter")?;
            check(&self.velocity[l], "momentum")?;
            let stats = &self.running[l];
            let expect_stats = if spec.kind == LayerKind::BatchNorm { self.num_domains } else { 0 };
            if stats.len() != expect_stats {
                return Err(Error::invalid(format!("layer {l}: batch-norm bank size mismatch")));
            }
            for s in stats {
                let shape = (1, spec.input_dim);
                if s.mean.shape() != shape
                    || s.var.shape() != shape
                    || s.mean.data().len() != spec.input_dim
                    || s.var.data().len() != spec.input_dim
                    || !s.mean.is_finite()
                    || s.var.data().iter().any(|v| !(*v > 0.0) || !v.is_finite())
                {
                    return Err(Error::invalid(format!("layer {l}: invalid running statistics")));
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network: self.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::invalid(format!("serializing network: {e}")))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Network> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("parsing checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(format!("unexpected checkpoint format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", file.version)));
        }
        file.network.validate()?;
        Ok(file.network)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = self.to_checkpoint_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_checkpoint_str(&text).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Mean negative log-likelihood of the labelled class and its gradient w.r.t. `probs`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = probs.shape();
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        let p = probs.get(r, y).max(PROB_FLOOR);
        loss -= p.ln();
        grad.set(r, y, -1.0 / (n as f64 * p));
    }
    Ok((loss / n as f64, grad))
}

/// Mean absolute difference over all entries; gradient w.r.t. `student`, 0 at ties.
pub fn l1_distill_loss(student: &Matrix, teacher: &Matrix) -> Result<(f64, Matrix)> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape("l1_distill_loss", student.shape(), teacher.shape()));
    }
    let count = student.data().len() as f64;
    let diff = student.sub(teacher)?;
    let loss = diff.data().iter().map(|d| d.abs()).sum::<f64>() / count;
    let grad = diff.map(|d| {
        if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        }
    });
    Ok((loss, grad))
}

/// Mean squared difference over all entries; gradient w.r.t. `a`.
pub fn l2_distill_loss(a: &Matrix, b: &Matrix) -> Result<(f64, Matrix)> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l2_distill_loss", a.shape(), b.shape()));
    }
    let count = a.data().len() as f64;
    let diff = a.sub(b)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / count;
    Ok((loss, diff.scale(2.0 / count)))
}

/// `v <- momentum * v + g; theta <- theta - lr * v` for every touched tensor.
pub fn sgd_momentum_step(net: &mut Network, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if grads.layers.len() != net.params.len()
        || grads.layers.iter().zip(&net.params).any(|(g, p)| g.len() != p.len())
    {
        return Err(Error::invalid("gradients do not match network structure"));
    }
    for (l, layer_grads) in grads.layers.iter().enumerate() {
        for (i, g) in layer_grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != net.params[l][i].shape() {
                    return Err(Error::shape("sgd_momentum_step", net.params[l][i].shape(), g.shape()));
                }
            }
        }
    }
    for (l, layer_grads) in grads.layers.iter().enumerate() {
        for (i, g) in layer_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let v = net.velocity[l][i].data_mut();
            for (vj, gj) in v.iter_mut().zip(g.data()) {
                *vj = momentum * *vj + gj;
            }
            let v = net.velocity[l][i].data().to_vec();
            for (pj, vj) in net.params[l][i].data_mut().iter_mut().zip(&v) {
                *pj -= lr * vj;
            }
        }
    }
    Ok(())
}

/// Row-wise argmax, ties to the lowest class index.
pub fn argmax_rows(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let mut best = 0;
            for (c, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(layers: Vec<LayerSpec>, domains: usize, seed: u64) -> Network {
        Network::new(layers, domains, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn layer_validation() {
        assert!(validate_layers(&[LayerSpec::affine(2, 3), LayerSpec::relu(3)]).is_err());
        assert!(validate_layers(&[LayerSpec::affine(2, 3), LayerSpec::sigmoid_head()]).is_err());
        assert!(validate_layers(&[LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()]).is_ok());
        assert!(validate_layers(&[LayerSpec::softmax_head(2), LayerSpec::affine(2, 2)]).is_err());
        assert!(ArchSpec {
            head: Some(HeadKind::Sigmoid),
            ..ArchSpec::default()
        }
        .layers(2, 3)
        .is_err());
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut net = tiny_net(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], 1, 0);
        net.set_param_vector(&[0.0, 0.0, 0.0]).unwrap();
        let (p, _) = net.forward_eval(&Matrix::filled(3, 2, 1.7), 0).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut net = tiny_net(vec![LayerSpec::affine(2, 4), LayerSpec::softmax_head(4)], 1, 0);
        let zeros = vec![0.0; net.num_params()];
        net.set_param_vector(&zeros).unwrap();
        let (p, _) = net.forward_eval(&Matrix::filled(2, 2, -3.0), 0).unwrap();
        assert!(p.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn unknown_domain_and_bad_width() {
        let mut net = tiny_net(ArchSpec::default().layers(2, 2).unwrap(), 2, 1);
        let x = Matrix::filled(4, 2, 0.3);
        assert!(matches!(
            net.forward(&x, 2, Mode::Train),
            Err(Error::UnknownDomain { id: 2, num_domains: 2 })
        ));
        assert!(net.forward(&Matrix::zeros(4, 3), 0, Mode::Eval).is_err());
        assert!(net.forward(&Matrix::zeros(1, 2), 0, Mode::Train).is_err());
    }

    fn input_bn_arch() -> ArchSpec {
        ArchSpec {
            input_bn: true,
            hidden_bn: false,
            ..ArchSpec::default()
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = tiny_net(input_bn_arch().layers(3, 2).unwrap(), 2, 4);
        let x = rng_normal(&mut Rng::new(5), 6, 3, 0.0, 1.0).unwrap();
        let (p, trace) = net.forward(&x, 1, Mode::Train).unwrap();
        let g = net.backward(&trace, &Matrix::zeros(p.rows(), p.cols())).unwrap();
        assert!(g.is_all_zero());
        assert!(g.get(0, 0).is_none(), "domain 0 entry must stay untouched");
        assert!(g.get(0, 2).is_some());
    }

    #[test]
    fn affine_weight_gradient_is_input_column_sums() {
        // A softmax head is not the identity, so test the affine layer alone via logits.
        let net = tiny_net(vec![LayerSpec::affine(3, 2), LayerSpec::softmax_head(2)], 1, 2);
        let x = rng_normal(&mut Rng::new(8), 5, 3, 0.0, 1.0).unwrap();
        let (_, trace) = net.forward_eval(&x, 0).unwrap();
        let g = net.backward_from_logits(&trace, &Matrix::filled(5, 2, 1.0)).unwrap();
        let sums = x.column_sums();
        let dw = g.get(0, 0).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((dw.get(i, j) - sums.get(0, i)).abs() < 1e-12);
            }
        }
        assert_eq!(g.get(0, 1).unwrap(), &Matrix::filled(1, 2, 5.0));
    }

    #[test]
    fn cross_entropy_cases() {
        let p = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy(&p, &[1]).unwrap().0, 0.0);
        let u = Matrix::filled(4, 3, 1.0 / 3.0);
        assert!((cross_entropy(&u, &[0, 1, 2, 0]).unwrap().0 - 3f64.ln()).abs() < 1e-12);
        let rows = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.25, 0.25, 0.5]]).unwrap();
        let expected = -(0.7f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((cross_entropy(&rows, &[0, 1, 2]).unwrap().0 - expected).abs() < 1e-12);
        assert!(cross_entropy(&rows, &[0, 1, 3]).is_err());
    }

    #[test]
    fn distill_losses() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(l1_distill_loss(&a, &a).unwrap().0, 0.0);
        assert_eq!(l1_distill_loss(&a, &b).unwrap().0, 1.0);
        assert_eq!(l1_distill_loss(&a, &a).unwrap().1, Matrix::zeros(1, 2));
        assert_eq!(l2_distill_loss(&a, &a).unwrap().0, 0.0);
        assert_eq!(l2_distill_loss(&a, &b).unwrap().0, 1.0);
        assert!(l1_distill_loss(&a, &Matrix::zeros(2, 2)).is_err());
        assert!(l2_distill_loss(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn sgd_degenerate_cases() {
        let mut net = tiny_net(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], 1, 3);
        let before = net.clone();
        let x = Matrix::filled(2, 2, 1.0);
        let (p, trace) = net.forward_eval(&x, 0).unwrap();
        let zero = net.backward(&trace, &Matrix::zeros(p.rows(), 2)).unwrap();
        sgd_momentum_step(&mut net, &zero, 0.1, 0.9).unwrap();
        assert_eq!(net, before);

        let (_, dp) = cross_entropy(&p, &[1, 0]).unwrap();
        let g = net.backward(&trace, &dp).unwrap();
        sgd_momentum_step(&mut net, &g, 0.1, 0.0).unwrap();
        let expected: Vec<f64> = before
            .param_vector()
            .iter()
            .zip(g.to_vector(&before))
            .map(|(t, gj)| t - 0.1 * gj)
            .collect();
        assert_eq!(net.param_vector(), expected);

        assert!(sgd_momentum_step(&mut net, &g, 0.0, 0.5).is_err());
        assert!(sgd_momentum_step(&mut net, &g, 0.1, 1.0).is_err());
    }

    #[test]
    fn momentum_recurrence_second_update_is_1_9_lr_g() {
        let mut net = tiny_net(vec![LayerSpec::affine(2, 1), LayerSpec::sigmoid_head()], 1, 3);
        let x = Matrix::filled(2, 2, 0.5);
        let (p, trace) = net.forward_eval(&x, 0).unwrap();
        let (_, dp) = cross_entropy(&p, &[1, 1]).unwrap();
        let g = net.backward(&trace, &dp).unwrap();
        let gv = g.to_vector(&net);
        let lr = 0.01;
        sgd_momentum_step(&mut net, &g, lr, 0.9).unwrap();
        let after_one = net.param_vector();
        sgd_momentum_step(&mut net, &g, lr, 0.9).unwrap();
        for ((a, b), gj) in after_one.iter().zip(net.param_vector()).zip(gv) {
            assert!(((a - b) - lr * 1.9 * gj).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_forward_leaves_network_untouched() {
        let mut net = tiny_net(ArchSpec::default().layers(2, 2).unwrap(), 3, 7);
        let x = rng_normal(&mut Rng::new(1), 8, 2, 1.0, 2.0).unwrap();
        net.forward(&x, 0, Mode::Train).unwrap();
        let snapshot = net.clone();
        net.forward(&x, 1, Mode::Eval).unwrap();
        net.forward_batch_stats(&x, 2).unwrap();
        assert_eq!(net, snapshot);
    }

    #[test]
    fn train_forward_updates_only_selected_domain() {
        let mut net = tiny_net(input_bn_arch().layers(2, 2).unwrap(), 3, 7);
        let x = rng_normal(&mut Rng::new(1), 8, 2, 1.0, 2.0).unwrap();
        let before = net.clone();
        net.forward(&x, 1, Mode::Train).unwrap();
        assert_eq!(net.running_stats(0, 0), before.running_stats(0, 0));
        assert_eq!(net.running_stats(0, 2), before.running_stats(0, 2));
        assert_ne!(net.running_stats(0, 1), before.running_stats(0, 1));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = tiny_net(ArchSpec::default().layers(3, 3).unwrap(), 2, 17);
        let x = rng_normal(&mut Rng::new(2), 5, 3, 0.0, 1.0).unwrap();
        let (p, trace) = net.forward(&x, 1, Mode::Train).unwrap();
        let (_, dp) = cross_entropy(&p, &[0, 1, 2, 1, 0]).unwrap();
        let g = net.backward(&trace, &dp).unwrap();
        sgd_momentum_step(&mut net, &g, 0.05, 0.9).unwrap();
        let text = net.to_checkpoint_string().unwrap();
        let back = Network::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, net);
        let bits = |n: &Network| n.param_vector().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
        assert!(Network::from_checkpoint_str(&text.replace("\"version\": 1", "\"version\": 9")).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let p = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![1, 0]);
    }
}
