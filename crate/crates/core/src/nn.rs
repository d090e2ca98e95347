//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! One [`MlpParams`] type backs every network in the pipeline: the task
//! classifier, the frozen sensitive-attribute model, the dependency critic
//! and the leakage attacker. Hidden layers share one activation; the final
//! layer is always linear.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WfcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre- and post-activation values.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = WfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(WfcError::config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Which layer's output to use as a representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    FirstHidden,
    LastHidden,
    Output,
}

impl LayerSelector {
    /// Index into the per-layer trace for a network with `num_layers` dense layers.
    pub fn layer_index(self, num_layers: usize) -> Result<usize> {
        match self {
            LayerSelector::Output => Ok(num_layers - 1),
            LayerSelector::FirstHidden | LayerSelector::LastHidden if num_layers < 2 => {
                Err(WfcError::InvalidSelector(format!(
                    "{self:?} requested on a network without hidden layers"
                )))
            }
            LayerSelector::FirstHidden => Ok(0),
            LayerSelector::LastHidden => Ok(num_layers - 2),
        }
    }
}

impl std::str::FromStr for LayerSelector {
    type Err = WfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" | "first_hidden" => Ok(LayerSelector::FirstHidden),
            "last" | "last_hidden" => Ok(LayerSelector::LastHidden),
            "output" => Ok(LayerSelector::Output),
            other => Err(WfcError::InvalidSelector(other.to_string())),
        }
    }
}

/// One affine layer. `weight` is `out x in`, so a batch maps as `x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Dense {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn entries(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(WfcError::config(format!(
            "a network needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(WfcError::config(format!(
            "layer dims must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(&mut rng));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(MlpParams {
            layer_dims: layer_dims.to_vec(),
            activation,
            layers,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(MlpParams {
            layer_dims: layer_dims.to_vec(),
            activation,
            layers,
        })
    }

    /// Assemble from explicit layers, checking that consecutive shapes agree.
    pub fn from_layers(activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| WfcError::config("network needs at least one layer"))?;
        let mut dims = vec![first.weight.ncols()];
        for (k, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.dim();
            if inp != *dims.last().unwrap() || layer.bias.len() != out {
                return Err(WfcError::shape(format!(
                    "layer {k} has weight {out}x{inp} and bias {}, expected input {}",
                    layer.bias.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(out);
        }
        validate_dims(&dims)?;
        let params = MlpParams {
            layer_dims: dims,
            activation,
            layers,
        };
        if !params.is_finite() {
            return Err(WfcError::Numeric("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Width of the representation picked by `selector`.
    pub fn representation_dim(&self, selector: LayerSelector) -> Result<usize> {
        let k = selector.layer_index(self.num_layers())?;
        Ok(self.layer_dims[k + 1])
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.entries().all(|v| v.is_finite()))
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.entries())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardTrace> {
        if batch.ncols() != self.input_dim() {
            return Err(WfcError::shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { batch } else { post[k - 1].view() };
            let z = input.dot(&layer.weight.t()) + &layer.bias;
            let a = if k == last {
                z.clone()
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace {
            input: batch.to_owned(),
            pre,
            post,
        })
    }

    /// Reverse pass seeded with the gradient of the loss w.r.t. the logits.
    pub fn backward(&self, trace: &ForwardTrace, logit_grad: ArrayView2<f64>) -> Result<Gradients> {
        self.backward_with(trace, Some(logit_grad), &[])
    }

    /// Reverse pass with optional extra gradients injected at intermediate
    /// layer outputs (`(selector, dL/d output-of-that-layer)`).
    pub fn backward_with(
        &self,
        trace: &ForwardTrace,
        logit_grad: Option<ArrayView2<f64>>,
        injections: &[(LayerSelector, ArrayView2<f64>)],
    ) -> Result<Gradients> {
        let n_layers = self.layers.len();
        if trace.pre.len() != n_layers {
            return Err(WfcError::shape(format!(
                "trace has {} layers, network has {n_layers}",
                trace.pre.len()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if trace.pre[k].ncols() != layer.weight.nrows() {
                return Err(WfcError::shape(format!("trace layer {k} width differs from params")));
            }
        }
        let batch = trace.batch_size();
        let mut injected: Vec<Option<Array2<f64>>> = vec![None; n_layers];
        for (sel, g) in injections {
            let k = sel.layer_index(n_layers)?;
            if g.dim() != trace.post[k].dim() {
                return Err(WfcError::shape(format!(
                    "injected gradient {:?} does not match layer output {:?}",
                    g.dim(),
                    trace.post[k].dim()
                )));
            }
            match &mut injected[k] {
                Some(acc) => *acc += g,
                slot @ None => *slot = Some(g.to_owned()),
            }
        }

        let out_dim = self.output_dim();
        let mut delta = match logit_grad {
            Some(g) => {
                if g.dim() != (batch, out_dim) {
                    return Err(WfcError::shape(format!(
                        "logit gradient {:?} does not match ({batch}, {out_dim})",
                        g.dim()
                    )));
                }
                g.to_owned()
            }
            None => Array2::zeros((batch, out_dim)),
        };
        if let Some(extra) = injected[n_layers - 1].take() {
            delta += &extra;
        }

        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut input_grad = Array2::zeros((0, 0));
        for k in (0..n_layers).rev() {
            let input = if k == 0 { trace.input.view() } else { trace.post[k - 1].view() };
            grads[k].weight = delta.t().dot(&input);
            grads[k].bias = delta.sum_axis(Axis(0));
            let upstream = delta.dot(&self.layers[k].weight);
            if k == 0 {
                input_grad = upstream;
                break;
            }
            let mut next = upstream;
            if let Some(extra) = injected[k - 1].take() {
                next += &extra;
            }
            let act = self.activation;
            Zip::from(&mut next)
                .and(&trace.pre[k - 1])
                .and(&trace.post[k - 1])
                .for_each(|g, &p, &q| *g *= act.derivative(p, q));
            delta = next;
        }
        Ok(Gradients {
            layers: grads,
            input: input_grad,
        })
    }

    /// Clamp every weight and bias into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        for layer in &mut self.layers {
            layer.weight.mapv_inplace(|v| v.clamp(-c, c));
            layer.bias.mapv_inplace(|v| v.clamp(-c, c));
        }
    }

    /// All parameters flattened layer by layer (weights row-major, then bias).
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`flat_values`](Self::flat_values).
    pub fn from_flat(layer_dims: &[usize], activation: Activation, values: &[f64]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let expected: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if values.len() != expected {
            return Err(WfcError::shape(format!(
                "{} values supplied, layout needs {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wlen = fan_in * fan_out;
            let weight = Array2::from_shape_vec((fan_out, fan_in), values[offset..offset + wlen].to_vec())
                .map_err(|e| WfcError::shape(e.to_string()))?;
            offset += wlen;
            let bias = Array1::from(values[offset..offset + fan_out].to_vec());
            offset += fan_out;
            layers.push(Dense { weight, bias });
        }
        MlpParams::from_layers(activation, layers)
    }

    /// Hard predictions: argmax of the logits, ties to the lowest index.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Vec<usize>> {
        let trace = self.forward(batch)?;
        Ok(argmax_rows(trace.logits()))
    }
}

/// Per-layer activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    pub fn logits(&self) -> ArrayView2<'_, f64> {
        self.post.last().expect("non-empty trace").view()
    }

    pub fn pre_activation(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.pre[layer].view()
    }

    pub fn post_activation(&self, layer: usize) -> ArrayView2<'_, f64> {
        self.post[layer].view()
    }

    /// Post-activation of the selected hidden layer, or the raw logits.
    pub fn hidden_representation(&self, selector: LayerSelector) -> Result<ArrayView2<'_, f64>> {
        let k = selector.layer_index(self.num_layers())?;
        Ok(self.post[k].view())
    }
}

/// Gradients shaped like [`MlpParams`], plus the gradient w.r.t. the input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.entries().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
        self.input *= factor;
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.entries())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

pub fn argmax_rows(m: ArrayView2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mean cross-entropy and its gradient `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(WfcError::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(WfcError::Label { label: bad, classes: c });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(WfcError::Numeric("non-finite logits".into()));
    }
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, c))));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, c));
    for (i, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for j in 0..c {
            grad[[i, j]] = (row[j] - lse).exp();
        }
        grad[[i, y]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    grad *= inv;
    Ok((loss * inv, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = WfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(WfcError::config(format!("unknown optimizer {other:?}"))),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMSPROP_DECAY: f64 = 0.99;
const OPT_EPS: f64 = 1e-8;

/// Moment accumulators for Adam or RMSProp.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, params: &MlpParams) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(WfcError::config(format!("learning rate must be positive, got {lr}")));
        }
        let zeros: Vec<Dense> = params.layers.iter().map(Dense::zeros_like).collect();
        Ok(OptimizerState {
            kind,
            lr,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one descent step on `params` using `grads`.
    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != params.layers.len()
            || grads
                .layers
                .iter()
                .zip(&params.layers)
                .any(|(g, p)| g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim())
        {
            return Err(WfcError::shape("gradient layout differs from parameters"));
        }
        if !grads.is_finite() {
            return Err(WfcError::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + OPT_EPS);
                };
                for (((p, g), m), v) in params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    Zip::from(&mut p.weight)
                        .and(&g.weight)
                        .and(&mut m.weight)
                        .and(&mut v.weight)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                    Zip::from(&mut p.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(|p, &g, m, v| update(p, g, m, v));
                }
            }
            OptimizerKind::Rmsprop => {
                let update = |p: &mut f64, g: f64, v: &mut f64| {
                    *v = RMSPROP_DECAY * *v + (1.0 - RMSPROP_DECAY) * g * g;
                    *p -= lr * g / (v.sqrt() + OPT_EPS);
                };
                for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.second) {
                    Zip::from(&mut p.weight)
                        .and(&g.weight)
                        .and(&mut v.weight)
                        .for_each(|p, &g, v| update(p, g, v));
                    Zip::from(&mut p.bias)
                        .and(&g.bias)
                        .and(&mut v.bias)
                        .for_each(|p, &g, v| update(p, g, v));
                }
            }
        }
        Ok(())
    }
}

/// Gather rows of `m` by index.
pub fn select_rows(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Horizontally concatenate two row-aligned matrices.
pub fn hconcat(left: ArrayView2<f64>, right: ArrayView2<f64>) -> Result<Array2<f64>> {
    if left.nrows() != right.nrows() {
        return Err(WfcError::shape(format!(
            "cannot concatenate {} rows with {} rows",
            left.nrows(),
            right.nrows()
        )));
    }
    let mut out = Array2::zeros((left.nrows(), left.ncols() + right.ncols()));
    out.slice_mut(s![.., ..left.ncols()]).assign(&left);
    out.slice_mut(s![.., left.ncols()..]).assign(&right);
    Ok(out)
}

/// One pass of mini-batch cross-entropy training over `x` in the order
/// given by `order`. Returns the mean batch loss.
pub fn train_ce_epoch(
    params: &mut MlpParams,
    optimizer: &mut OptimizerState,
    x: ArrayView2<f64>,
    labels: &[usize],
    order: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if batch_size == 0 {
        return Err(WfcError::config("batch size must be positive"));
    }
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(batch_size) {
        let xb = select_rows(x, chunk);
        let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let trace = params.forward(xb.view())?;
        let (loss, grad) = softmax_cross_entropy(trace.logits(), &yb)?;
        let grads = params.backward(&trace, grad.view())?;
        optimizer.step(params, &grads)?;
        total += loss;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}
