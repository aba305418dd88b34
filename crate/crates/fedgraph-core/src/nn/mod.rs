//! Minimal neural network: layer specs, forward/backward, SGD, local training.
//!
//! The network is just big enough to drive the federated loop: 2-d same-padding
//! convolutions and dense layers, ReLU/sigmoid/identity activations, a final
//! softmax for classification (cross-entropy) and a final sigmoid for toy
//! segmentation (soft-Dice loss). Everything is f64 and pure: operations take
//! models by reference and return fresh values, so concurrent workers can never
//! share mutable state.

pub(crate) mod checkpoint;

pub use checkpoint::{checkpoint_bytes, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Clamp floor for probabilities inside the cross-entropy log.
pub const CE_CLAMP: f64 = 1e-12;
/// Smoothing constant of the soft-Dice loss.
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
    /// Row-wise softmax; only legal on the last layer, paired with
    /// cross-entropy classification targets.
    SoftmaxFinal,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
            Activation::SoftmaxFinal => "softmax-final",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padding, stride-1 convolution over `[n, h, w, c]` inputs.
    /// Weights are `[kernel_h, kernel_w, c_in, c_out]`, row-major.
    Conv2d {
        kernel_h: usize,
        kernel_w: usize,
        c_in: usize,
        c_out: usize,
    },
    /// Fully connected layer; weights `[n_in, n_out]`. A conv output is
    /// implicitly flattened when it feeds a dense layer.
    Dense { n_in: usize, n_out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv2d(kernel_h: usize, kernel_w: usize, c_in: usize, c_out: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                c_in,
                c_out,
            },
            activation,
        }
    }

    pub fn dense(n_in: usize, n_out: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { n_in, n_out },
            activation,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                c_in,
                c_out,
            } => vec![kernel_h, kernel_w, c_in, c_out],
            LayerKind::Dense { n_in, n_out } => vec![n_in, n_out],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d { c_out, .. } => c_out,
            LayerKind::Dense { n_out, .. } => n_out,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = self.weight_shape();
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dimensions must all be >= 1, got {:?}",
                dims
            )));
        }
        Ok(())
    }
}

/// One layer's parameters: spec, weight tensor, bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Ordered layer-wise parameter container. Two models with equal specs
/// support element-wise arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Assemble from explicit layers, checking tensor shapes against specs.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model must have at least one layer".into()));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.spec.validate()?;
            if layer.weights.shape() != layer.spec.weight_shape().as_slice() {
                return Err(Error::Config(format!(
                    "layer {} weight shape {:?} does not match spec {:?}",
                    i,
                    layer.weights.shape(),
                    layer.spec.weight_shape()
                )));
            }
            if layer.bias.len() != layer.spec.bias_len() {
                return Err(Error::Config(format!(
                    "layer {} bias length {} does not match spec {}",
                    i,
                    layer.bias.len(),
                    layer.spec.bias_len()
                )));
            }
        }
        Ok(ModelParams { layers })
    }

    /// Seeded Glorot-uniform initialization: each weight uniform in
    /// `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(specs: &[LayerSpec], init_seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let (fan_in, fan_out) = match spec.kind {
                LayerKind::Conv2d {
                    kernel_h,
                    kernel_w,
                    c_in,
                    c_out,
                } => (kernel_h * kernel_w * c_in, kernel_h * kernel_w * c_out),
                LayerKind::Dense { n_in, n_out } => (n_in, n_out),
            };
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(init_seed, &[i as u64]));
            let shape = spec.weight_shape();
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.random_range(-s..=s)).collect();
            layers.push(Layer {
                spec: *spec,
                weights: Tensor::from_vec(&shape, data)?,
                bias: vec![0.0; spec.bias_len()],
            });
        }
        ModelParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn congruent(&self, other: &ModelParams) -> bool {
        self.specs() == other.specs()
    }

    fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        if !self.congruent(other) {
            return Err(Error::Internal(
                "models are not shape-congruent".into(),
            ));
        }
        Ok(())
    }

    /// Element-wise binary combination of two congruent models.
    pub fn zip(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<ModelParams> {
        self.check_congruent(other)?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok(Layer {
                    spec: a.spec,
                    weights: a.weights.zip(&b.weights, &f)?,
                    bias: a
                        .bias
                        .iter()
                        .zip(&b.bias)
                        .map(|(&x, &y)| f(x, y))
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelParams::new(layers)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ModelParams {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                spec: l.spec,
                weights: l.weights.map(&f),
                bias: l.bias.iter().map(|&x| f(x)).collect(),
            })
            .collect();
        ModelParams { layers }
    }

    /// Element-wise absolute difference `|self - other|`.
    pub fn abs_diff(&self, other: &ModelParams) -> Result<ModelParams> {
        self.zip(other, |a, b| (a - b).abs())
    }

    /// Sum of all weights and biases.
    pub fn total_sum(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.sum() + l.bias.iter().sum::<f64>())
            .sum()
    }

    /// Visit every parameter value mutably, layer by layer in order,
    /// weights before biases. Used by tests and the finite-difference probe.
    pub fn param_mut(&mut self, flat_index: usize) -> Option<&mut f64> {
        let mut rest = flat_index;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            if rest < wlen {
                return Some(&mut layer.weights.data_mut()[rest]);
            }
            rest -= wlen;
            if rest < layer.bias.len() {
                return Some(&mut layer.bias[rest]);
            }
            rest -= layer.bias.len();
        }
        None
    }

    pub fn param(&self, flat_index: usize) -> Option<f64> {
        let mut rest = flat_index;
        for layer in &self.layers {
            let wlen = layer.weights.len();
            if rest < wlen {
                return Some(layer.weights.data()[rest]);
            }
            rest -= wlen;
            if rest < layer.bias.len() {
                return Some(layer.bias[rest]);
            }
            rest -= layer.bias.len();
        }
        None
    }
}

/// Sum of absolute element-wise differences over all layers (weights and
/// biases). A metric on congruent models.
pub fn param_l1_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    a.check_congruent(b)?;
    let mut total = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        for (&x, &y) in la.weights.data().iter().zip(lb.weights.data()) {
            total += (x - y).abs();
        }
        for (&x, &y) in la.bias.iter().zip(&lb.bias) {
            total += (x - y).abs();
        }
    }
    Ok(total)
}

/// Training targets: class indices for classification, per-pixel binary
/// masks for toy segmentation.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Masks(Tensor),
}

impl Targets {
    pub fn n(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::Masks(t) => t.n(),
        }
    }

    /// Gather the targets at `idx` into a new container.
    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
            Targets::Masks(t) => {
                let mut shape = t.shape().to_vec();
                shape[0] = idx.len();
                let mut out = Tensor::zeros(&shape);
                for (j, &i) in idx.iter().enumerate() {
                    out.copy_sample_from(j, t, i);
                }
                Targets::Masks(out)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.n() != targets.n() {
            return Err(Error::Config(format!(
                "batch sample counts differ: {} inputs vs {} targets",
                inputs.n(),
                targets.n()
            )));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn n(&self) -> usize {
        self.inputs.n()
    }
}

/// Gather rows `idx` of a full input/target store into a batch.
pub fn gather_batch(inputs: &Tensor, targets: &Targets, idx: &[usize]) -> Batch {
    let mut shape = inputs.shape().to_vec();
    shape[0] = idx.len();
    let mut out = Tensor::zeros(&shape);
    for (j, &i) in idx.iter().enumerate() {
        out.copy_sample_from(j, inputs, i);
    }
    Batch {
        inputs: out,
        targets: targets.gather(idx),
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Output shape of `spec` applied to a per-sample input shape (without the
/// leading batch dimension).
fn layer_output_shape(spec: &LayerSpec, in_shape: &[usize]) -> Result<Vec<usize>> {
    match spec.kind {
        LayerKind::Conv2d { c_in, c_out, .. } => {
            if in_shape.len() != 3 || in_shape[2] != c_in {
                return Err(Error::Config(format!(
                    "conv2d expects [h, w, {}] input, got {:?}",
                    c_in, in_shape
                )));
            }
            Ok(vec![in_shape[0], in_shape[1], c_out])
        }
        LayerKind::Dense { n_in, n_out } => {
            let flat: usize = in_shape.iter().product();
            if flat != n_in {
                return Err(Error::Config(format!(
                    "dense expects {} input features, got {:?} (= {})",
                    n_in, in_shape, flat
                )));
            }
            Ok(vec![n_out])
        }
    }
}

/// Validate that `specs` chain over `sample_shape` and that softmax appears
/// only as the last layer's activation. Returns the final per-sample shape.
pub fn validate_chain(specs: &[LayerSpec], sample_shape: &[usize]) -> Result<Vec<usize>> {
    if specs.is_empty() {
        return Err(Error::Config("model must have at least one layer".into()));
    }
    let mut shape = sample_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        if spec.activation == Activation::SoftmaxFinal && i + 1 != specs.len() {
            return Err(Error::Config(format!(
                "softmax-final activation on layer {} of {}; only the last layer may use it",
                i,
                specs.len()
            )));
        }
        shape = layer_output_shape(spec, &shape)?;
    }
    Ok(shape)
}

struct Trace {
    /// Pre-activation output of each layer, `[n, ...]`.
    pre: Vec<Tensor>,
    /// Post-activation output of each layer.
    post: Vec<Tensor>,
}

fn apply_activation(z: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Relu => z.map(|x| if x > 0.0 { x } else { 0.0 }),
        Activation::Sigmoid => z.map(|x| 1.0 / (1.0 + (-x).exp())),
        Activation::Identity => z.clone(),
        Activation::SoftmaxFinal => {
            let n = z.n();
            let width = z.sample_len();
            let mut out = z.clone();
            let data = out.data_mut();
            for s in 0..n {
                let row = &mut data[s * width..(s + 1) * width];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            out
        }
    }
}

fn dense_forward(layer: &Layer, input: &Tensor) -> Tensor {
    let n = input.n();
    let (n_in, n_out) = match layer.spec.kind {
        LayerKind::Dense { n_in, n_out } => (n_in, n_out),
        _ => unreachable!(),
    };
    let x = input.data();
    let w = layer.weights.data();
    let mut out = Tensor::zeros(&[n, n_out]);
    let o = out.data_mut();
    for s in 0..n {
        let xrow = &x[s * n_in..(s + 1) * n_in];
        let orow = &mut o[s * n_out..(s + 1) * n_out];
        orow.copy_from_slice(&layer.bias);
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * n_out..(i + 1) * n_out];
            for (j, &wij) in wrow.iter().enumerate() {
                orow[j] += xi * wij;
            }
        }
    }
    out
}

fn conv_forward(layer: &Layer, input: &Tensor) -> Tensor {
    let (kh, kw, ci, co) = match layer.spec.kind {
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            c_in,
            c_out,
        } => (kernel_h, kernel_w, c_in, c_out),
        _ => unreachable!(),
    };
    let (n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let pt = (kh - 1) / 2;
    let pl = (kw - 1) / 2;
    let x = input.data();
    let k = layer.weights.data();
    let mut out = Tensor::zeros(&[n, h, w, co]);
    let o = out.data_mut();
    for s in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let obase = ((s * h + y) * w + xx) * co;
                o[obase..obase + co].copy_from_slice(&layer.bias);
                for dy in 0..kh {
                    let iy = y + dy;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let iy = iy - pt;
                    for dx in 0..kw {
                        let ix = xx + dx;
                        if ix < pl || ix - pl >= w {
                            continue;
                        }
                        let ix = ix - pl;
                        let ibase = ((s * h + iy) * w + ix) * ci;
                        let kbase = (dy * kw + dx) * ci * co;
                        for i in 0..ci {
                            let xi = x[ibase + i];
                            if xi == 0.0 {
                                continue;
                            }
                            let krow = &k[kbase + i * co..kbase + (i + 1) * co];
                            for (j, &kv) in krow.iter().enumerate() {
                                o[obase + j] += xi * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn reshape_for(layer: &Layer, input: &Tensor) -> Result<Tensor> {
    match layer.spec.kind {
        LayerKind::Dense { n_in, .. } => {
            if input.sample_len() != n_in {
                return Err(Error::Config(format!(
                    "dense layer expects {} features per sample, got {}",
                    n_in,
                    input.sample_len()
                )));
            }
            // Flatten view; same buffer order.
            Tensor::from_vec(&[input.n(), n_in], input.data().to_vec())
        }
        LayerKind::Conv2d { c_in, .. } => {
            let s = input.shape();
            if s.len() != 4 || s[3] != c_in {
                return Err(Error::Config(format!(
                    "conv2d layer expects [n, h, w, {}] input, got {:?}",
                    c_in, s
                )));
            }
            Ok(input.clone())
        }
    }
}

fn forward_trace(model: &ModelParams, inputs: &Tensor) -> Result<Trace> {
    validate_chain(&model.specs(), &inputs.shape()[1..])?;
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut post = Vec::with_capacity(model.layers.len());
    let mut cur = inputs.clone();
    for layer in &model.layers {
        let shaped = reshape_for(layer, &cur)?;
        let z = match layer.spec.kind {
            LayerKind::Dense { .. } => dense_forward(layer, &shaped),
            LayerKind::Conv2d { .. } => conv_forward(layer, &shaped),
        };
        let a = apply_activation(&z, layer.spec.activation);
        pre.push(z);
        cur = a.clone();
        post.push(a);
    }
    Ok(Trace { pre, post })
}

/// Run the model on a batch and return predictions, one row per sample.
pub fn forward(model: &ModelParams, batch: &Batch) -> Result<Tensor> {
    let trace = forward_trace(model, &batch.inputs)?;
    Ok(trace.post.into_iter().next_back().unwrap())
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

fn check_loss_pairing(model: &ModelParams, targets: &Targets) -> Result<()> {
    let last = model.layers.last().unwrap().spec.activation;
    match (targets, last) {
        (Targets::Classes(_), Activation::SoftmaxFinal) => Ok(()),
        (Targets::Masks(_), Activation::Sigmoid) => Ok(()),
        (Targets::Classes(_), a) => Err(Error::Config(format!(
            "classification targets require a softmax-final last layer, found {}",
            a.name()
        ))),
        (Targets::Masks(_), a) => Err(Error::Config(format!(
            "segmentation targets require a sigmoid last layer, found {}",
            a.name()
        ))),
    }
}

/// Cross-entropy of softmax predictions against class indices; mean over the
/// batch. `d_pre` receives the gradient w.r.t. the final pre-activation.
fn cross_entropy(pred: &Tensor, classes: &[usize]) -> Result<(f64, Tensor)> {
    let n = pred.n();
    let c = pred.sample_len();
    let mut loss = 0.0;
    let mut d_pre = pred.clone();
    {
        let d = d_pre.data_mut();
        for (s, &y) in classes.iter().enumerate() {
            if y >= c {
                return Err(Error::Config(format!(
                    "class index {} out of range for {} classes",
                    y, c
                )));
            }
            let p = pred.data()[s * c + y].max(CE_CLAMP);
            loss -= p.ln();
            // softmax + cross-entropy combined gradient: (p - onehot) / n
            d[s * c + y] -= 1.0;
        }
        for v in d.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss / n as f64, d_pre))
}

/// Soft-Dice loss (1 - Dice) of sigmoid predictions against binary masks;
/// mean over the batch. Returns the gradient w.r.t. predictions.
fn soft_dice(pred: &Tensor, masks: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != masks.shape() {
        return Err(Error::Config(format!(
            "prediction shape {:?} does not match mask shape {:?}",
            pred.shape(),
            masks.shape()
        )));
    }
    let n = pred.n();
    let m = pred.sample_len();
    let mut loss = 0.0;
    let mut d_pred = Tensor::zeros(pred.shape());
    let p = pred.data();
    let t = masks.data();
    let d = d_pred.data_mut();
    for s in 0..n {
        let off = s * m;
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for i in 0..m {
            inter += p[off + i] * t[off + i];
            psum += p[off + i];
            tsum += t[off + i];
        }
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = psum + tsum + DICE_SMOOTH;
        loss += 1.0 - num / den;
        for i in 0..m {
            // d/dp_i [1 - num/den] = -(2 t_i den - num) / den^2
            d[off + i] = -(2.0 * t[off + i] * den - num) / (den * den) / n as f64;
        }
    }
    Ok((loss / n as f64, d_pred))
}

fn activation_backward(d_post: &Tensor, z: &Tensor, a: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => d_post.clone(),
        Activation::Relu => {
            let mut out = d_post.clone();
            for (dv, &zv) in out.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *dv = 0.0;
                }
            }
            out
        }
        Activation::Sigmoid => {
            let mut out = d_post.clone();
            for (dv, &av) in out.data_mut().iter_mut().zip(a.data()) {
                *dv *= av * (1.0 - av);
            }
            out
        }
        Activation::SoftmaxFinal => unreachable!("softmax gradient is fused with the loss"),
    }
}

fn dense_backward(layer: &Layer, input: &Tensor, d_pre: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let (n_in, n_out) = match layer.spec.kind {
        LayerKind::Dense { n_in, n_out } => (n_in, n_out),
        _ => unreachable!(),
    };
    let n = input.n();
    let x = input.data();
    let dz = d_pre.data();
    let w = layer.weights.data();
    let mut dw = Tensor::zeros(&[n_in, n_out]);
    let mut db = vec![0.0; n_out];
    let mut dx = Tensor::zeros(&[n, n_in]);
    {
        let dwd = dw.data_mut();
        let dxd = dx.data_mut();
        for s in 0..n {
            let xrow = &x[s * n_in..(s + 1) * n_in];
            let drow = &dz[s * n_out..(s + 1) * n_out];
            for (j, &dj) in drow.iter().enumerate() {
                db[j] += dj;
            }
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &w[i * n_out..(i + 1) * n_out];
                let dwrow = &mut dwd[i * n_out..(i + 1) * n_out];
                let mut acc = 0.0;
                for (j, &dj) in drow.iter().enumerate() {
                    dwrow[j] += xi * dj;
                    acc += wrow[j] * dj;
                }
                dxd[s * n_in + i] = acc;
            }
        }
    }
    (dw, db, dx)
}

fn conv_backward(layer: &Layer, input: &Tensor, d_pre: &Tensor) -> (Tensor, Vec<f64>, Tensor) {
    let (kh, kw, ci, co) = match layer.spec.kind {
        LayerKind::Conv2d {
            kernel_h,
            kernel_w,
            c_in,
            c_out,
        } => (kernel_h, kernel_w, c_in, c_out),
        _ => unreachable!(),
    };
    let (n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let pt = (kh - 1) / 2;
    let pl = (kw - 1) / 2;
    let x = input.data();
    let k = layer.weights.data();
    let dz = d_pre.data();
    let mut dk = Tensor::zeros(&[kh, kw, ci, co]);
    let mut db = vec![0.0; co];
    let mut dx = Tensor::zeros(&[n, h, w, ci]);
    {
        let dkd = dk.data_mut();
        let dxd = dx.data_mut();
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let obase = ((s * h + y) * w + xx) * co;
                    let drow = &dz[obase..obase + co];
                    for (j, &dj) in drow.iter().enumerate() {
                        db[j] += dj;
                    }
                    for dy in 0..kh {
                        let iy = y + dy;
                        if iy < pt || iy - pt >= h {
                            continue;
                        }
                        let iy = iy - pt;
                        for dxk in 0..kw {
                            let ix = xx + dxk;
                            if ix < pl || ix - pl >= w {
                                continue;
                            }
                            let ix = ix - pl;
                            let ibase = ((s * h + iy) * w + ix) * ci;
                            let kbase = (dy * kw + dxk) * ci * co;
                            for i in 0..ci {
                                let xi = x[ibase + i];
                                let krow = &k[kbase + i * co..kbase + (i + 1) * co];
                                let dkrow = &mut dkd[kbase + i * co..kbase + (i + 1) * co];
                                let mut acc = 0.0;
                                for (j, &dj) in drow.iter().enumerate() {
                                    dkrow[j] += xi * dj;
                                    acc += krow[j] * dj;
                                }
                                dxd[ibase + i] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dk, db, dx)
}

/// Loss and full-model gradient for one batch.
///
/// Classification (softmax-final + class targets) uses mean cross-entropy;
/// toy segmentation (sigmoid + mask targets) uses mean soft-Dice loss.
pub fn loss_and_grad(model: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    check_loss_pairing(model, &batch.targets)?;
    let trace = forward_trace(model, &batch.inputs)?;
    let pred = trace.post.last().unwrap();

    let (loss, mut d_pre_last) = match &batch.targets {
        Targets::Classes(classes) => cross_entropy(pred, classes)?,
        Targets::Masks(masks) => {
            let (loss, d_pred) = soft_dice(pred, masks)?;
            let z = trace.pre.last().unwrap();
            (
                loss,
                activation_backward(&d_pred, z, pred, Activation::Sigmoid),
            )
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss)));
    }

    let n_layers = model.layers.len();
    let mut grad_layers: Vec<Option<Layer>> = (0..n_layers).map(|_| None).collect();
    for li in (0..n_layers).rev() {
        let layer = &model.layers[li];
        let input = if li == 0 {
            batch.inputs.clone()
        } else {
            trace.post[li - 1].clone()
        };
        let shaped_input = reshape_for(layer, &input)?;
        let (dw, db, dx) = match layer.spec.kind {
            LayerKind::Dense { .. } => dense_backward(layer, &shaped_input, &d_pre_last),
            LayerKind::Conv2d { .. } => conv_backward(layer, &shaped_input, &d_pre_last),
        };
        grad_layers[li] = Some(Layer {
            spec: layer.spec,
            weights: dw,
            bias: db,
        });
        if li > 0 {
            // Gradient w.r.t. this layer's input, reshaped to the previous
            // layer's output shape, then through its activation.
            let prev_shape = trace.post[li - 1].shape().to_vec();
            let d_input = Tensor::from_vec(&prev_shape, dx.data().to_vec())?;
            let prev = &model.layers[li - 1];
            d_pre_last = activation_backward(
                &d_input,
                &trace.pre[li - 1],
                &trace.post[li - 1],
                prev.spec.activation,
            );
        }
    }
    let grads = ModelParams::new(grad_layers.into_iter().map(Option::unwrap).collect())?;
    Ok((loss, grads))
}

/// One SGD step: `w' = w - lr * g`, element-wise.
pub fn sgd_step(model: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    if lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be >= 0, got {}", lr)));
    }
    model.zip(grads, |w, g| w - lr * g)
}

/// Mini-batch SGD over `epochs` full passes of the shard `idx`.
///
/// Batch order reshuffles every epoch from a seed derived off `stream_seed`
/// and the epoch index, so results are independent of worker scheduling.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    inputs: &Tensor,
    targets: &Targets,
    idx: &[usize],
    start: &ModelParams,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    stream_seed: u64,
) -> Result<ModelParams> {
    if idx.is_empty() {
        return Err(Error::Config("client dataset is empty".into()));
    }
    if epochs == 0 {
        return Err(Error::Config("local epochs must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut model = start.clone();
    let mut order: Vec<usize> = idx.to_vec();
    for epoch in 0..epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(stream_seed, &[epoch as u64]));
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = gather_batch(inputs, targets, chunk);
            let (_, grads) = loss_and_grad(&model, &batch)?;
            model = sgd_step(&model, &grads, lr)?;
        }
    }
    Ok(model)
}

/// Fisher-Yates shuffle driven by the given RNG.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Mean loss of `model` over the full index set, evaluated in fixed chunks.
pub fn dataset_loss(
    model: &ModelParams,
    inputs: &Tensor,
    targets: &Targets,
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::Config("cannot evaluate loss on an empty index set".into()));
    }
    let mut total = 0.0;
    for chunk in idx.chunks(64) {
        let batch = gather_batch(inputs, targets, chunk);
        let (loss, _) = loss_and_grad(model, &batch)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}
