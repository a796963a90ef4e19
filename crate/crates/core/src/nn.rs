//! Feed-forward runtime: shape-checked layer stacks, activation capture for
//! coverage analysis, and cross-entropy backpropagation for dense networks.
//!
//! Activations are stored as `f32`. The backward pass accumulates in `f64`
//! so that analytic gradients stay well inside finite-difference agreement.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[out_dim, in_dim]`, output-major.
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out_channels, in_channels, kernel, kernel]`.
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool2x2,
    Flatten,
    Relu,
    /// Terminal marker; logits are taken before it.
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::Flatten => "flatten",
            Layer::Relu => "relu",
            Layer::Softmax => "softmax",
        }
    }

    pub fn dense(weights: Vec<Vec<f32>>, bias: Vec<f32>) -> Result<Layer> {
        let out_dim = weights.len();
        let in_dim = weights.first().map_or(0, Vec::len);
        if weights.iter().any(|row| row.len() != in_dim) {
            return Err(Error::InvalidConfig("ragged dense weight rows".into()));
        }
        Ok(Layer::Dense(Dense {
            in_dim,
            out_dim,
            weights: Tensor::new(vec![out_dim, in_dim], weights.concat())?,
            bias: Tensor::new(vec![bias.len()], bias)?,
        }))
    }
}

/// One coverage neuron: unit `unit` of the dense/conv layer at `layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<Layer>,
    /// Output shape of every layer.
    shapes: Vec<Vec<usize>>,
    neurons: Vec<NeuronId>,
    /// Flat neuron ranges, one per dense/conv layer, in layer order.
    groups: Vec<Range<usize>>,
    logit_layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub neuron_values: Vec<f32>,
    pub logits: Vec<f32>,
    pub penultimate: Vec<f32>,
    pub predicted_class: usize,
}

impl Network {
    /// Builds a network and type-checks the layer chain.
    pub fn new(input_shape: Vec<usize>, class_count: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "input shape must have positive dimensions, got {input_shape:?}"
            )));
        }
        if class_count == 0 {
            return Err(Error::InvalidConfig("class_count must be positive".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut neurons = Vec::new();
        let mut groups = Vec::new();
        let mut current = input_shape.clone();
        for (index, layer) in layers.iter().enumerate() {
            let mismatch = |detail: String| Error::ShapeMismatch {
                layer: index,
                detail,
            };
            current = match layer {
                Layer::Dense(d) => {
                    let n: usize = current.iter().product();
                    if n != d.in_dim {
                        return Err(mismatch(format!(
                            "dense expects {} inputs, predecessor produces {:?}",
                            d.in_dim, current
                        )));
                    }
                    if d.weights.shape() != [d.out_dim, d.in_dim] || d.bias.shape() != [d.out_dim] {
                        return Err(mismatch(format!(
                            "dense {}x{} has weights {:?} and bias {:?}",
                            d.out_dim,
                            d.in_dim,
                            d.weights.shape(),
                            d.bias.shape()
                        )));
                    }
                    let start = neurons.len();
                    neurons.extend((0..d.out_dim).map(|unit| NeuronId { layer: index, unit }));
                    groups.push(start..neurons.len());
                    vec![d.out_dim]
                }
                Layer::Conv2d(c) => {
                    let [h, w, ch] = current[..] else {
                        return Err(mismatch(format!("conv2d needs an HxWxC input, got {current:?}")));
                    };
                    if ch != c.in_channels {
                        return Err(mismatch(format!(
                            "conv2d expects {} input channels, got {ch}",
                            c.in_channels
                        )));
                    }
                    if c.kernel == 0 || c.stride == 0 || c.kernel > h || c.kernel > w {
                        return Err(mismatch(format!(
                            "kernel {} / stride {} invalid for {h}x{w} input",
                            c.kernel, c.stride
                        )));
                    }
                    let wshape = [c.out_channels, c.in_channels, c.kernel, c.kernel];
                    if c.weights.shape() != wshape || c.bias.shape() != [c.out_channels] {
                        return Err(mismatch(format!(
                            "conv2d weights {:?} / bias {:?} do not match {:?}",
                            c.weights.shape(),
                            c.bias.shape(),
                            wshape
                        )));
                    }
                    let start = neurons.len();
                    neurons.extend((0..c.out_channels).map(|unit| NeuronId { layer: index, unit }));
                    groups.push(start..neurons.len());
                    vec![(h - c.kernel) / c.stride + 1, (w - c.kernel) / c.stride + 1, c.out_channels]
                }
                Layer::MaxPool2x2 => {
                    let [h, w, ch] = current[..] else {
                        return Err(mismatch(format!("maxpool2x2 needs an HxWxC input, got {current:?}")));
                    };
                    if h < 2 || w < 2 {
                        return Err(mismatch(format!("maxpool2x2 on {h}x{w} map")));
                    }
                    vec![h / 2, w / 2, ch]
                }
                Layer::Flatten => vec![current.iter().product()],
                Layer::Relu => current.clone(),
                Layer::Softmax => {
                    if index + 1 != layers.len() {
                        return Err(mismatch("softmax is only allowed as the final layer".into()));
                    }
                    current.clone()
                }
            };
            shapes.push(current.clone());
        }
        let out: usize = current.iter().product();
        if out != class_count {
            return Err(Error::ShapeMismatch {
                layer: layers.len().saturating_sub(1),
                detail: format!("network produces {out} outputs but class_count is {class_count}"),
            });
        }
        let logit_layer = layers
            .iter()
            .rposition(|l| matches!(l, Layer::Dense(_) | Layer::Conv2d(_)))
            .filter(|&i| matches!(layers[i], Layer::Dense(_)))
            .ok_or_else(|| Error::Unsupported("the last parametric layer must be dense".into()))?;
        Ok(Network {
            input_shape,
            class_count,
            layers,
            shapes,
            neurons,
            groups,
            logit_layer,
        })
    }

    /// He-initialized dense/relu stack. `widths` lists the hidden layer
    /// widths followed by the class count, e.g. `[128, 64, 10]`.
    pub fn mlp(input_shape: Vec<usize>, widths: &[usize], seed: u64) -> Result<Self> {
        let Some(&classes) = widths.last() else {
            return Err(Error::InvalidConfig("an MLP needs at least an output width".into()));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut fan_in: usize = input_shape.iter().product();
        for (i, &fan_out) in widths.iter().enumerate() {
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            let weights = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            layers.push(Layer::Dense(Dense {
                in_dim: fan_in,
                out_dim: fan_out,
                weights: Tensor::new(vec![fan_out, fan_in], weights)?,
                bias: Tensor::zeros(vec![fan_out]),
            }));
            if i + 1 < widths.len() {
                layers.push(Layer::Relu);
            }
            fan_in = fan_out;
        }
        Network::new(input_shape, classes, layers)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to dense parameters only; shapes cannot change.
    pub fn dense_layers_mut(&mut self) -> impl Iterator<Item = (usize, &mut Dense)> {
        self.layers.iter_mut().enumerate().filter_map(|(i, l)| match l {
            Layer::Dense(d) => Some((i, d)),
            _ => None,
        })
    }

    pub fn neurons(&self) -> &[NeuronId] {
        &self.neurons
    }

    pub fn neuron_count(&self) -> usize {
        self.neurons.len()
    }

    /// Neuron index ranges grouped by layer.
    pub fn neuron_groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn penultimate_dim(&self) -> usize {
        match &self.layers[self.logit_layer] {
            Layer::Dense(d) => d.in_dim,
            _ => unreachable!("logit layer is dense"),
        }
    }

    /// Whether every layer is within the trainable subset.
    pub fn is_trainable(&self) -> bool {
        self.layers
            .iter()
            .all(|l| matches!(l, Layer::Dense(_) | Layer::Relu | Layer::Flatten | Layer::Softmax))
    }

    pub fn forward_trace(&self, input: &Tensor) -> Result<ActivationTrace> {
        forward_trace(self, input)
    }
}

pub fn forward_trace(net: &Network, input: &Tensor) -> Result<ActivationTrace> {
    if input.shape() != net.input_shape.as_slice() {
        return Err(Error::RejectedInput {
            expected: net.input_shape.clone(),
            got: input.shape().to_vec(),
        });
    }
    let mut neuron_values = Vec::with_capacity(net.neurons.len());
    let mut penultimate = Vec::new();
    let mut shape = net.input_shape.clone();
    let mut act = input.data().to_vec();
    let mut i = 0;
    while i < net.layers.len() {
        let layer = &net.layers[i];
        if i == net.logit_layer {
            penultimate = act.clone();
        }
        act = match layer {
            Layer::Dense(d) => dense_forward(d, &act),
            Layer::Conv2d(c) => conv_forward(c, &act, &shape),
            Layer::MaxPool2x2 => maxpool_forward(&act, &shape),
            Layer::Flatten => act,
            Layer::Relu => relu(act),
            Layer::Softmax => break,
        };
        shape.clone_from(&net.shapes[i]);
        if matches!(layer, Layer::Dense(_) | Layer::Conv2d(_)) {
            // Neuron values are post-activation.
            if matches!(net.layers.get(i + 1), Some(Layer::Relu)) {
                act = relu(act);
                i += 1;
            }
            match layer {
                Layer::Conv2d(c) => {
                    let plane = act.len() / c.out_channels;
                    for ch in 0..c.out_channels {
                        let sum: f64 = act[ch..].iter().step_by(c.out_channels).map(|&v| f64::from(v)).sum();
                        neuron_values.push((sum / plane as f64) as f32);
                    }
                }
                _ => neuron_values.extend_from_slice(&act),
            }
        }
        i += 1;
    }
    let predicted_class = argmax(&act);
    Ok(ActivationTrace {
        neuron_values,
        logits: act,
        penultimate,
        predicted_class,
    })
}

pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn relu(mut v: Vec<f32>) -> Vec<f32> {
    for x in &mut v {
        *x = x.max(0.0);
    }
    v
}

fn dense_forward(d: &Dense, input: &[f32]) -> Vec<f32> {
    let w = d.weights.data();
    d.bias
        .data()
        .iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &w[o * d.in_dim..(o + 1) * d.in_dim];
            b + row.iter().zip(input).map(|(a, x)| a * x).sum::<f32>()
        })
        .collect()
}

fn conv_forward(c: &Conv2d, input: &[f32], shape: &[usize]) -> Vec<f32> {
    let (h, w, cin) = (shape[0], shape[1], shape[2]);
    let k = c.kernel;
    let oh = (h - k) / c.stride + 1;
    let ow = (w - k) / c.stride + 1;
    let weights = c.weights.data();
    let bias = c.bias.data();
    let mut out = vec![0.0f32; oh * ow * c.out_channels];
    for oy in 0..oh {
        for ox in 0..ow {
            for oc in 0..c.out_channels {
                let mut acc = bias[oc];
                for ic in 0..cin {
                    for ky in 0..k {
                        let iy = oy * c.stride + ky;
                        for kx in 0..k {
                            let ix = ox * c.stride + kx;
                            acc += weights[((oc * cin + ic) * k + ky) * k + kx] * input[(iy * w + ix) * cin + ic];
                        }
                    }
                }
                out[(oy * ow + ox) * c.out_channels + oc] = acc;
            }
        }
    }
    out
}

fn maxpool_forward(input: &[f32], shape: &[usize]) -> Vec<f32> {
    let (h, w, ch) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![f32::NEG_INFINITY; oh * ow * ch];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ch {
                let o = &mut out[(oy * ow + ox) * ch + c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        *o = o.max(input[((2 * oy + dy) * w + 2 * ox + dx) * ch + c]);
                    }
                }
            }
        }
    }
    out
}

/// Temperature-scaled softmax with max-subtraction.
pub fn softmax(logits: &[f32], temperature: f32) -> Vec<f32> {
    let wide: Vec<f64> = logits.iter().map(|&v| f64::from(v)).collect();
    softmax_f64(&wide, f64::from(temperature))
        .into_iter()
        .map(|p| p as f32)
        .collect()
}

pub(crate) fn softmax_f64(logits: &[f64], temperature: f64) -> Vec<f64> {
    debug_assert!(temperature > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Parameter gradients, aligned with `Network::layers()`; `None` for layers
/// without parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<DenseGrad>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    /// `[out_dim * in_dim]`, same layout as the weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => Some(DenseGrad {
                        weights: vec![0.0; d.in_dim * d.out_dim],
                        bias: vec![0.0; d.out_dim],
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.layers.iter_mut().flatten() {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += factor * y);
                a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += factor * y);
            }
        }
    }
}

/// Cross-entropy gradients for a single labelled input.
pub fn backward(net: &Network, input: &Tensor, label: usize) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(net);
    accumulate_gradients(net, input.data(), &Target::Class(label), 1.0, &mut grads)?;
    Ok(grads)
}

/// Mean cross-entropy gradients over a batch of labelled inputs.
pub fn batch_backward(net: &Network, batch: &[(&Tensor, usize)]) -> Result<(Gradients, f64)> {
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let w = 1.0 / batch.len().max(1) as f64;
    for (input, label) in batch {
        if input.shape() != net.input_shape.as_slice() {
            return Err(Error::RejectedInput {
                expected: net.input_shape.clone(),
                got: input.shape().to_vec(),
            });
        }
        loss += w * accumulate_gradients(net, input.data(), &Target::Class(*label), w, &mut grads)?;
    }
    Ok((grads, loss))
}

/// Training target: a class index or the uniform distribution (outlier exposure).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Uniform,
}

/// Cross-entropy loss of `input` against `target`, evaluated in `f64`.
pub fn loss(net: &Network, input: &[f32], target: &Target) -> Result<f64> {
    check_trainable(net)?;
    let (_, logits) = dense_forward_f64(net, input);
    Ok(cross_entropy(&logits, target, net.class_count).0)
}

fn check_trainable(net: &Network) -> Result<()> {
    match net.layers.iter().find(|l| !matches!(l, Layer::Dense(_) | Layer::Relu | Layer::Flatten | Layer::Softmax)) {
        Some(l) => Err(Error::Unsupported(format!(
            "backpropagation supports dense/relu/flatten networks only, found `{}`",
            l.kind()
        ))),
        None => Ok(()),
    }
}

/// Adds `weight * dL/dθ` into `grads` and returns the unweighted loss.
pub fn accumulate_gradients(
    net: &Network,
    input: &[f32],
    target: &Target,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64> {
    check_trainable(net)?;
    if let Target::Class(c) = target {
        if *c >= net.class_count {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: *c,
                class_count: net.class_count,
            });
        }
    }
    let (inputs, logits) = dense_forward_f64(net, input);
    let (loss, mut delta) = cross_entropy(&logits, target, net.class_count);
    for (i, layer) in net.layers.iter().enumerate().rev() {
        match layer {
            Layer::Dense(d) => {
                let a = &inputs[i];
                let g = grads.layers[i].as_mut().expect("dense gradient slot");
                for (o, &dz) in delta.iter().enumerate() {
                    let dz = dz * weight;
                    g.bias[o] += dz;
                    for (gw, &x) in g.weights[o * d.in_dim..(o + 1) * d.in_dim].iter_mut().zip(a) {
                        *gw += dz * x;
                    }
                }
                if i == 0 {
                    break;
                }
                let w = d.weights.data();
                let mut prev = vec![0.0f64; d.in_dim];
                for (o, &dz) in delta.iter().enumerate() {
                    for (p, &wv) in prev.iter_mut().zip(&w[o * d.in_dim..(o + 1) * d.in_dim]) {
                        *p += dz * f64::from(wv);
                    }
                }
                delta = prev;
            }
            Layer::Relu => {
                for (dv, &x) in delta.iter_mut().zip(&inputs[i]) {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            Layer::Flatten | Layer::Softmax => {}
            Layer::Conv2d(_) | Layer::MaxPool2x2 => unreachable!("checked trainable"),
        }
    }
    Ok(loss)
}

/// Returns the input of every layer and the final logits.
fn dense_forward_f64(net: &Network, input: &[f32]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut act: Vec<f64> = input.iter().map(|&v| f64::from(v)).collect();
    for layer in &net.layers {
        let next = match layer {
            Layer::Dense(d) => {
                let w = d.weights.data();
                d.bias
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(o, &b)| {
                        f64::from(b)
                            + w[o * d.in_dim..(o + 1) * d.in_dim]
                                .iter()
                                .zip(&act)
                                .map(|(&wv, &x)| f64::from(wv) * x)
                                .sum::<f64>()
                    })
                    .collect()
            }
            Layer::Relu => act.iter().map(|&x| x.max(0.0)).collect(),
            _ => act.clone(),
        };
        inputs.push(std::mem::replace(&mut act, next));
    }
    (inputs, act)
}

/// Loss and dL/dlogits for softmax cross-entropy against `target`.
fn cross_entropy(logits: &[f64], target: &Target, classes: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let probs: Vec<f64> = logits.iter().map(|&v| (v - log_sum).exp()).collect();
    match *target {
        Target::Class(c) => {
            let mut delta = probs;
            delta[c] -= 1.0;
            (log_sum - logits[c], delta)
        }
        Target::Uniform => {
            let u = 1.0 / classes as f64;
            let loss = logits.iter().map(|&v| u * (log_sum - v)).sum();
            (loss, probs.into_iter().map(|p| p - u).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net() -> Network {
        let layer = Layer::dense(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        Network::new(vec![2], 2, vec![layer]).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let trace = identity_net()
            .forward_trace(&Tensor::new(vec![2], vec![0.2, 0.8]).unwrap())
            .unwrap();
        assert_eq!(trace.logits, vec![0.2, 0.8]);
        assert_eq!(trace.predicted_class, 1);
        assert_eq!(trace.penultimate, vec![0.2, 0.8]);
    }

    #[test]
    fn relu_clamps_negative_units() {
        let layer = Layer::dense(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 0.0]).unwrap();
        let net = Network::new(vec![2], 2, vec![layer, Layer::Relu]).unwrap();
        let trace = net.forward_trace(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(trace.neuron_values, vec![0.5, 0.0]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let err = identity_net().forward_trace(&Tensor::zeros(vec![3])).unwrap_err();
        assert!(matches!(err, Error::RejectedInput { .. }));
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-7 && p[1].abs() < 1e-7);
        let a = softmax(&[2.0, 1.0], 2.0);
        let b = softmax(&[1.0, 0.5], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn conv_neuron_is_channel_mean() {
        // 1x1 kernel of weight 0 and bias v yields a constant map of v.
        let conv = Layer::Conv2d(Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 1,
            stride: 1,
            weights: Tensor::zeros(vec![2, 1, 1, 1]),
            bias: Tensor::new(vec![2], vec![0.37, 1.25]).unwrap(),
        });
        let head = Layer::dense(vec![vec![1.0; 18], vec![0.0; 18]], vec![0.0, 0.0]).unwrap();
        let net = Network::new(vec![3, 3, 1], 2, vec![conv, Layer::Relu, Layer::Flatten, head]).unwrap();
        assert_eq!(net.neuron_count(), 4);
        let trace = net.forward_trace(&Tensor::filled(vec![3, 3, 1], 0.5)).unwrap();
        assert_eq!(&trace.neuron_values[..2], &[0.37, 1.25]);
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let out = maxpool_forward(&[1.0, 2.0, 3.0, 4.0], &[2, 2, 1]);
        assert_eq!(out, vec![4.0]);
    }

    #[test]
    fn zero_network_bias_gradient_is_closed_form() {
        let layer = Layer::dense(vec![vec![0.0; 3]; 4], vec![0.0; 4]).unwrap();
        let net = Network::new(vec![3], 4, vec![layer]).unwrap();
        let g = backward(&net, &Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap(), 2).unwrap();
        let bias = &g.layers[0].as_ref().unwrap().bias;
        for (c, &b) in bias.iter().enumerate() {
            let expected = 0.25 - if c == 2 { 1.0 } else { 0.0 };
            assert!((b - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_matches_single_gradient() {
        let net = Network::mlp(vec![4], &[5, 3], 7).unwrap();
        let x = Tensor::new(vec![4], vec![0.1, 0.7, 0.3, 0.9]).unwrap();
        let single = backward(&net, &x, 1).unwrap();
        let (batch, _) = batch_backward(&net, &[(&x, 1), (&x, 1)]).unwrap();
        for (a, b) in single.layers.iter().flatten().zip(batch.layers.iter().flatten()) {
            for (x, y) in a.weights.iter().zip(&b.weights).chain(a.bias.iter().zip(&b.bias)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_networks_are_not_trainable() {
        let conv = Layer::Conv2d(Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 2,
            stride: 1,
            weights: Tensor::zeros(vec![1, 1, 2, 2]),
            bias: Tensor::zeros(vec![1]),
        });
        let head = Layer::dense(vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let net = Network::new(vec![2, 2, 1], 2, vec![conv, Layer::Flatten, head]).unwrap();
        let err = backward(&net, &Tensor::zeros(vec![2, 2, 1]), 0).unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn uniform_target_is_stationary_at_uniform_output() {
        let layer = Layer::dense(vec![vec![0.0; 2]; 3], vec![0.0; 3]).unwrap();
        let net = Network::new(vec![2], 3, vec![layer]).unwrap();
        let mut g = Gradients::zeros_like(&net);
        accumulate_gradients(&net, &[0.4, 0.6], &Target::Uniform, 1.0, &mut g).unwrap();
        let d = g.layers[0].as_ref().unwrap();
        assert!(d.weights.iter().chain(&d.bias).all(|v| v.abs() < 1e-15));
    }
}
