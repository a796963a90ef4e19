//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use oodfuzz_core::nn::{Layer, Network};
use oodfuzz_core::{Dataset, Tensor};
use rand::Rng;

/// Dense layer parameters in `f64`, row-major `[out][in]`.
#[derive(Clone, Debug)]
pub struct RefDense {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub relu: bool,
}

pub fn random_mlp(rng: &mut impl Rng, input: usize, widths: &[usize]) -> (Network, Vec<RefDense>) {
    let mut layers = Vec::new();
    let mut refs = Vec::new();
    let mut fan_in = input;
    for (i, &out) in widths.iter().enumerate() {
        let scale = (2.0 / fan_in as f32).sqrt();
        let w: Vec<Vec<f32>> = (0..out)
            .map(|_| (0..fan_in).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect())
            .collect();
        let b: Vec<f32> = (0..out).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let relu = i + 1 < widths.len();
        refs.push(RefDense {
            w: w.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect(),
            b: b.iter().map(|&v| f64::from(v)).collect(),
            relu,
        });
        layers.push(Layer::dense(w, b).unwrap());
        if relu {
            layers.push(Layer::Relu);
        }
        fan_in = out;
    }
    let net = Network::new(vec![input], *widths.last().unwrap(), layers).unwrap();
    (net, refs)
}

/// Post-activation values of every dense layer, last entry being the logits.
pub fn forward_ref(layers: &[RefDense], input: &[f64]) -> Vec<Vec<f64>> {
    let mut act = input.to_vec();
    let mut outs = Vec::new();
    for l in layers {
        let mut next = Vec::with_capacity(l.b.len());
        for (row, &bias) in l.w.iter().zip(&l.b) {
            let mut z = bias;
            for (wv, x) in row.iter().zip(&act) {
                z += wv * x;
            }
            next.push(if l.relu { z.max(0.0) } else { z });
        }
        outs.push(next.clone());
        act = next;
    }
    outs
}

/// Smallest |pre-activation| over all hidden units; ReLU kinks closer than
/// the finite-difference step make the check meaningless.
pub fn min_hidden_preactivation(layers: &[RefDense], input: &[f64]) -> f64 {
    let mut act = input.to_vec();
    let mut min = f64::INFINITY;
    for l in layers {
        let z: Vec<f64> = l
            .w
            .iter()
            .zip(&l.b)
            .map(|(row, &b)| b + row.iter().zip(&act).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        if l.relu {
            min = z.iter().fold(min, |m, v| m.min(v.abs()));
            act = z.iter().map(|v| v.max(0.0)).collect();
        } else {
            act = z;
        }
    }
    min
}

pub fn cross_entropy_ref(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn loss_ref(layers: &[RefDense], input: &[f64], label: usize) -> f64 {
    cross_entropy_ref(forward_ref(layers, input).last().unwrap(), label)
}

/// Central differences for every weight and bias, in layer order, weights
/// row-major followed by biases.
pub fn fd_gradients(layers: &[RefDense], input: &[f64], label: usize, h: f64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut work = layers.to_vec();
    let mut grads = Vec::new();
    for li in 0..layers.len() {
        let mut gw = Vec::new();
        for o in 0..layers[li].w.len() {
            for i in 0..layers[li].w[o].len() {
                let orig = work[li].w[o][i];
                work[li].w[o][i] = orig + h;
                let up = loss_ref(&work, input, label);
                work[li].w[o][i] = orig - h;
                let down = loss_ref(&work, input, label);
                work[li].w[o][i] = orig;
                gw.push((up - down) / (2.0 * h));
            }
        }
        let mut gb = Vec::new();
        for o in 0..layers[li].b.len() {
            let orig = work[li].b[o];
            work[li].b[o] = orig + h;
            let up = loss_ref(&work, input, label);
            work[li].b[o] = orig - h;
            let down = loss_ref(&work, input, label);
            work[li].b[o] = orig;
            gb.push((up - down) / (2.0 * h));
        }
        grads.push((gw, gb));
    }
    grads
}

/// NC by definition: per input and layer, min-max scale and compare.
pub fn nc_oracle(groups: &[std::ops::Range<usize>], traces: &[Vec<f32>], t: f32) -> Vec<bool> {
    let n = groups.last().map_or(0, |g| g.end);
    let mut covered = vec![false; n];
    for values in traces {
        for g in groups {
            let layer: Vec<f64> = values[g.clone()].iter().map(|&v| f64::from(v)).collect();
            let lo = layer.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = layer.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (j, &v) in layer.iter().enumerate() {
                if hi > lo && (v - lo) > f64::from(t) * (hi - lo) {
                    covered[g.start + j] = true;
                }
            }
        }
    }
    covered
}

/// KMNC by definition: a value in `[low, high]` falls in the section whose
/// lower boundary `low + s * (high - low) / k` it has passed last.
pub fn kmnc_oracle(low: &[f32], high: &[f32], traces: &[Vec<f32>], k: usize) -> Vec<bool> {
    let mut covered = vec![false; low.len() * k];
    for values in traces {
        for (n, &v) in values.iter().enumerate() {
            let (lo, hi, v) = (f64::from(low[n]), f64::from(high[n]), f64::from(v));
            if v < lo || v > hi {
                continue;
            }
            let mut section = 0;
            for s in 1..k {
                // v >= lo + s * (hi - lo) / k, multiplied through by k
                if (v - lo) * k as f64 >= s as f64 * (hi - lo) {
                    section = s;
                }
            }
            covered[n * k + section] = true;
        }
    }
    covered
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![h, w, 1], (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Gaussian-blob digits: class `c` puts a bright blob at one of ten fixed
/// spots on a `side x side` canvas.
pub fn blob_dataset(rng: &mut impl Rng, n: usize, side: usize, classes: usize) -> Dataset {
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        let angle = c as f64 / classes as f64 * std::f64::consts::TAU;
        let r = side as f64 * 0.3;
        let cy = side as f64 / 2.0 + r * angle.sin() + rng.random_range(-0.7..0.7);
        let cx = side as f64 / 2.0 + r * angle.cos() + rng.random_range(-0.7..0.7);
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = 230.0 * (-d2 / 4.0).exp() + rng.random_range(0.0..20.0);
                pixels.push(v.min(255.0) as u8);
            }
        }
        labels.push(c);
    }
    Dataset::new("blobs", [side, side, 1], pixels, labels).unwrap()
}
