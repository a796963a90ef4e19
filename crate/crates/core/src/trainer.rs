//! Mini-batch SGD for dense networks, Outlier Exposure training and the
//! three-arm retraining experiment.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{export_errors, materialize, ErrorSelection};
use crate::error::{Error, Result};
use crate::fuzzer::CorpusRecord;
use crate::model_io::Dataset;
use crate::nn::{accumulate_gradients, forward_trace, Gradients, Layer, Network, Target};

/// Samples per gradient work unit. Fixed so that the reduction order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Weight of the uniform-target term on outliers.
    pub oe_lambda: f64,
    /// Re-initialize instead of fine-tuning (retraining only).
    pub from_scratch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            oe_lambda: 0.5,
            from_scratch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.oe_lambda >= 0.0 && self.oe_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("oe_lambda must be >= 0, got {}", self.oe_lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn images_f32(data: &Dataset) -> Vec<f32> {
    data.pixels().iter().map(|&b| f32::from(b) / 255.0).collect()
}

struct Sample<'a> {
    input: &'a [f32],
    target: Target,
    weight: f64,
}

fn batch_gradients(net: &Network, samples: &[Sample<'_>]) -> Result<(Gradients, f64)> {
    let parts: Vec<Result<(Gradients, f64)>> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(net);
            let mut loss = 0.0;
            for s in chunk {
                loss += s.weight * accumulate_gradients(net, s.input, &s.target, s.weight, &mut g)?;
            }
            Ok((g, loss))
        })
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for part in parts {
        let (g, l) = part?;
        total.add_scaled(&g, 1.0);
        loss += l;
    }
    Ok((total, loss))
}

fn sgd_step(net: &mut Network, grads: &Gradients, velocity: &mut Gradients, cfg: &TrainConfig) {
    velocity.scale(cfg.momentum);
    velocity.add_scaled(grads, 1.0);
    for (i, dense) in net.dense_layers_mut() {
        let v = velocity.layers[i].as_ref().expect("dense velocity slot");
        for (w, dv) in dense.weights.data_mut().iter_mut().zip(&v.weights) {
            *w = (f64::from(*w) - cfg.learning_rate * dv) as f32;
        }
        for (b, dv) in dense.bias.data_mut().iter_mut().zip(&v.bias) {
            *b = (f64::from(*b) - cfg.learning_rate * dv) as f32;
        }
    }
}

fn check_input(net: &Network, data: &Dataset) -> Result<()> {
    let [h, w, c] = data.dims();
    let expected: usize = net.input_shape().iter().product();
    if h * w * c != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: h * w * c,
        });
    }
    Ok(())
}

fn fit(net: &Network, data: &Dataset, outliers: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Network, TrainOutcome)> {
    cfg.validate()?;
    if !net.is_trainable() {
        return Err(Error::Unsupported("training supports dense/relu/flatten networks only".into()));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_input(net, data)?;
    data.check_labels(net.class_count())?;
    let outliers = match outliers {
        Some(o) if o.is_empty() => return Err(Error::EmptyDataset),
        Some(o) if cfg.oe_lambda > 0.0 => {
            check_input(net, o)?;
            Some(o)
        }
        _ => None,
    };

    let dim = data.image_len();
    let pixels = images_f32(data);
    let outlier_pixels = outliers.map(images_f32);
    let mut net = net.clone();
    let mut velocity = Gradients::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outlier_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    outlier_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut outlier_order: Vec<usize> = (0..outliers.map_or(0, Dataset::len)).collect();
    let mut outlier_cursor = outlier_order.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let mut samples: Vec<Sample<'_>> = batch
                .iter()
                .map(|&i| Sample {
                    input: &pixels[i * dim..(i + 1) * dim],
                    target: Target::Class(data.label(i)),
                    weight: w,
                })
                .collect();
            if let Some(op) = &outlier_pixels {
                let ow = cfg.oe_lambda * w;
                for _ in 0..batch.len() {
                    if outlier_cursor == outlier_order.len() {
                        outlier_order.shuffle(&mut outlier_rng);
                        outlier_cursor = 0;
                    }
                    let j = outlier_order[outlier_cursor];
                    outlier_cursor += 1;
                    samples.push(Sample {
                        input: &op[j * dim..(j + 1) * dim],
                        target: Target::Uniform,
                        weight: ow,
                    });
                }
            }
            let (grads, loss) = batch_gradients(&net, &samples)?;
            sgd_step(&mut net, &grads, &mut velocity, cfg);
            epoch_loss += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok((net, TrainOutcome { epoch_losses }))
}

/// SGD with momentum on mean cross-entropy.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainOutcome)> {
    fit(net, data, None, cfg)
}

/// Cross-entropy on `data` plus `oe_lambda` times cross-entropy to the
/// uniform distribution on `outliers` (labels ignored).
pub fn oe_train(net: &Network, data: &Dataset, outliers: &Dataset, cfg: &TrainConfig) -> Result<(Network, TrainOutcome)> {
    if outliers.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fit(net, data, Some(outliers), cfg)
}

/// Fraction of `data` classified as labelled.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_input(net, data)?;
    let shape = net.input_shape().to_vec();
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let input = data.image(i);
            let input = crate::tensor::Tensor::new(shape.clone(), input.into_data())?;
            Ok(usize::from(forward_trace(net, &input)?.predicted_class == data.label(i)))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Label-free auxiliary images: uniform noise plus random strokes, boxes,
/// rings and checkerboards.
pub fn synthetic_outliers(count: usize, dims: [usize; 3], seed: u64) -> Result<Dataset> {
    let [h, w, c] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * h * w * c);
    for n in 0..count {
        let mut img = vec![0u8; h * w];
        match n % 5 {
            0 => img.iter_mut().for_each(|p| *p = rng.random()),
            1 => {
                let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
                let fill = rng.random_bool(0.5);
                let shade: u8 = rng.random_range(128..=255);
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        if fill || y == y0 || y == y1 || x == x0 || x == x1 {
                            img[y * w + x] = shade;
                        }
                    }
                }
            }
            2 => {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(2.0..(h.min(w) as f64 / 2.0).max(2.5));
                let thick = rng.random_range(1.0..3.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        if (d - r).abs() < thick {
                            img[y * w + x] = 255;
                        }
                    }
                }
            }
            3 => {
                let cell = rng.random_range(2..=7usize);
                let phase = rng.random_range(0..2usize);
                for y in 0..h {
                    for x in 0..w {
                        if (y / cell + x / cell + phase) % 2 == 0 {
                            img[y * w + x] = 255;
                        }
                    }
                }
            }
            _ => {
                let strokes = rng.random_range(1..=4);
                for _ in 0..strokes {
                    let angle = rng.random_range(0.0..std::f64::consts::PI);
                    let (sy, sx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
                    let len = rng.random_range(1.0..(h.max(w) as f64).max(2.0));
                    let steps = (len * 2.0) as usize;
                    for s in 0..steps {
                        let t = s as f64 / 2.0 - len / 2.0;
                        let y = (sy + t * angle.sin()).round();
                        let x = (sx + t * angle.cos()).round();
                        if y >= 0.0 && x >= 0.0 && (y as usize) < h && (x as usize) < w {
                            img[y as usize * w + x as usize] = 255;
                        }
                    }
                }
            }
        }
        for p in img {
            pixels.extend(std::iter::repeat_n(p, c));
        }
    }
    Dataset::new("synthetic-outliers", dims, pixels, vec![0; count])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub arms: Vec<ErrorSelection>,
    pub retrain_error_count: usize,
    pub holdout_error_count: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            arms: vec![ErrorSelection::Random, ErrorSelection::IdOnly, ErrorSelection::OodOnly],
            retrain_error_count: 1000,
            holdout_error_count: 200,
            train: TrainConfig::default(),
        }
    }
}

/// Where the error holdout comes from.
pub enum Holdout<'a> {
    /// A random error sample from the retraining corpus itself.
    Sample,
    /// Errors of the retraining corpus that a second run (typically under the
    /// other coverage criterion) also found. Falls back to `Sample` when the
    /// overlap is too small.
    Shared(&'a [CorpusRecord]),
}

fn error_key(r: &CorpusRecord) -> String {
    format!("{}:{}", r.dataset_index, serde_json::to_string(&r.chain).expect("chain serialization is infallible"))
}

/// Errors of `records` whose input also appears as an error in `other`.
pub fn shared_errors(records: &[CorpusRecord], other: &[CorpusRecord]) -> Vec<CorpusRecord> {
    let keys: HashSet<String> = other
        .iter()
        .filter(|r| ErrorSelection::Random.accepts(r))
        .map(error_key)
        .collect();
    records
        .iter()
        .filter(|r| ErrorSelection::Random.accepts(r) && keys.contains(&error_key(r)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: ErrorSelection,
    pub retrain_ids: usize,
    pub holdout_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub holdout_source: String,
    pub holdout_size: usize,
    pub base_holdout_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_test_accuracy: Option<f64>,
    pub arms: Vec<ArmResult>,
}

fn dense_widths(net: &Network) -> Vec<usize> {
    net.layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Dense(d) => Some(d.out_dim),
            _ => None,
        })
        .collect()
}

/// Retrains `base` once per arm on `train` plus that arm's errors (with seed
/// labels) and scores every arm on one fixed error holdout.
pub fn retrain_experiment(
    base: &Network,
    train_set: &Dataset,
    records: &[CorpusRecord],
    seeds: &Dataset,
    holdout: Holdout<'_>,
    test: Option<&Dataset>,
    spec: &ExperimentSpec,
) -> Result<ExperimentResult> {
    spec.train.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
    let shared = match holdout {
        Holdout::Shared(other) => shared_errors(records, other),
        Holdout::Sample => Vec::new(),
    };
    let (pool, holdout_source) = if shared.len() >= spec.holdout_error_count {
        (shared.as_slice(), "shared_errors")
    } else {
        (records, "random_sample")
    };
    let picked = export_errors(pool, ErrorSelection::Random, spec.holdout_error_count, &mut rng, &HashSet::new())?;
    let holdout_ids: HashSet<u64> = picked.iter().map(|r| r.id).collect();
    let holdout_set = materialize(&picked, seeds, "holdout")?;
    let holdout_source = holdout_source.to_string();

    let base_holdout_accuracy = accuracy(base, &holdout_set)?;
    let base_test_accuracy = test.map(|t| accuracy(base, t)).transpose()?;
    let mut arms = Vec::with_capacity(spec.arms.len());
    for (n, &arm) in spec.arms.iter().enumerate() {
        let mut arm_rng = ChaCha8Rng::seed_from_u64(spec.train.seed);
        arm_rng.set_stream(2 + n as u64);
        let picked = export_errors(records, arm, spec.retrain_error_count, &mut arm_rng, &holdout_ids)?;
        if let Some(r) = picked.iter().find(|r| holdout_ids.contains(&r.id)) {
            return Err(Error::HoldoutOverlap(r.id as usize));
        }
        let mut data = train_set.clone();
        data.extend(&materialize(&picked, seeds, arm.name())?)?;
        let start = if spec.train.from_scratch {
            Network::mlp(base.input_shape().to_vec(), &dense_widths(base), spec.train.seed)?
        } else {
            base.clone()
        };
        let (net, outcome) = train(&start, &data, &spec.train)?;
        arms.push(ArmResult {
            arm,
            retrain_ids: picked.len(),
            holdout_accuracy: accuracy(&net, &holdout_set)?,
            test_accuracy: test.map(|t| accuracy(&net, t)).transpose()?,
            final_loss: outcome.epoch_losses.last().copied(),
        });
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        holdout_source,
        holdout_size: holdout_set.len(),
        base_holdout_accuracy,
        base_test_accuracy,
        arms,
    })
}
