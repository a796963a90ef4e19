//! Training-set statistics: per-neuron activation ranges for KMNC, the
//! in-distribution OOD-score distribution with its 99th-percentile
//! threshold, and Mahalanobis parameters.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model_io::{model_fingerprint, Dataset};
use crate::nn::{ActivationTrace, Network};
use crate::ood::{MahalanobisParams, OodScorer, ScorerConfig, ScorerRegistry};

/// Percentile used for the OOD threshold.
pub const THRESHOLD_PERCENTILE: usize = 99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    /// Hash of the model and dataset fingerprints together.
    pub fingerprint: String,
    pub model_fingerprint: String,
    pub dataset_fingerprint: String,
    pub scorer: String,
    pub temperature: f64,
    pub low: Vec<f32>,
    pub high: Vec<f32>,
    /// Whether each neuron was ever strictly positive on the training set.
    pub active: Vec<bool>,
    /// Ascending.
    pub ood_scores: Vec<f64>,
    pub ood_threshold: f64,
    pub mahalanobis: Option<MahalanobisParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRanges {
    pub low: Vec<f32>,
    pub high: Vec<f32>,
    pub active: Vec<bool>,
}

impl Profile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string(self).expect("profile serialization is infallible");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Rejects a profile computed for a different model.
    pub fn check_model(&self, net: &Network) -> Result<()> {
        let model = model_fingerprint(net);
        if model != self.model_fingerprint || self.low.len() != net.neuron_count() {
            return Err(Error::ProfileMismatch {
                profile: self.model_fingerprint.clone(),
                model,
            });
        }
        Ok(())
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            temperature: Some(self.temperature),
            mahalanobis: self.mahalanobis.clone(),
        }
    }
}

/// Traces every training image, sharded across the rayon pool.
pub fn trace_dataset(net: &Network, data: &Dataset) -> Result<Vec<ActivationTrace>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| net.forward_trace(&data.image(i)))
        .collect()
}

pub fn profile_activations(net: &Network, train: &Dataset) -> Result<ActivationRanges> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ranges_from_traces(&trace_dataset(net, train)?))
}

pub fn ranges_from_traces(traces: &[ActivationTrace]) -> ActivationRanges {
    let n = traces.first().map_or(0, |t| t.neuron_values.len());
    let mut ranges = ActivationRanges {
        low: vec![f32::INFINITY; n],
        high: vec![f32::NEG_INFINITY; n],
        active: vec![false; n],
    };
    for t in traces {
        for (i, &v) in t.neuron_values.iter().enumerate() {
            ranges.low[i] = ranges.low[i].min(v);
            ranges.high[i] = ranges.high[i].max(v);
            ranges.active[i] |= v > 0.0;
        }
    }
    ranges
}

/// 1-based nearest rank `ceil(percent / 100 * n)`, at least 1.
pub fn nearest_rank(n: usize, percent: usize) -> usize {
    (percent * n).div_ceil(100).max(1)
}

/// Nearest-rank percentile of an ascending-sorted sample.
pub fn percentile(sorted: &[f64], percent: usize) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(sorted[nearest_rank(sorted.len(), percent) - 1])
}

/// Sorts scores ascending and returns them with their 99th-percentile
/// threshold.
pub fn threshold_from_scores(mut scores: Vec<f64>) -> Result<(Vec<f64>, f64)> {
    scores.sort_by(f64::total_cmp);
    let threshold = percentile(&scores, THRESHOLD_PERCENTILE)?;
    Ok((scores, threshold))
}

pub fn profile_ood(scorer: &dyn OodScorer, net: &Network, train: &Dataset) -> Result<(Vec<f64>, f64)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let traces = trace_dataset(net, train)?;
    let scores = traces.iter().map(|t| scorer.score(t)).collect::<Result<Vec<_>>>()?;
    threshold_from_scores(scores)
}

pub fn fit_mahalanobis(net: &Network, train: &Dataset) -> Result<MahalanobisParams> {
    let traces = trace_dataset(net, train)?;
    let features: Vec<&[f32]> = traces.iter().map(|t| t.penultimate.as_slice()).collect();
    fit_mahalanobis_features(&features, train.labels(), net.class_count())
}

/// Class means plus the pooled maximum-likelihood covariance, ridged by
/// `1e-3 * trace / dim`, inverted.
pub fn fit_mahalanobis_features(features: &[&[f32]], labels: &[usize], classes: usize) -> Result<MahalanobisParams> {
    if features.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if features.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: features.len(),
            labels: labels.len(),
        });
    }
    let dim = features[0].len();
    let mut counts = vec![0usize; classes];
    let mut means = vec![vec![0.0f64; dim]; classes];
    for (f, &c) in features.iter().zip(labels) {
        if c >= classes {
            return Err(Error::LabelOutOfRange {
                index: 0,
                label: c,
                class_count: classes,
            });
        }
        if f.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.len() });
        }
        counts[c] += 1;
        for (m, &v) in means[c].iter_mut().zip(f.iter()) {
            *m += f64::from(v);
        }
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(Error::InsufficientClassSamples { class, count });
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut cov = vec![0.0f64; dim * dim];
    let mut diff = vec![0.0f64; dim];
    for (f, &c) in features.iter().zip(labels) {
        for ((d, &v), &m) in diff.iter_mut().zip(f.iter()).zip(&means[c]) {
            *d = f64::from(v) - m;
        }
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] += diff[i] * diff[j];
            }
        }
    }
    let n = features.len() as f64;
    for i in 0..dim {
        for j in 0..=i {
            let v = cov[i * dim + j] / n;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    // A fully degenerate feature space still needs a positive ridge.
    let eps = if trace > 0.0 { 1e-3 * trace / dim as f64 } else { 1e-6 };
    for i in 0..dim {
        cov[i * dim + i] += eps;
    }
    MahalanobisParams::new(means, invert_spd(&cov, dim)?)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn invert_spd(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                let d = matrix[i * n + i] - s;
                if d <= 0.0 {
                    return Err(Error::InvalidConfig("covariance is not positive definite".into()));
                }
                l[i * n + i] = d.sqrt();
            } else {
                l[i * n + j] = (matrix[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    let mut inv = vec![0.0f64; n * n];
    let mut y = vec![0.0f64; n];
    for col in 0..n {
        // L y = e_col
        for i in 0..n {
            let rhs = if i == col { 1.0 } else { 0.0 };
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (rhs - s) / l[i * n + i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * inv[k * n + col]).sum();
            inv[i * n + col] = (y[i] - s) / l[i * n + i];
        }
    }
    Ok(inv)
}

/// Full profile for `scorer` over the training set.
pub fn build_profile(
    net: &Network,
    train: &Dataset,
    registry: &ScorerRegistry,
    scorer: &str,
    temperature: f64,
) -> Result<Profile> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    train.check_labels(net.class_count())?;
    let traces = trace_dataset(net, train)?;
    let ranges = ranges_from_traces(&traces);
    let mahalanobis = if scorer == "maha" {
        let features: Vec<&[f32]> = traces.iter().map(|t| t.penultimate.as_slice()).collect();
        Some(fit_mahalanobis_features(&features, train.labels(), net.class_count())?)
    } else {
        None
    };
    let scorer_cfg = ScorerConfig {
        temperature: Some(temperature),
        mahalanobis: mahalanobis.clone(),
    };
    let scorer_impl = registry.create(scorer, &scorer_cfg)?;
    let scores = traces.iter().map(|t| scorer_impl.score(t)).collect::<Result<Vec<_>>>()?;
    let (ood_scores, ood_threshold) = threshold_from_scores(scores)?;
    let model_fingerprint = model_fingerprint(net);
    let dataset_fingerprint = train.fingerprint();
    let fingerprint = hex::encode(Sha256::digest(format!("{model_fingerprint}:{dataset_fingerprint}")));
    Ok(Profile {
        fingerprint,
        model_fingerprint,
        dataset_fingerprint,
        scorer: scorer_impl.name().to_string(),
        temperature,
        low: ranges.low,
        high: ranges.high,
        active: ranges.active,
        ood_scores,
        ood_threshold,
        mahalanobis,
    })
}
