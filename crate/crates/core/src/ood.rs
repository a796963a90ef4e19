//! Out-of-distribution scorers and the threshold rule.
//!
//! Every scorer is oriented so that a larger score means "more OOD"; a case is
//! OOD iff its score is strictly above the profile threshold.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_f64, ActivationTrace};
use crate::profiler::Profile;

pub trait OodScorer: Send + Sync {
    /// Registry name, recorded in profiles and corpus records.
    fn name(&self) -> &'static str;

    fn score(&self, trace: &ActivationTrace) -> Result<f64>;
}

/// `1 - max softmax(logits / T)`.
pub fn msp_score(trace: &ActivationTrace, temperature: f64) -> f64 {
    let logits: Vec<f64> = trace.logits.iter().map(|&v| f64::from(v)).collect();
    let probs = softmax_f64(&logits, temperature);
    1.0 - probs.into_iter().fold(0.0, f64::max)
}

/// Outlier Exposure keeps the MSP score at test time; only the training of the
/// network differs.
pub fn oe_score(trace: &ActivationTrace, temperature: f64) -> f64 {
    msp_score(trace, temperature)
}

pub fn mahalanobis_score(trace: &ActivationTrace, params: &MahalanobisParams) -> Result<f64> {
    params.distance(&trace.penultimate)
}

/// Class-conditional Gaussian with a shared covariance over penultimate
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisParams {
    pub dim: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Inverse of the regularized shared covariance, row-major `dim x dim`.
    pub precision: Vec<f64>,
}

impl MahalanobisParams {
    pub fn new(means: Vec<Vec<f64>>, precision: Vec<f64>) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidConfig("class means differ in dimension".into()));
        }
        if precision.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: precision.len(),
            });
        }
        Ok(MahalanobisParams { dim, means, precision })
    }

    /// Minimum squared Mahalanobis distance to any class mean.
    pub fn distance(&self, features: &[f32]) -> Result<f64> {
        if features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: features.len(),
            });
        }
        let mut best = f64::INFINITY;
        let mut diff = vec![0.0; self.dim];
        for mean in &self.means {
            for ((d, &f), &m) in diff.iter_mut().zip(features).zip(mean) {
                *d = f64::from(f) - m;
            }
            let mut q = 0.0;
            for (i, &di) in diff.iter().enumerate() {
                let row = &self.precision[i * self.dim..(i + 1) * self.dim];
                q += di * row.iter().zip(&diff).map(|(p, dj)| p * dj).sum::<f64>();
            }
            best = best.min(q);
        }
        // Rounding can leave a tiny negative residue at a class mean.
        Ok(best.max(0.0))
    }
}

pub struct Msp {
    temperature: f64,
}

pub struct OutlierExposure {
    temperature: f64,
}

pub struct Mahalanobis {
    params: MahalanobisParams,
}

impl OodScorer for Msp {
    fn name(&self) -> &'static str {
        "msp"
    }

    fn score(&self, trace: &ActivationTrace) -> Result<f64> {
        Ok(msp_score(trace, self.temperature))
    }
}

impl OodScorer for OutlierExposure {
    fn name(&self) -> &'static str {
        "oe"
    }

    fn score(&self, trace: &ActivationTrace) -> Result<f64> {
        Ok(oe_score(trace, self.temperature))
    }
}

impl OodScorer for Mahalanobis {
    fn name(&self) -> &'static str {
        "maha"
    }

    fn score(&self, trace: &ActivationTrace) -> Result<f64> {
        mahalanobis_score(trace, &self.params)
    }
}

/// Inputs a scorer factory may draw on.
#[derive(Debug, Clone, Default)]
pub struct ScorerConfig {
    pub temperature: Option<f64>,
    pub mahalanobis: Option<MahalanobisParams>,
}

impl ScorerConfig {
    fn temperature(&self) -> Result<f64> {
        let t = self.temperature.unwrap_or(1.0);
        if t > 0.0 && t.is_finite() {
            Ok(t)
        } else {
            Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")))
        }
    }
}

pub type ScorerFactory = fn(&ScorerConfig) -> Result<Box<dyn OodScorer>>;

/// Name-keyed table of scorer constructors.
pub struct ScorerRegistry {
    entries: Vec<(&'static str, ScorerFactory)>,
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        ScorerRegistry { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("msp", |cfg| Ok(Box::new(Msp { temperature: cfg.temperature()? })));
        r.register("oe", |cfg| {
            Ok(Box::new(OutlierExposure {
                temperature: cfg.temperature()?,
            }))
        });
        r.register("maha", |cfg| {
            let params = cfg
                .mahalanobis
                .clone()
                .ok_or_else(|| Error::InvalidConfig("the maha scorer needs fitted Mahalanobis parameters".into()))?;
            Ok(Box::new(Mahalanobis { params }))
        });
        r
    }

    /// Registers (or replaces) a scorer under `name`.
    pub fn register(&mut self, name: &'static str, factory: ScorerFactory) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name, factory)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str, cfg: &ScorerConfig) -> Result<Box<dyn OodScorer>> {
        let (_, factory) = self.entries.iter().find(|(n, _)| *n == name).ok_or_else(|| Error::UnknownName {
            family: "scorer",
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        factory(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OodVerdict {
    pub score: f64,
    pub is_ood: bool,
    pub threshold_used: f64,
}

impl fmt::Display for OodVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.is_ood { "OOD" } else { "ID" };
        write!(f, "{tag} (score {:.6} vs threshold {:.6})", self.score, self.threshold_used)
    }
}

/// Applies the profile threshold; a score equal to the threshold is ID.
pub fn is_ood(scorer: &str, score: f64, profile: &Profile) -> Result<OodVerdict> {
    if profile.scorer != scorer {
        return Err(Error::ScorerMismatch {
            profile: profile.scorer.clone(),
            requested: scorer.to_string(),
        });
    }
    Ok(verdict(score, profile.ood_threshold))
}

pub fn verdict(score: f64, threshold: f64) -> OodVerdict {
    OodVerdict {
        score,
        is_ood: score > threshold,
        threshold_used: threshold,
    }
}
