//! Neuron coverage (NC) and k-multisection neuron coverage (KMNC).
//!
//! A criterion maps a trace to the set of coverage cells it hits; the
//! criterion-agnostic [`CoverageState`] is a monotone bitset over those cells.

use std::ops::Range;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ActivationTrace, Network};
use crate::profiler::Profile;

pub const DEFAULT_NC_THRESHOLD: f32 = 0.75;
pub const DEFAULT_KMNC_SECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub criterion: String,
    pub nc_threshold: f32,
    pub kmnc_sections: usize,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            criterion: "kmnc".into(),
            nc_threshold: DEFAULT_NC_THRESHOLD,
            kmnc_sections: DEFAULT_KMNC_SECTIONS,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nc_threshold > 0.0 && self.nc_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "NC threshold must lie in (0, 1), got {}",
                self.nc_threshold
            )));
        }
        if self.kmnc_sections == 0 {
            return Err(Error::InvalidConfig("KMNC needs at least one section".into()));
        }
        Ok(())
    }
}

pub trait CoverageCriterion: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of coverage cells.
    fn capacity(&self) -> usize;

    /// Appends the indices of every cell `trace` hits.
    fn cells(&self, trace: &ActivationTrace, out: &mut Vec<usize>);
}

/// Per-trace, per-layer min-max scaled activation above a threshold.
pub struct NeuronCoverage {
    groups: Vec<Range<usize>>,
    threshold: f32,
}

impl NeuronCoverage {
    pub fn new(net: &Network, threshold: f32) -> Self {
        NeuronCoverage {
            groups: net.neuron_groups().to_vec(),
            threshold,
        }
    }

    /// Min-max scaled values of one layer; constant layers scale to 0.
    pub fn scale_layer(values: &[f32]) -> Vec<f64> {
        let min = values.iter().copied().fold(f32::INFINITY, f32::min);
        let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max <= min {
            return vec![0.0; values.len()];
        }
        let span = f64::from(max) - f64::from(min);
        values.iter().map(|&v| (f64::from(v) - f64::from(min)) / span).collect()
    }
}

impl CoverageCriterion for NeuronCoverage {
    fn name(&self) -> &'static str {
        "nc"
    }

    fn capacity(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    fn cells(&self, trace: &ActivationTrace, out: &mut Vec<usize>) {
        let t = f64::from(self.threshold);
        for g in &self.groups {
            let values = &trace.neuron_values[g.clone()];
            let min = values.iter().copied().fold(f32::INFINITY, f32::min);
            let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if max <= min {
                continue;
            }
            // (v - min) / span > t, compared without rounding the quotient
            let span = f64::from(max) - f64::from(min);
            out.extend(
                values
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| f64::from(v) - f64::from(min) > t * span)
                    .map(|(i, _)| g.start + i),
            );
        }
    }
}

/// Training-range sections per neuron; cell index is `neuron * k + section`.
pub struct KMultisection {
    low: Vec<f32>,
    high: Vec<f32>,
    sections: usize,
}

impl KMultisection {
    pub fn new(low: Vec<f32>, high: Vec<f32>, sections: usize) -> Self {
        KMultisection { low, high, sections }
    }

    pub fn from_profile(profile: &Profile, sections: usize) -> Self {
        Self::new(profile.low.clone(), profile.high.clone(), sections)
    }

    /// Section of `value` within `[low, high]`, or `None` when outside.
    pub fn section(low: f32, high: f32, value: f32, k: usize) -> Option<usize> {
        if !(low <= value && value <= high) {
            return None;
        }
        if high == low {
            return Some(0);
        }
        let scaled = (f64::from(value) - f64::from(low)) * k as f64 / (f64::from(high) - f64::from(low));
        Some((scaled.floor() as usize).min(k - 1))
    }
}

impl CoverageCriterion for KMultisection {
    fn name(&self) -> &'static str {
        "kmnc"
    }

    fn capacity(&self) -> usize {
        self.low.len() * self.sections
    }

    fn cells(&self, trace: &ActivationTrace, out: &mut Vec<usize>) {
        for (i, &v) in trace.neuron_values.iter().enumerate().take(self.low.len()) {
            if let Some(s) = Self::section(self.low[i], self.high[i], v, self.sections) {
                out.push(i * self.sections + s);
            }
        }
    }
}

pub type CriterionFactory = fn(&CoverageConfig, &Network, &Profile) -> Result<Box<dyn CoverageCriterion>>;

/// Name-keyed table of coverage criteria.
pub struct CriterionRegistry {
    entries: Vec<(&'static str, CriterionFactory)>,
}

impl CriterionRegistry {
    pub fn empty() -> Self {
        CriterionRegistry { entries: Vec::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("nc", |cfg, net, _| Ok(Box::new(NeuronCoverage::new(net, cfg.nc_threshold))));
        r.register("kmnc", |cfg, net, profile| {
            if profile.low.len() != net.neuron_count() {
                return Err(Error::DimensionMismatch {
                    expected: net.neuron_count(),
                    got: profile.low.len(),
                });
            }
            Ok(Box::new(KMultisection::from_profile(profile, cfg.kmnc_sections)))
        });
        r
    }

    pub fn register(&mut self, name: &'static str, factory: CriterionFactory) {
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = factory,
            None => self.entries.push((name, factory)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, cfg: &CoverageConfig, net: &Network, profile: &Profile) -> Result<Box<dyn CoverageCriterion>> {
        cfg.validate()?;
        let (_, factory) = self
            .entries
            .iter()
            .find(|(n, _)| *n == cfg.criterion)
            .ok_or_else(|| Error::UnknownName {
                family: "coverage criterion",
                name: cfg.criterion.clone(),
                available: self.names().join(", "),
            })?;
        factory(cfg, net, profile)
    }
}

/// Monotone bitset of covered cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageState {
    criterion: String,
    capacity: usize,
    bits: Vec<u64>,
    covered: usize,
}

impl CoverageState {
    pub fn new(criterion: impl Into<String>, capacity: usize) -> Self {
        CoverageState {
            criterion: criterion.into(),
            capacity,
            bits: vec![0; capacity.div_ceil(64)],
            covered: 0,
        }
    }

    pub fn for_criterion(criterion: &dyn CoverageCriterion) -> Self {
        Self::new(criterion.name(), criterion.capacity())
    }

    pub fn criterion(&self) -> &str {
        &self.criterion
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn covered(&self) -> usize {
        self.covered
    }

    pub fn ratio(&self) -> f64 {
        if self.capacity == 0 {
            0.0
        } else {
            self.covered as f64 / self.capacity as f64
        }
    }

    pub fn is_set(&self, cell: usize) -> bool {
        self.bits[cell / 64] >> (cell % 64) & 1 == 1
    }

    /// Sets the given cells; returns how many were newly covered.
    pub fn commit_cells(&mut self, cells: &[usize]) -> usize {
        let before = self.covered;
        for &c in cells {
            let (word, bit) = (c / 64, 1u64 << (c % 64));
            if self.bits[word] & bit == 0 {
                self.bits[word] |= bit;
                self.covered += 1;
            }
        }
        self.covered - before
    }

    pub fn would_gain_cells(&self, cells: &[usize]) -> bool {
        cells.iter().any(|&c| !self.is_set(c))
    }

    pub fn update(&mut self, criterion: &dyn CoverageCriterion, trace: &ActivationTrace) -> usize {
        let mut cells = Vec::new();
        criterion.cells(trace, &mut cells);
        self.commit_cells(&cells)
    }

    /// Pure query: would committing `trace` set at least one new cell?
    pub fn gain(&self, criterion: &dyn CoverageCriterion, trace: &ActivationTrace) -> bool {
        let mut cells = Vec::new();
        criterion.cells(trace, &mut cells);
        self.would_gain_cells(&cells)
    }

    pub fn snapshot(&self, config: &CoverageConfig) -> CoverageSnapshot {
        let bytes: Vec<u8> = self.bits.iter().flat_map(|w| w.to_le_bytes()).collect();
        CoverageSnapshot {
            criterion: self.criterion.clone(),
            config: config.clone(),
            capacity: self.capacity,
            covered: self.covered,
            covered_bits: BASE64.encode(&bytes[..self.capacity.div_ceil(8)]),
            ratio: self.ratio(),
        }
    }
}

/// Bitwise union of two states over the same cells.
pub fn merge(a: &CoverageState, b: &CoverageState) -> Result<CoverageState> {
    if a.capacity != b.capacity || a.criterion != b.criterion {
        return Err(Error::CapacityMismatch {
            left: a.capacity,
            right: b.capacity,
        });
    }
    let bits: Vec<u64> = a.bits.iter().zip(&b.bits).map(|(x, y)| x | y).collect();
    let covered = bits.iter().map(|w| w.count_ones() as usize).sum();
    Ok(CoverageState {
        criterion: a.criterion.clone(),
        capacity: a.capacity,
        bits,
        covered,
    })
}

pub fn nc_update(state: &mut CoverageState, trace: &ActivationTrace, net: &Network, cfg: &CoverageConfig) -> usize {
    state.update(&NeuronCoverage::new(net, cfg.nc_threshold), trace)
}

pub fn kmnc_update(state: &mut CoverageState, trace: &ActivationTrace, profile: &Profile, cfg: &CoverageConfig) -> Result<usize> {
    if trace.neuron_values.len() != profile.low.len() {
        return Err(Error::DimensionMismatch {
            expected: profile.low.len(),
            got: trace.neuron_values.len(),
        });
    }
    Ok(state.update(&KMultisection::from_profile(profile, cfg.kmnc_sections), trace))
}

pub fn coverage_gain(state: &CoverageState, criterion: &dyn CoverageCriterion, trace: &ActivationTrace) -> bool {
    state.gain(criterion, trace)
}

/// On-disk form, stored as `coverage.json` in a corpus directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSnapshot {
    pub criterion: String,
    pub config: CoverageConfig,
    pub capacity: usize,
    pub covered: usize,
    /// Little-endian bit order, base64.
    pub covered_bits: String,
    pub ratio: f64,
}

impl CoverageSnapshot {
    pub fn to_state(&self) -> Result<CoverageState> {
        let bytes = BASE64
            .decode(&self.covered_bits)
            .map_err(|e| Error::parse("coverage snapshot", e))?;
        if bytes.len() != self.capacity.div_ceil(8) {
            return Err(Error::parse("coverage snapshot", "bitset length does not match capacity"));
        }
        let mut state = CoverageState::new(self.criterion.clone(), self.capacity);
        for (i, &b) in bytes.iter().enumerate() {
            state.bits[i / 8] |= u64::from(b) << (8 * (i % 8));
        }
        state.covered = state.bits.iter().map(|w| w.count_ones() as usize).sum();
        Ok(state)
    }
}
