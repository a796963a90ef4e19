//! The OOD-guided fuzzing loop.
//!
//! Seeds are taken round-robin from a FIFO queue. Each selection produces
//! `energy` mutants; every mutant is traced, checked for coverage gain, scored
//! for OOD-ness and classified. Correct, coverage-increasing, in-distribution
//! mutants are requeued as new seeds. Coverage-gaining benign cases and all
//! errors are kept in the corpus.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coverage::{CoverageConfig, CoverageCriterion, CoverageState, CriterionRegistry};
use crate::error::{Error, Result};
use crate::model_io::{model_fingerprint, Dataset};
use crate::mutation::{check_validity, MutationChain, MutationRegistry};
use crate::nn::{ActivationTrace, Network};
use crate::ood::{verdict, OodScorer, OodVerdict, ScorerRegistry};
use crate::profiler::Profile;

pub const DEFAULT_ENERGY: usize = 20;
pub const DEFAULT_BUDGET: usize = 50_000;
const CURVE_INTERVAL: usize = 1_000;
/// ChaCha stream reserved for the initial queue order.
const QUEUE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub coverage: CoverageConfig,
    pub scorer: String,
    /// Total mutants to generate, valid or not.
    pub budget: usize,
    /// Mutants per seed selection.
    pub energy: usize,
    pub run_seed: u64,
    pub workers: usize,
    /// Exclude OOD cases from requeueing. Off reproduces a traditional,
    /// distribution-unaware fuzzer.
    pub ood_guided: bool,
    /// Commit coverage for OOD benign cases too.
    pub commit_ood_coverage: bool,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig {
            coverage: CoverageConfig::default(),
            scorer: "oe".into(),
            budget: DEFAULT_BUDGET,
            energy: DEFAULT_ENERGY,
            run_seed: 0,
            workers: 1,
            ood_guided: true,
            commit_ood_coverage: false,
        }
    }
}

impl FuzzConfig {
    pub fn validate(&self) -> Result<()> {
        self.coverage.validate()?;
        if self.energy == 0 {
            return Err(Error::InvalidConfig("energy must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedOrigin {
    Initial,
    Requeued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub dataset_index: usize,
    /// Corpus record this seed was requeued from.
    pub parent: Option<u64>,
    pub label: usize,
    pub chain: MutationChain,
    pub times_selected: u64,
    pub origin: SeedOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    BenignGain,
    BenignNoGain,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub kind: OutcomeKind,
    pub is_ood: bool,
    pub ood_score: f64,
    pub coverage_gain: bool,
    pub predicted_class: usize,
}

/// The test oracle plus the requeue rule: requeue iff predicted correctly,
/// coverage increases, and the case is in-distribution.
pub fn classify(trace: &ActivationTrace, seed_label: usize, coverage_gain: bool, verdict: &OodVerdict) -> (FuzzOutcome, bool) {
    classify_with(trace, seed_label, coverage_gain, verdict, true)
}

/// [`classify`] with the OOD condition of the requeue rule switchable.
pub fn classify_with(
    trace: &ActivationTrace,
    seed_label: usize,
    coverage_gain: bool,
    verdict: &OodVerdict,
    ood_guided: bool,
) -> (FuzzOutcome, bool) {
    let correct = trace.predicted_class == seed_label;
    let kind = match (correct, coverage_gain) {
        (false, _) => OutcomeKind::Error,
        (true, true) => OutcomeKind::BenignGain,
        (true, false) => OutcomeKind::BenignNoGain,
    };
    let requeue = kind == OutcomeKind::BenignGain && !(ood_guided && verdict.is_ood);
    let outcome = FuzzOutcome {
        kind,
        is_ood: verdict.is_ood,
        ood_score: verdict.score,
        coverage_gain,
        predicted_class: trace.predicted_class,
    };
    (outcome, requeue)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    pub dataset_index: usize,
    pub parent: Option<u64>,
    /// Seed label, inherited by the mutant.
    pub label: usize,
    pub chain: MutationChain,
    pub outcome: FuzzOutcome,
    pub scorer: String,
    pub temperature: f64,
    /// Logical timestamps: seed selection number and mutant attempt number.
    pub iteration: u64,
    pub attempt: u64,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub attempts: usize,
    pub coverage_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Valid mutants; equals benign_gain + benign_no_gain + errors.
    pub generated: usize,
    /// Pixel-value mutants rejected by the validity check.
    pub discarded: usize,
    pub benign_gain: usize,
    pub benign_no_gain: usize,
    pub errors: usize,
    pub requeued: usize,
    pub iterations: u64,
    pub coverage_ratio: f64,
    pub saturation: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: FuzzConfig,
    pub config_fingerprint: String,
    pub records: Vec<CorpusRecord>,
    pub stats: RunStats,
}

/// Fingerprint of a run: its configuration and every input it depends on.
/// The worker count does not affect results and is left out.
pub fn config_fingerprint(cfg: &FuzzConfig, net: &Network, profile: &Profile, seeds: &Dataset) -> String {
    let normalized = FuzzConfig { workers: 1, ..cfg.clone() };
    let cfg_json = serde_json::to_string(&normalized).expect("config serialization is infallible");
    let mut h = Sha256::new();
    h.update(cfg_json.as_bytes());
    h.update(model_fingerprint(net).as_bytes());
    h.update(profile.fingerprint.as_bytes());
    h.update(seeds.fingerprint().as_bytes());
    hex::encode(h.finalize())
}

struct Candidate {
    chain: MutationChain,
    valid: bool,
    trace: Option<ActivationTrace>,
    cells: Vec<usize>,
    score: f64,
}

struct Engine<'a> {
    net: &'a Network,
    seeds: &'a Dataset,
    mutations: MutationRegistry,
    criterion: Box<dyn CoverageCriterion>,
    scorer: Box<dyn OodScorer>,
    run_seed: u64,
}

impl Engine<'_> {
    fn candidate(&self, seed: &SeedEntry, image: &crate::Tensor, attempt: u64) -> Result<Candidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run_seed);
        rng.set_stream(attempt);
        let allow_affine = !seed.chain.has_affine(&self.mutations);
        let spec = self.mutations.sample_spec(&mut rng, allow_affine);
        let mutated = self.mutations.mutate(image, &spec)?;
        let affine = self.mutations.is_affine(&spec.operator);
        let chain = seed.chain.with(spec);
        let valid = affine || {
            let reference = chain.reference(&self.mutations, &self.seeds.image(seed.dataset_index))?;
            check_validity(&reference, &mutated)
        };
        if !valid {
            return Ok(Candidate {
                chain,
                valid,
                trace: None,
                cells: Vec::new(),
                score: 0.0,
            });
        }
        let trace = self.net.forward_trace(&mutated)?;
        let mut cells = Vec::new();
        self.criterion.cells(&trace, &mut cells);
        let score = self.scorer.score(&trace)?;
        Ok(Candidate {
            chain,
            valid,
            trace: Some(trace),
            cells,
            score,
        })
    }
}

/// Runs the fuzzing loop to completion and returns the final coverage and
/// the corpus.
pub fn run_fuzz(net: &Network, profile: &Profile, seeds: &Dataset, cfg: &FuzzConfig) -> Result<(CoverageState, Corpus)> {
    run_fuzz_with(
        net,
        profile,
        seeds,
        cfg,
        &CriterionRegistry::builtin(),
        &ScorerRegistry::builtin(),
    )
}

pub fn run_fuzz_with(
    net: &Network,
    profile: &Profile,
    seeds: &Dataset,
    cfg: &FuzzConfig,
    criteria: &CriterionRegistry,
    scorers: &ScorerRegistry,
) -> Result<(CoverageState, Corpus)> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    profile.check_model(net)?;
    if cfg.scorer != profile.scorer {
        return Err(Error::ScorerMismatch {
            profile: profile.scorer.clone(),
            requested: cfg.scorer.clone(),
        });
    }
    if seeds.dims().as_slice() != net.input_shape() {
        return Err(Error::RejectedInput {
            expected: net.input_shape().to_vec(),
            got: seeds.dims().to_vec(),
        });
    }
    seeds.check_labels(net.class_count())?;

    let engine = Engine {
        net,
        seeds,
        mutations: MutationRegistry::builtin(),
        criterion: criteria.create(&cfg.coverage, net, profile)?,
        scorer: scorers.create(&cfg.scorer, &profile.scorer_config())?,
        run_seed: cfg.run_seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let fingerprint = config_fingerprint(cfg, net, profile, seeds);
    let mut state = CoverageState::for_criterion(engine.criterion.as_ref());
    let mut stats = RunStats::default();
    let mut records = Vec::new();

    let mut order: Vec<usize> = (0..seeds.len()).collect();
    let mut queue_rng = ChaCha8Rng::seed_from_u64(cfg.run_seed);
    queue_rng.set_stream(QUEUE_STREAM);
    order.shuffle(&mut queue_rng);
    let mut queue: VecDeque<SeedEntry> = order
        .into_iter()
        .map(|i| SeedEntry {
            dataset_index: i,
            parent: None,
            label: seeds.label(i),
            chain: MutationChain::default(),
            times_selected: 0,
            origin: SeedOrigin::Initial,
        })
        .collect();

    let mut attempts = 0usize;
    let mut next_curve = CURVE_INTERVAL;
    while attempts < cfg.budget {
        let mut seed = queue.pop_front().expect("round-robin queue never drains");
        stats.iterations += 1;
        seed.times_selected += 1;
        let image = seed.chain.replay(&engine.mutations, &seeds.image(seed.dataset_index))?;
        let n = cfg.energy.min(cfg.budget - attempts);
        let first = attempts as u64;
        let candidates: Vec<Candidate> = if cfg.workers == 1 {
            (0..n)
                .map(|j| engine.candidate(&seed, &image, first + j as u64))
                .collect::<Result<_>>()?
        } else {
            pool.install(|| {
                (0..n)
                    .into_par_iter()
                    .map(|j| engine.candidate(&seed, &image, first + j as u64))
                    .collect::<Result<_>>()
            })?
        };

        for (j, cand) in candidates.into_iter().enumerate() {
            let attempt = first + j as u64;
            let Some(trace) = cand.trace.filter(|_| cand.valid) else {
                stats.discarded += 1;
                continue;
            };
            stats.generated += 1;
            let gain = state.would_gain_cells(&cand.cells);
            let v = verdict(cand.score, profile.ood_threshold);
            let (outcome, requeue) = classify_with(&trace, seed.label, gain, &v, cfg.ood_guided);
            match outcome.kind {
                OutcomeKind::BenignGain => {
                    stats.benign_gain += 1;
                    if !outcome.is_ood || cfg.commit_ood_coverage || !cfg.ood_guided {
                        state.commit_cells(&cand.cells);
                    }
                }
                OutcomeKind::BenignNoGain => stats.benign_no_gain += 1,
                OutcomeKind::Error => stats.errors += 1,
            }
            if outcome.kind == OutcomeKind::BenignNoGain {
                continue;
            }
            let id = records.len() as u64;
            if requeue {
                stats.requeued += 1;
                queue.push_back(SeedEntry {
                    dataset_index: seed.dataset_index,
                    parent: Some(id),
                    label: seed.label,
                    chain: cand.chain.clone(),
                    times_selected: 0,
                    origin: SeedOrigin::Requeued,
                });
            }
            records.push(CorpusRecord {
                id,
                dataset_index: seed.dataset_index,
                parent: seed.parent,
                label: seed.label,
                chain: cand.chain,
                outcome,
                scorer: cfg.scorer.clone(),
                temperature: profile.temperature,
                iteration: stats.iterations,
                attempt,
                config_fingerprint: fingerprint.clone(),
            });
        }
        attempts += n;
        while attempts >= next_curve {
            stats.saturation.push(CurvePoint {
                attempts: next_curve,
                coverage_ratio: state.ratio(),
            });
            next_curve += CURVE_INTERVAL;
        }
        queue.push_back(seed);
    }
    if stats.saturation.last().is_none_or(|p| p.attempts != attempts) {
        stats.saturation.push(CurvePoint {
            attempts,
            coverage_ratio: state.ratio(),
        });
    }
    stats.coverage_ratio = state.ratio();
    Ok((
        state,
        Corpus {
            config: cfg.clone(),
            config_fingerprint: fingerprint,
            records,
            stats,
        },
    ))
}
