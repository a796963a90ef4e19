//! Corpus directories and error export.
//!
//! Layout: `run.json` (config, fingerprints, run statistics),
//! `records.jsonl` (one record per line), `coverage.json`, `report.json`.
//! Pixels are never stored; every record is re-materialized by replaying its
//! mutation chain on the seed dataset.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageConfig, CoverageSnapshot, CoverageState};
use crate::error::{Error, Result};
use crate::fuzzer::{config_fingerprint, Corpus, CorpusRecord, FuzzConfig, OutcomeKind, RunStats};
use crate::model_io::{model_fingerprint, to_bytes, Dataset};
use crate::mutation::{MutationRegistry, OperatorInfo};
use crate::nn::Network;
use crate::profiler::Profile;
use crate::report::{report, ReportView};
use crate::tensor::Tensor;

pub const RUN_FILE: &str = "run.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub status: RunStatus,
    pub config: FuzzConfig,
    pub config_fingerprint: String,
    pub model_fingerprint: String,
    pub profile_fingerprint: String,
    pub seeds_fingerprint: String,
    /// Free-form provenance supplied by the caller (paths, invocation).
    pub inputs: serde_json::Value,
    /// Operator set and parameter ranges the run sampled from.
    pub operators: Vec<OperatorInfo>,
    pub stats: Option<RunStats>,
}

impl RunManifest {
    /// Manifest of a run that has not finished yet.
    pub fn start(cfg: &FuzzConfig, net: &Network, profile: &Profile, seeds: &Dataset, inputs: serde_json::Value) -> Self {
        RunManifest {
            status: RunStatus::Running,
            config: cfg.clone(),
            config_fingerprint: config_fingerprint(cfg, net, profile, seeds),
            model_fingerprint: model_fingerprint(net),
            profile_fingerprint: profile.fingerprint.clone(),
            seeds_fingerprint: seeds.fingerprint(),
            inputs,
            operators: MutationRegistry::builtin().describe(),
            stats: None,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialization is infallible");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(RUN_FILE), manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    read_json(&dir.join(RUN_FILE))
}

/// Writes records, coverage and report, then marks the manifest complete.
pub fn write_corpus(dir: &Path, manifest: &mut RunManifest, corpus: &Corpus, state: &CoverageState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for r in &corpus.records {
        serde_json::to_writer(&mut out, r).expect("record serialization is infallible");
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(COVERAGE_FILE), &state.snapshot(&corpus.config.coverage))?;
    write_json(&dir.join(REPORT_FILE), &report(corpus, ReportView::Both))?;
    manifest.status = RunStatus::Complete;
    manifest.stats = Some(corpus.stats.clone());
    write_json(&dir.join(RUN_FILE), manifest)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = read_manifest(dir)?;
    if manifest.status != RunStatus::Complete {
        return Err(Error::InvalidConfig(format!("corpus {} is incomplete", dir.display())));
    }
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e))?,
        );
    }
    Ok(Corpus {
        config: manifest.config,
        config_fingerprint: manifest.config_fingerprint,
        records,
        stats: manifest.stats.unwrap_or_default(),
    })
}

pub fn read_coverage(dir: &Path) -> Result<(CoverageConfig, CoverageState)> {
    let snap: CoverageSnapshot = read_json(&dir.join(COVERAGE_FILE))?;
    Ok((snap.config.clone(), snap.to_state()?))
}

/// Which errors to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSelection {
    Random,
    IdOnly,
    OodOnly,
}

impl ErrorSelection {
    pub fn name(self) -> &'static str {
        match self {
            ErrorSelection::Random => "random",
            ErrorSelection::IdOnly => "id_only",
            ErrorSelection::OodOnly => "ood_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ErrorSelection::Random),
            "id" | "id_only" => Ok(ErrorSelection::IdOnly),
            "ood" | "ood_only" => Ok(ErrorSelection::OodOnly),
            other => Err(Error::UnknownName {
                family: "error selection",
                name: other.to_string(),
                available: "random, id, ood".into(),
            }),
        }
    }

    pub fn accepts(self, record: &CorpusRecord) -> bool {
        record.outcome.kind == OutcomeKind::Error
            && match self {
                ErrorSelection::Random => true,
                ErrorSelection::IdOnly => !record.outcome.is_ood,
                ErrorSelection::OodOnly => record.outcome.is_ood,
            }
    }
}

/// Samples `count` matching error records, skipping any id in `exclude`.
pub fn export_errors<'a>(
    records: &'a [CorpusRecord],
    selection: ErrorSelection,
    count: usize,
    rng: &mut impl Rng,
    exclude: &HashSet<u64>,
) -> Result<Vec<&'a CorpusRecord>> {
    let mut pool: Vec<&CorpusRecord> = records
        .iter()
        .filter(|r| selection.accepts(r) && !exclude.contains(&r.id))
        .collect();
    if pool.len() < count {
        return Err(Error::InsufficientErrors {
            selection: selection.name().to_string(),
            requested: count,
            available: pool.len(),
        });
    }
    pool.shuffle(rng);
    pool.truncate(count);
    Ok(pool)
}

/// Re-creates the test input of one record from its seed.
pub fn replay(record: &CorpusRecord, seeds: &Dataset, registry: &MutationRegistry) -> Result<Tensor> {
    if record.dataset_index >= seeds.len() {
        return Err(Error::UnknownRecord(record.id));
    }
    record.chain.replay(registry, &seeds.image(record.dataset_index))
}

/// Materializes records into a labelled dataset (seed labels).
pub fn materialize(records: &[&CorpusRecord], seeds: &Dataset, name: &str) -> Result<Dataset> {
    let registry = MutationRegistry::builtin();
    let mut pixels = Vec::with_capacity(records.len() * seeds.image_len());
    for r in records {
        pixels.extend(to_bytes(&replay(r, seeds, &registry)?));
    }
    Dataset::new(name, seeds.dims(), pixels, records.iter().map(|r| r.label).collect())
}

pub fn find_record(corpus: &Corpus, id: u64) -> Result<&CorpusRecord> {
    corpus
        .records
        .get(id as usize)
        .filter(|r| r.id == id)
        .or_else(|| corpus.records.iter().find(|r| r.id == id))
        .ok_or(Error::UnknownRecord(id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuzzer::FuzzOutcome;
    use crate::mutation::MutationChain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(id: u64, kind: OutcomeKind, is_ood: bool) -> CorpusRecord {
        CorpusRecord {
            id,
            dataset_index: 0,
            parent: None,
            label: 0,
            chain: MutationChain::default(),
            outcome: FuzzOutcome {
                kind,
                is_ood,
                ood_score: 0.0,
                coverage_gain: true,
                predicted_class: 1,
            },
            scorer: "oe".into(),
            temperature: 1.0,
            iteration: 1,
            attempt: id,
            config_fingerprint: String::new(),
        }
    }

    fn records() -> Vec<CorpusRecord> {
        (0..30)
            .map(|i| match i % 3 {
                0 => record(i, OutcomeKind::Error, false),
                1 => record(i, OutcomeKind::Error, true),
                _ => record(i, OutcomeKind::BenignGain, false),
            })
            .collect()
    }

    #[test]
    fn id_only_filter() {
        let recs = records();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picked = export_errors(&recs, ErrorSelection::IdOnly, 10, &mut rng, &HashSet::new()).unwrap();
        assert_eq!(picked.len(), 10);
        assert!(picked.iter().all(|r| !r.outcome.is_ood && r.outcome.kind == OutcomeKind::Error));
    }

    #[test]
    fn random_selection_is_reproducible() {
        let recs = records();
        let a: Vec<u64> = export_errors(&recs, ErrorSelection::Random, 7, &mut ChaCha8Rng::seed_from_u64(5), &HashSet::new())
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect();
        let b: Vec<u64> = export_errors(&recs, ErrorSelection::Random, 7, &mut ChaCha8Rng::seed_from_u64(5), &HashSet::new())
            .unwrap()
            .iter()
            .map(|r| r.id)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shortfall_is_an_error() {
        let recs = records();
        let exclude: HashSet<u64> = [0, 3].into_iter().collect();
        let err = export_errors(&recs, ErrorSelection::OodOnly, 11, &mut ChaCha8Rng::seed_from_u64(0), &exclude).unwrap_err();
        assert!(matches!(err, Error::InsufficientErrors { requested: 11, available: 10, .. }));
        let err = export_errors(&recs, ErrorSelection::IdOnly, 10, &mut ChaCha8Rng::seed_from_u64(0), &exclude).unwrap_err();
        assert!(matches!(err, Error::InsufficientErrors { available: 8, .. }));
    }
}
