mod common;

use std::collections::HashSet;

use oodfuzz_core::corpus::{self, ErrorSelection, RunManifest, RunStatus};
use oodfuzz_core::coverage::CoverageConfig;
use oodfuzz_core::fuzzer::{run_fuzz, Corpus, FuzzConfig, OutcomeKind};
use oodfuzz_core::mutation::MutationRegistry;
use oodfuzz_core::nn::{softmax, Network};
use oodfuzz_core::ood::ScorerRegistry;
use oodfuzz_core::profiler::{build_profile, Profile};
use oodfuzz_core::trainer::{self, ExperimentSpec, Holdout, TrainConfig};
use oodfuzz_core::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    net: Network,
    train: Dataset,
    profile: Profile,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = common::blob_dataset(&mut rng, 400, 12, 4);
    let outliers = trainer::synthetic_outliers(200, [12, 12, 1], 2).unwrap();
    let base = Network::mlp(vec![12, 12, 1], &[24, 12, 4], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        learning_rate: 0.02,
        seed: 4,
        ..TrainConfig::default()
    };
    let (net, _) = trainer::oe_train(&base, &train, &outliers, &cfg).unwrap();
    let profile = build_profile(&net, &train, &ScorerRegistry::builtin(), "oe", 1.0).unwrap();
    Fixture { net, train, profile }
}

fn fuzz_cfg(criterion: &str, budget: usize) -> FuzzConfig {
    FuzzConfig {
        coverage: CoverageConfig {
            criterion: criterion.into(),
            kmnc_sections: 10,
            ..CoverageConfig::default()
        },
        budget,
        energy: 5,
        run_seed: 7,
        ..FuzzConfig::default()
    }
}

fn manifest(cfg: &FuzzConfig) -> RunManifest {
    RunManifest {
        status: RunStatus::Running,
        config: cfg.clone(),
        config_fingerprint: String::new(),
        model_fingerprint: String::new(),
        profile_fingerprint: String::new(),
        seeds_fingerprint: String::new(),
        inputs: serde_json::Value::Null,
        operators: MutationRegistry::builtin().describe(),
        stats: None,
    }
}

fn corpus_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn oe_training_separates_outliers() {
    let f = fixture();
    let outliers = trainer::synthetic_outliers(100, [12, 12, 1], 77).unwrap();
    let mean_score = |d: &Dataset| {
        (0..d.len())
            .map(|i| {
                let t = f.net.forward_trace(&d.image(i)).unwrap();
                1.0 - f64::from(softmax(&t.logits, 1.0).into_iter().fold(0.0, f32::max))
            })
            .sum::<f64>()
            / d.len() as f64
    };
    assert!(mean_score(&outliers) > mean_score(&f.train));
    assert!(trainer::accuracy(&f.net, &f.train).unwrap() > 0.9);
}

#[test]
fn fuzzing_is_reproducible_on_disk() {
    let f = fixture();
    let cfg = fuzz_cfg("kmnc", 400);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let (state, corpus) = run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap();
        corpus::write_corpus(d.path(), &mut manifest(&cfg), &corpus, &state).unwrap();
    }
    assert_eq!(corpus_files(dirs[0].path()), corpus_files(dirs[1].path()));
    let back = corpus::read_corpus(dirs[0].path()).unwrap();
    let (_, fresh) = run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap();
    assert_eq!(back.records, fresh.records);
    let (_, state) = corpus::read_coverage(dirs[0].path()).unwrap();
    assert_eq!(state.covered(), run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap().0.covered());
}

#[test]
fn worker_count_does_not_change_results() {
    let f = fixture();
    let one = run_fuzz(&f.net, &f.profile, &f.train, &fuzz_cfg("nc", 300)).unwrap();
    let three = run_fuzz(&f.net, &f.profile, &f.train, &FuzzConfig { workers: 3, ..fuzz_cfg("nc", 300) }).unwrap();
    assert_eq!(one.0, three.0);
    assert_eq!(one.1.records, three.1.records);
}

fn check_bookkeeping(corpus: &Corpus, guided: bool) {
    let s = &corpus.stats;
    assert_eq!(s.generated, s.benign_gain + s.benign_no_gain + s.errors);
    assert_eq!(s.generated + s.discarded, corpus.config.budget);
    assert_eq!(corpus.records.len(), s.benign_gain + s.errors);
    let requeued: HashSet<u64> = corpus.records.iter().filter_map(|r| r.parent).collect();
    for r in &corpus.records {
        if r.outcome.kind == OutcomeKind::Error {
            assert_ne!(r.outcome.predicted_class, r.label);
        } else {
            assert_eq!(r.outcome.predicted_class, r.label);
            assert!(r.outcome.coverage_gain);
        }
        if requeued.contains(&r.id) {
            assert_eq!(r.outcome.kind, OutcomeKind::BenignGain);
            if guided {
                assert!(!r.outcome.is_ood);
            }
        }
    }
}

#[test]
fn records_replay_to_their_outcomes() {
    let f = fixture();
    let registry = MutationRegistry::builtin();
    for criterion in ["nc", "kmnc"] {
        let cfg = FuzzConfig {
            budget: 3000,
            ..fuzz_cfg(criterion, 0)
        };
        let (_, corpus) = run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap();
        check_bookkeeping(&corpus, true);
        assert!(!corpus.records.is_empty());
        for r in &corpus.records {
            let image = corpus::replay(r, &f.train, &registry).unwrap();
            let trace = f.net.forward_trace(&image).unwrap();
            assert_eq!(trace.predicted_class, r.outcome.predicted_class);
            assert!(r.chain.len() <= 1 || r.parent.is_some());
            assert!(r.chain.0.iter().filter(|s| registry.is_affine(&s.operator)).count() <= 1);
        }
    }
}

#[test]
fn unguided_runs_requeue_ood_mutants() {
    let f = fixture();
    let cfg = FuzzConfig {
        ood_guided: false,
        budget: 3000,
        ..fuzz_cfg("kmnc", 0)
    };
    let (_, corpus) = run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap();
    check_bookkeeping(&corpus, false);
    let ood_benign = corpus
        .records
        .iter()
        .filter(|r| r.outcome.kind == OutcomeKind::BenignGain && r.outcome.is_ood)
        .count();
    assert_eq!(corpus.stats.requeued, corpus.stats.benign_gain);
    assert!(ood_benign <= corpus.stats.requeued);
}

#[test]
fn mismatched_profile_is_rejected() {
    let f = fixture();
    let other = Network::mlp(vec![12, 12, 1], &[24, 12, 4], 99).unwrap();
    assert!(run_fuzz(&other, &f.profile, &f.train, &fuzz_cfg("kmnc", 10)).is_err());
    let bad = FuzzConfig {
        scorer: "msp".into(),
        ..fuzz_cfg("kmnc", 10)
    };
    assert!(run_fuzz(&f.net, &f.profile, &f.train, &bad).is_err());
}

#[test]
fn retrain_experiment_keeps_holdout_disjoint() {
    let f = fixture();
    let cfg = FuzzConfig {
        budget: 4000,
        ..fuzz_cfg("kmnc", 0)
    };
    let (_, corpus) = run_fuzz(&f.net, &f.profile, &f.train, &cfg).unwrap();
    let errors = corpus.records.iter().filter(|r| r.outcome.kind == OutcomeKind::Error).count();
    assert!(errors >= 30, "only {errors} errors");
    let spec = ExperimentSpec {
        arms: vec![ErrorSelection::Random, ErrorSelection::Random],
        retrain_error_count: 10,
        holdout_error_count: 10,
        train: TrainConfig {
            epochs: 1,
            learning_rate: 0.01,
            seed: 5,
            ..TrainConfig::default()
        },
    };
    let result = trainer::retrain_experiment(&f.net, &f.train, &corpus.records, &f.train, Holdout::Sample, None, &spec).unwrap();
    assert_eq!(result.holdout_size, 10);
    assert_eq!(result.arms.len(), 2);
    assert_eq!(result.holdout_source, "random_sample");

    let same_arm = ExperimentSpec {
        arms: vec![ErrorSelection::Random],
        ..spec.clone()
    };
    let a = trainer::retrain_experiment(&f.net, &f.train, &corpus.records, &f.train, Holdout::Sample, None, &same_arm).unwrap();
    let b = trainer::retrain_experiment(&f.net, &f.train, &corpus.records, &f.train, Holdout::Sample, None, &same_arm).unwrap();
    assert_eq!(a, b);

    let too_many = ExperimentSpec {
        retrain_error_count: errors,
        ..same_arm
    };
    let err = trainer::retrain_experiment(&f.net, &f.train, &corpus.records, &f.train, Holdout::Sample, None, &too_many).unwrap_err();
    assert_eq!(err.kind(), "insufficient_errors");
}
