use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use oodfuzz_core::corpus::{self, ErrorSelection, RunManifest};
use oodfuzz_core::coverage::{CoverageConfig, DEFAULT_KMNC_SECTIONS, DEFAULT_NC_THRESHOLD};
use oodfuzz_core::fuzzer::{run_fuzz, FuzzConfig, DEFAULT_BUDGET, DEFAULT_ENERGY};
use oodfuzz_core::model_io::{encode_idx_images, encode_idx_labels, to_bytes};
use oodfuzz_core::mutation::MutationRegistry;
use oodfuzz_core::ood::ScorerRegistry;
use oodfuzz_core::profiler::{build_profile, Profile};
use oodfuzz_core::report::{report, report_separate_runs, ReportView};
use oodfuzz_core::trainer::{self, ExperimentSpec, Holdout, TrainConfig};
use oodfuzz_core::{load_dataset, load_model, save_model, Dataset, Error, Network, Result};

#[derive(Parser)]
#[command(name = "oodfuzz", version, about = "Distribution-aware coverage-guided testing for image classifiers")]
struct Cli {
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record activation ranges and the OOD score threshold of a training set.
    Profile(ProfileArgs),
    /// Run the coverage-guided fuzzer and write a corpus directory.
    Fuzz(FuzzArgs),
    /// Summarize a corpus as before/after benign and error counts.
    Report(ReportArgs),
    /// Retrain on exported errors and compare the arms on an error holdout.
    Retrain(RetrainArgs),
    /// Re-materialize corpus records from their mutation chains.
    Replay(ReplayArgs),
    /// Train a dense network, optionally with outlier exposure.
    Train(TrainArgs),
}

/// `IMAGES,LABELS` pair of IDX files.
#[derive(Clone, Debug)]
struct DataPaths {
    images: PathBuf,
    labels: PathBuf,
}

impl FromStr for DataPaths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(',') {
            Some((i, l)) if !i.is_empty() && !l.is_empty() => Ok(DataPaths {
                images: i.into(),
                labels: l.into(),
            }),
            _ => Err(format!("expected IMAGES,LABELS, got `{s}`")),
        }
    }
}

impl DataPaths {
    fn load(&self) -> Result<Dataset> {
        load_dataset(&self.images, &self.labels)
    }

    fn to_json(&self) -> serde_json::Value {
        json!([self.images, self.labels])
    }
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: DataPaths,
    #[arg(long, default_value = "oe")]
    scorer: String,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuzzArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    seeds: DataPaths,
    #[arg(long, default_value = "kmnc")]
    criterion: String,
    #[arg(long, default_value = "oe")]
    scorer: String,
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = DEFAULT_ENERGY)]
    energy: usize,
    #[arg(long, default_value_t = 0)]
    run_seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = DEFAULT_NC_THRESHOLD)]
    nc_threshold: f32,
    #[arg(long, default_value_t = DEFAULT_KMNC_SECTIONS)]
    kmnc_sections: usize,
    /// Requeue OOD mutants too (distribution-unaware baseline).
    #[arg(long)]
    unguided: bool,
    #[arg(long)]
    commit_ood_coverage: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "both")]
    view: String,
    /// Unguided run whose counts form the "before" column.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct RetrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: DataPaths,
    #[arg(long)]
    corpus: PathBuf,
    /// Seed dataset of the corpus; defaults to the one recorded in run.json.
    #[arg(long)]
    seeds: Option<DataPaths>,
    #[arg(long, default_value = "random,id,ood", value_delimiter = ',')]
    arms: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    retrain_count: usize,
    #[arg(long, default_value_t = 200)]
    holdout_count: usize,
    /// Second run (for example under the other criterion); the holdout is
    /// drawn from errors both runs found.
    #[arg(long)]
    holdout_corpus: Option<PathBuf>,
    #[arg(long)]
    test: Option<DataPaths>,
    #[arg(long)]
    from_scratch: bool,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long = "id", required = true, value_delimiter = ',')]
    ids: Vec<u64>,
    #[arg(long)]
    seeds: Option<DataPaths>,
    /// Re-classify the replayed inputs with this model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Write the images and seed labels as an IDX pair.
    #[arg(long)]
    out: Option<DataPaths>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: DataPaths,
    /// Hidden and output widths of a fresh MLP.
    #[arg(long, default_value = "128,64,10", value_delimiter = ',')]
    widths: Vec<usize>,
    /// Continue training an existing model instead.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    outliers: Option<DataPaths>,
    /// Generate this many synthetic outlier images.
    #[arg(long)]
    synthetic_outliers: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    oe_lambda: f64,
    #[arg(long)]
    test: Option<DataPaths>,
    #[command(flatten)]
    train_flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialization is infallible");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let train = a.train.load()?;
    let profile = build_profile(&net, &train, &ScorerRegistry::builtin(), &a.scorer, a.temperature)?;
    profile.save(&a.out)?;
    let active = profile.active.iter().filter(|&&x| x).count();
    let width = profile
        .low
        .iter()
        .zip(&profile.high)
        .map(|(l, h)| f64::from(h - l))
        .sum::<f64>()
        / profile.low.len().max(1) as f64;
    println!("scorer      {} (T = {})", profile.scorer, profile.temperature);
    println!("threshold   {:.6} (p{} of {} scores)", profile.ood_threshold, 99, profile.ood_scores.len());
    println!("neurons     {} ({} active, mean range width {:.4})", profile.low.len(), active, width);
    println!("fingerprint {}", profile.fingerprint);
    Ok(())
}

fn cmd_fuzz(a: FuzzArgs) -> Result<()> {
    let net = load_model(&a.model)?;
    let profile = Profile::load(&a.profile)?;
    let seeds = a.seeds.load()?;
    let cfg = FuzzConfig {
        coverage: CoverageConfig {
            criterion: a.criterion,
            nc_threshold: a.nc_threshold,
            kmnc_sections: a.kmnc_sections,
        },
        scorer: a.scorer,
        budget: a.budget,
        energy: a.energy,
        run_seed: a.run_seed,
        workers: a.workers,
        ood_guided: !a.unguided,
        commit_ood_coverage: a.commit_ood_coverage,
    };
    cfg.validate()?;
    let inputs = json!({
        "model": a.model,
        "profile": a.profile,
        "seeds": a.seeds.to_json(),
    });
    let mut manifest = RunManifest::start(&cfg, &net, &profile, &seeds, inputs);
    corpus::write_manifest(&a.out, &manifest)?;
    let (state, corpus) = run_fuzz(&net, &profile, &seeds, &cfg)?;
    corpus::write_corpus(&a.out, &mut manifest, &corpus, &state)?;
    print!("{}", report(&corpus, ReportView::Both).to_table());
    println!("corpus      {}", a.out.display());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let view: ReportView = a.view.parse()?;
    let corpus = corpus::read_corpus(&a.corpus)?;
    let rep = match &a.baseline {
        Some(dir) => report_separate_runs(&corpus::read_corpus(dir)?, &corpus, view),
        None => report(&corpus, view),
    };
    if let Some(out) = &a.out {
        write_json(out, &rep)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rep).expect("serialization is infallible"));
    } else {
        print!("{}", rep.to_table());
    }
    Ok(())
}

/// Seed dataset of a corpus, checked against the fingerprint in run.json.
fn corpus_seeds(dir: &Path, given: Option<&DataPaths>) -> Result<Dataset> {
    let manifest = corpus::read_manifest(dir)?;
    let paths = match given {
        Some(p) => p.clone(),
        None => {
            let recorded = manifest.inputs.get("seeds").and_then(|v| v.as_array()).and_then(|v| {
                let images = v.first()?.as_str()?;
                let labels = v.get(1)?.as_str()?;
                Some(DataPaths {
                    images: images.into(),
                    labels: labels.into(),
                })
            });
            recorded.ok_or_else(|| Error::InvalidConfig(format!("{} records no seed dataset; pass --seeds", dir.display())))?
        }
    };
    let seeds = paths.load()?;
    if seeds.fingerprint() != manifest.seeds_fingerprint {
        return Err(Error::InvalidConfig(format!(
            "seed dataset {} does not match the one used for {}",
            paths.images.display(),
            dir.display()
        )));
    }
    Ok(seeds)
}

fn cmd_retrain(a: RetrainArgs) -> Result<()> {
    let base = load_model(&a.model)?;
    let train = a.train.load()?;
    let corpus = corpus::read_corpus(&a.corpus)?;
    let seeds = corpus_seeds(&a.corpus, a.seeds.as_ref())?;
    let test = a.test.as_ref().map(DataPaths::load).transpose()?;
    let arms = a.arms.iter().map(|s| ErrorSelection::parse(s)).collect::<Result<Vec<_>>>()?;
    let spec = ExperimentSpec {
        arms,
        retrain_error_count: a.retrain_count,
        holdout_error_count: a.holdout_count,
        train: TrainConfig {
            from_scratch: a.from_scratch,
            ..a.train_flags.config()
        },
    };
    let other = a.holdout_corpus.as_deref().map(corpus::read_corpus).transpose()?;
    let holdout = match &other {
        Some(c) => Holdout::Shared(&c.records),
        None => Holdout::Sample,
    };
    let result = trainer::retrain_experiment(&base, &train, &corpus.records, &seeds, holdout, test.as_ref(), &spec)?;
    write_json(&a.out, &result)?;
    println!(
        "{:<10} {:>10} {:>10}",
        "arm", "holdout", "test"
    );
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("{:<10} {:>10.4} {:>10}", "base", result.base_holdout_accuracy, fmt(result.base_test_accuracy));
    for arm in &result.arms {
        println!("{:<10} {:>10.4} {:>10}", arm.arm.name(), arm.holdout_accuracy, fmt(arm.test_accuracy));
    }
    Ok(())
}

fn cmd_replay(a: ReplayArgs) -> Result<()> {
    let corpus = corpus::read_corpus(&a.corpus)?;
    let seeds = corpus_seeds(&a.corpus, a.seeds.as_ref())?;
    let net: Option<Network> = a.model.as_ref().map(load_model).transpose()?;
    let registry = MutationRegistry::builtin();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for &id in &a.ids {
        let record = corpus::find_record(&corpus, id)?;
        let image = corpus::replay(record, &seeds, &registry)?;
        let predicted = match &net {
            Some(n) => Some(n.forward_trace(&image)?.predicted_class),
            None => None,
        };
        println!(
            "{}",
            json!({
                "id": id,
                "dataset_index": record.dataset_index,
                "label": record.label,
                "chain": record.chain,
                "recorded_prediction": record.outcome.predicted_class,
                "replayed_prediction": predicted,
            })
        );
        pixels.extend(to_bytes(&image));
        labels.push(record.label);
    }
    if let Some(out) = &a.out {
        let data = Dataset::new("replay", seeds.dims(), pixels, labels)?;
        fs::write(&out.images, encode_idx_images(&data)).map_err(|e| Error::Io {
            path: out.images.clone(),
            source: e,
        })?;
        fs::write(&out.labels, encode_idx_labels(data.labels())).map_err(|e| Error::Io {
            path: out.labels.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let train = a.train.load()?;
    let [h, w, c] = train.dims();
    let net = match &a.init {
        Some(p) => load_model(p)?,
        None => Network::mlp(vec![h, w, c], &a.widths, a.train_flags.seed)?,
    };
    let cfg = TrainConfig {
        oe_lambda: a.oe_lambda,
        ..a.train_flags.config()
    };
    let mut outliers = a.outliers.as_ref().map(DataPaths::load).transpose()?;
    if let Some(n) = a.synthetic_outliers {
        let synth = trainer::synthetic_outliers(n, [h, w, c], a.train_flags.seed)?;
        match &mut outliers {
            Some(o) => o.extend(&synth)?,
            None => outliers = Some(synth),
        }
    }
    let (trained, outcome) = match &outliers {
        Some(o) => trainer::oe_train(&net, &train, o, &cfg)?,
        None => trainer::train(&net, &train, &cfg)?,
    };
    save_model(&trained, &a.out)?;
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.5}", e + 1);
    }
    println!("train accuracy {:.4}", trainer::accuracy(&trained, &train)?);
    if let Some(t) = &a.test {
        println!("test accuracy  {:.4}", trainer::accuracy(&trained, &t.load()?)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Profile(a) => cmd_profile(a),
        Command::Fuzz(a) => cmd_fuzz(a),
        Command::Report(a) => cmd_report(a),
        Command::Retrain(a) => cmd_retrain(a),
        Command::Replay(a) => cmd_replay(a),
        Command::Train(a) => cmd_train(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let error_json = cli.error_json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code: u8 = if e.is_input_error() { 2 } else { 3 };
            if error_json {
                eprintln!("{}", json!({"error": e.kind(), "message": e.to_string(), "exit_code": code}));
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}
