//! Multi-trial strategy comparisons driven by a TOML config.
//!
//! Output layout under the configured directory:
//!
//! - `runs/<strategy>_trial<k>.csv`: one row per epoch
//!   (`epoch,train_error,test_error,mean_weight,learning_rate,seconds`)
//! - `summary.csv`: one row per strategy (see [`SummaryRow`])
//! - `series.csv`: long format `strategy,trial,epoch,train_error,test_error`
//!
//! Floats are written with Rust's shortest round-trip formatting, so values
//! re-parsed from these files are bit-identical to the in-memory ones.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_toy2d, inject_label_noise, load_cifar10, load_idx, split_and_normalize, Dataset,
    Normalization,
};
use crate::emphasis::StrategyKind;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numerics::{derive_seed, mean_and_stderr, Rng};
use crate::trainer::{train, EpochRecord, RunRecord, TrainConfig};

const STREAM_DATA: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_NOISE: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic two-cluster data, drawn afresh for every trial.
    Toy {
        n_per_class: usize,
        outlier_frac: f64,
        #[serde(default = "default_toy_test")]
        test_per_class: usize,
    },
    /// Directory holding the four standard MNIST IDX files.
    Mnist { dir: PathBuf },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
    },
    /// Directory holding `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10 { dir: PathBuf },
}

fn default_toy_test() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub normalization: Normalization,
    /// Fraction of training labels replaced by a different random class.
    #[serde(default)]
    pub label_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Number of trials trained concurrently.
    #[serde(default = "default_parallel")]
    pub parallel: usize,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

fn default_parallel() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.run.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        let mut seen = self.run.strategies.clone();
        seen.sort_by_key(|k| k.token());
        seen.dedup();
        if seen.len() != self.run.strategies.len() {
            return Err(Error::Config("strategy list has duplicates".into()));
        }
        if self.run.parallel == 0 {
            return Err(Error::Config("parallel must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.data.label_noise) {
            return Err(Error::Config(format!(
                "label_noise {} not in [0, 1]",
                self.data.label_noise
            )));
        }
        let missing = |p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(Error::Config(format!("{} does not exist", p.display())))
            }
        };
        match &self.data.source {
            DataSource::Toy {
                n_per_class,
                outlier_frac,
                test_per_class,
            } => {
                if *n_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Config("toy class sizes must be at least 1".into()));
                }
                if !(0.0..0.5).contains(outlier_frac) {
                    return Err(Error::Config(format!("outlier_frac {outlier_frac} not in [0, 0.5)")));
                }
            }
            DataSource::Mnist { dir } | DataSource::Cifar10 { dir } => missing(dir)?,
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    missing(p)?;
                }
            }
            DataSource::Csv { train, test, .. } => {
                missing(train)?;
                missing(test)?;
            }
        }
        Ok(())
    }
}

/// Train and test sets, or a recipe to draw them per trial.
pub enum Prepared {
    Fixed { train: Dataset, test: Dataset },
    PerTrial(DataConfig),
}

fn finish(train: Dataset, test: Dataset, cfg: &DataConfig, noise_seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_and_normalize(&train, &test, cfg.normalization);
    let train = if cfg.label_noise > 0.0 {
        inject_label_noise(&train, cfg.label_noise, noise_seed)?.0
    } else {
        train
    };
    Ok((train, test))
}

fn toy_for_trial(cfg: &DataConfig, root: u64, trial: usize) -> Result<(Dataset, Dataset)> {
    let DataSource::Toy {
        n_per_class,
        outlier_frac,
        test_per_class,
    } = cfg.source
    else {
        unreachable!("only toy data is drawn per trial")
    };
    let t = trial as u64;
    let train = gen_toy2d(derive_seed(root, &[STREAM_DATA, t]), n_per_class, outlier_frac)?;
    let test = gen_toy2d(derive_seed(root, &[STREAM_TEST, t]), test_per_class, 0.0)?;
    finish(train, test, cfg, derive_seed(root, &[STREAM_NOISE, t]))
}

/// Loads file-backed data once; synthetic data is deferred to each trial.
pub fn prepare_data(cfg: &DataConfig, root: u64) -> Result<Prepared> {
    let (train, test) = match &cfg.source {
        DataSource::Toy { .. } => return Ok(Prepared::PerTrial(cfg.clone())),
        DataSource::Mnist { dir } => (
            load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?,
            load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?,
        ),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        DataSource::Csv { train, test, n_classes } => {
            let train = Dataset::read_csv(fs::File::open(train)?, *n_classes)?;
            let k = n_classes.unwrap_or(train.n_classes());
            let test = Dataset::read_csv(fs::File::open(test)?, Some(k))?;
            (train, test)
        }
        DataSource::Cifar10 { dir } => {
            let batches: Vec<PathBuf> = (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect();
            (load_cifar10(&batches)?, load_cifar10(&[dir.join("test_batch.bin")])?)
        }
    };
    let (train, test) = finish(train, test, cfg, derive_seed(root, &[STREAM_NOISE]))?;
    Ok(Prepared::Fixed { train, test })
}

/// Seed of one trial's training stream. Every strategy in a trial shares
/// it, so initialization and burn-in are paired; the trainer branches the
/// stream per strategy once burn-in ends.
pub fn trial_seed(root: u64, trial: usize) -> u64 {
    derive_seed(root, &[STREAM_TRAIN, trial as u64])
}

pub fn run_trial(
    cfg: &ExperimentConfig,
    data: &Prepared,
    strategy: StrategyKind,
    trial: usize,
) -> Result<RunRecord> {
    let root = cfg.train.seed;
    let owned;
    let (train_set, test_set) = match data {
        Prepared::Fixed { train, test } => (train, test),
        Prepared::PerTrial(dc) => {
            owned = toy_for_trial(dc, root, trial)?;
            (&owned.0, &owned.1)
        }
    };
    let mut init = Rng::new(derive_seed(root, &[STREAM_INIT, trial as u64]));
    let model = cfg.model.build(train_set.dim(), train_set.n_classes(), &mut init)?;
    let out = train(&cfg.train, strategy, train_set, test_set, model, trial_seed(root, trial), trial)?;
    Ok(out.record)
}

/// Per-strategy aggregate over trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub trials: usize,
    pub best_test_mean: f64,
    pub best_test_se: f64,
    pub last10_test_mean: f64,
    pub last10_test_se: f64,
    pub best_train_mean: f64,
    pub best_train_se: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, strategy: StrategyKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "strategy",
            "trials",
            "best_test_mean",
            "best_test_se",
            "last10_test_mean",
            "last10_test_se",
            "best_train_mean",
            "best_train_se",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.strategy.token().to_string(),
                r.trials.to_string(),
                r.best_test_mean.to_string(),
                r.best_test_se.to_string(),
                r.last10_test_mean.to_string(),
                r.last10_test_se.to_string(),
                r.best_train_mean.to_string(),
                r.best_train_se.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates records per strategy, keeping first-appearance order.
pub fn summarize(records: &[RunRecord]) -> SummaryTable {
    let mut order: Vec<StrategyKind> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !order.contains(&r.strategy) {
            order.push(r.strategy);
        }
        groups.entry(r.strategy.token()).or_default().push(r);
    }
    let rows = order
        .into_iter()
        .map(|k| {
            let g = &groups[k.token()];
            let stat = |f: fn(&RunRecord) -> f64| {
                let v: Vec<f64> = g.iter().map(|r| f(r)).collect();
                mean_and_stderr(&v)
            };
            let (bt, bt_se) = stat(RunRecord::best_test_error);
            let (l10, l10_se) = stat(RunRecord::last10_mean_test_error);
            let (btr, btr_se) = stat(RunRecord::best_train_error);
            SummaryRow {
                strategy: k,
                trials: g.len(),
                best_test_mean: bt,
                best_test_se: bt_se,
                last10_test_mean: l10,
                last10_test_se: l10_se,
                best_train_mean: btr,
                best_train_se: btr_se,
            }
        })
        .collect();
    SummaryTable { rows }
}

pub fn write_run_csv<W: Write>(record: &RunRecord, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_error", "test_error", "mean_weight", "learning_rate", "seconds"])?;
    for e in &record.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_error.to_string(),
            e.test_error.to_string(),
            e.mean_weight.to_string(),
            e.learning_rate.to_string(),
            e.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_run_csv<R: Read>(input: R, strategy: StrategyKind, trial: usize, seed: u64) -> Result<RunRecord> {
    let mut r = csv::Reader::from_reader(input);
    let epochs = r
        .deserialize::<EpochRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(RunRecord {
        strategy,
        trial,
        seed,
        epochs,
    })
}

pub fn run_file_name(strategy: StrategyKind, trial: usize) -> String {
    format!("{}_trial{trial}.csv", strategy.token())
}

/// Long-format training curves of every record.
pub fn emit_series<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("no records to emit"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["strategy", "trial", "epoch", "train_error", "test_error"])?;
    for r in records {
        for e in &r.epochs {
            w.write_record([
                r.strategy.token().to_string(),
                r.trial.to_string(),
                e.epoch.to_string(),
                e.train_error.to_string(),
                e.test_error.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of the series file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub strategy: StrategyKind,
    pub trial: usize,
    pub epoch: usize,
    pub train_error: f64,
    pub test_error: f64,
}

pub fn parse_series<R: Read>(input: R) -> Result<Vec<SeriesPoint>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Completed and failed trials of an experiment.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub summary: SummaryTable,
    pub failures: Vec<(StrategyKind, usize, Error)>,
}

/// Runs every strategy × trial pair, writing per-trial CSVs as trials
/// finish and the summary and series at the end. Failed trials are
/// reported in the outcome; the remaining outputs are still written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out_dir = &cfg.run.output;
    let runs_dir = out_dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;

    let data = prepare_data(&cfg.data, cfg.train.seed)?;
    let jobs: Vec<(StrategyKind, usize)> = cfg
        .run
        .strategies
        .iter()
        .flat_map(|&k| (0..cfg.train.trials).map(move |t| (k, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(k, t)| {
                let rec = run_trial(cfg, &data, k, t)?;
                write_run_csv(&rec, fs::File::create(runs_dir.join(run_file_name(k, t)))?)?;
                Ok(rec)
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for ((k, t), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::error!("{k} trial {t} failed: {e}");
                failures.push((k, t, e));
            }
        }
    }
    let summary = summarize(&records);
    summary.write_csv(fs::File::create(out_dir.join("summary.csv"))?)?;
    if !records.is_empty() {
        emit_series(&records, fs::File::create(out_dir.join("series.csv"))?)?;
    }
    Ok(ExperimentOutcome {
        records,
        summary,
        failures,
    })
}
