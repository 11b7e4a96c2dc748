//! SGD training with sample emphasis.
//!
//! Epochs up to the burn-in run plain Scan with unit weights. Afterwards the
//! strategy decides how each iteration's batch is drawn and weighted. After
//! every parameter update the batch's correct-class probabilities (from the
//! same forward pass that produced the gradient) are appended to the
//! history store.

use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::emphasis::{EmphasisState, Selection, StrategyKind, WtcForm};
use crate::error::{Error, Result};
use crate::history::HistoryStore;
use crate::models::Model;
use crate::numerics::{argmax, derive_seed, hash_str, CumulativeTable, Rng};

/// How per-sample losses of a batch are combined before the SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Gradient of `Σ v_i loss_i`.
    #[default]
    Sum,
    /// Gradient of `Σ v_i loss_i / |B|`.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    #[serde(default = "one_f64")]
    pub lr_decay: f64,
    #[serde(default = "one_usize")]
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub burn_in: usize,
    #[serde(default = "one_usize")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Epoch horizon for history statistics; unlimited when absent.
    #[serde(default)]
    pub history_window: Option<u32>,
    #[serde(default)]
    pub wtc_form: WtcForm,
    #[serde(default)]
    pub reduction: Reduction,
}

fn one_f64() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be positive and lr_decay_every at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.burn_in > self.epochs {
            return bad(format!(
                "burn_in ({}) exceeds epochs ({})",
                self.burn_in, self.epochs
            ));
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let steps = (epoch.saturating_sub(1) / self.lr_decay_every) as i32;
        self.learning_rate * self.lr_decay.powi(steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Percent of training draws misclassified by the pre-update forward pass.
    pub train_error: f64,
    pub test_error: f64,
    pub mean_weight: f64,
    pub learning_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub strategy: StrategyKind,
    pub trial: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl RunRecord {
    pub fn best_test_error(&self) -> f64 {
        self.epochs.iter().map(|e| e.test_error).fold(f64::INFINITY, f64::min)
    }

    pub fn best_train_error(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_error).fold(f64::INFINITY, f64::min)
    }

    /// Mean test error over the final `min(10, E)` epochs.
    pub fn last10_mean_test_error(&self) -> f64 {
        let k = self.epochs.len().min(10);
        let tail = &self.epochs[self.epochs.len() - k..];
        tail.iter().map(|e| e.test_error).sum::<f64>() / k as f64
    }
}

/// Percent of misclassified samples, argmax prediction with ties going to
/// the lowest class index.
pub fn evaluate<M: Model>(model: &M, data: &Dataset) -> f64 {
    const CHUNK: usize = 1000;
    let x = data.features();
    let mut wrong = 0usize;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let probs = model.predict(x.slice(s![start..end, ..]));
        for (row, &y) in probs.rows().into_iter().zip(&data.labels()[start..end]) {
            if argmax(row.as_slice().expect("contiguous")) != y {
                wrong += 1;
            }
        }
    }
    100.0 * wrong as f64 / data.len() as f64
}

/// Seed of the random stream used after burn-in. Trials sharing `seed`
/// share initialization and burn-in, then branch per strategy.
pub fn branch_seed(seed: u64, strategy: StrategyKind) -> u64 {
    derive_seed(seed, &[hash_str(strategy.token())])
}

/// What one epoch did, before test evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iterations: usize,
    pub draws: usize,
    pub train_error: f64,
    pub mean_weight: f64,
    pub learning_rate: f64,
    /// Every index drawn this epoch, in order.
    pub drawn: Vec<usize>,
}

/// Training state of a single trial.
pub struct Trainer<'a, M: Model> {
    config: TrainConfig,
    strategy: StrategyKind,
    data: &'a Dataset,
    model: M,
    store: HistoryStore,
    seed: u64,
    rng: Rng,
    epoch: usize,
    iteration: u64,
    batch: Array2<f64>,
}

impl<'a, M: Model> Trainer<'a, M> {
    pub fn new(
        config: TrainConfig,
        strategy: StrategyKind,
        data: &'a Dataset,
        model: M,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if model.input_dim() != data.dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: data.dim(),
                got: model.input_dim(),
            });
        }
        if model.num_classes() != data.n_classes() {
            return Err(Error::DimensionMismatch {
                what: "model classes",
                expected: data.n_classes(),
                got: model.num_classes(),
            });
        }
        let store = match config.history_window {
            Some(w) => HistoryStore::with_window(data.len(), data.n_classes(), w),
            None => HistoryStore::new(data.len(), data.n_classes()),
        };
        Ok(Self {
            config,
            strategy,
            data,
            model,
            store,
            seed,
            rng: Rng::new(seed),
            epoch: 0,
            iteration: 0,
            batch: Array2::zeros((0, 0)),
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn store(&self) -> &HistoryStore {
        &self.store
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn into_parts(self) -> (M, HistoryStore) {
        (self.model, self.store)
    }

    /// Whether the strategy (rather than burn-in Scan) drives `epoch`.
    fn biased(&self, epoch: usize) -> bool {
        epoch > self.config.burn_in
    }

    /// Batch sizes of one epoch: `ceil(n / B)` batches, the last one short.
    fn batch_sizes(&self) -> impl Iterator<Item = usize> {
        let (n, b) = (self.data.len(), self.config.batch_size);
        (0..n.div_ceil(b)).map(move |k| b.min(n - k * b))
    }

    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        self.epoch += 1;
        let epoch = self.epoch;
        self.store.begin_epoch(epoch as u32);
        if epoch == self.config.burn_in + 1 {
            self.rng = Rng::new(branch_seed(self.seed, self.strategy));
        }
        let lr = self.config.learning_rate_at(epoch);
        let selection = if self.biased(epoch) {
            self.strategy.selection()
        } else {
            Selection::Scan
        };
        let weighted = self.biased(epoch) && self.strategy.alters_weights();
        let scored = selection == Selection::Scored;
        let order = match selection {
            Selection::Scan => self.rng.permutation(self.data.len()),
            _ => Vec::new(),
        };

        let sizes: Vec<usize> = self.batch_sizes().collect();
        let mut cursor = 0;
        let mut drawn = Vec::with_capacity(self.data.len());
        let mut wrong = 0usize;
        let mut weight_sum = 0.0;
        let mut indices = Vec::with_capacity(self.config.batch_size);
        let mut v = Vec::with_capacity(self.config.batch_size);
        let mut labels = Vec::with_capacity(self.config.batch_size);

        for size in sizes {
            self.iteration += 1;
            let emphasis = (weighted || scored)
                .then(|| EmphasisState::compute(self.strategy, &self.store, self.config.wtc_form));

            indices.clear();
            match selection {
                Selection::Scan => {
                    indices.extend_from_slice(&order[cursor..cursor + size]);
                    cursor += size;
                }
                Selection::Uniform => {
                    for _ in 0..size {
                        indices.push(self.rng.below(self.data.len()));
                    }
                }
                Selection::Scored => {
                    let mass = emphasis.as_ref().expect("scored").sampling_mass();
                    let table = CumulativeTable::new(&mass)?;
                    for _ in 0..size {
                        indices.push(table.draw(&mut self.rng));
                    }
                }
            }

            v.clear();
            match (&emphasis, weighted) {
                (Some(e), true) => v.extend(indices.iter().map(|&i| e.weight(i))),
                _ => v.resize(indices.len(), 1.0),
            }
            labels.clear();
            labels.extend(indices.iter().map(|&i| self.data.labels()[i]));

            self.data.gather(&indices, &mut self.batch);
            let mut out = self.model.weighted_grad(self.batch.view(), &labels, &v)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: self.iteration,
                    what: "non-finite loss",
                });
            }
            if self.config.reduction == Reduction::Mean {
                out.grad.scale(1.0 / size as f64);
            }
            self.model
                .apply_update(&out.grad, lr)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        iteration: self.iteration,
                        what: "non-finite gradient",
                    },
                    other => other,
                })?;

            for (k, (&i, &y)) in indices.iter().zip(&labels).enumerate() {
                let row = out.probs.row(k);
                let row = row.as_slice().expect("contiguous");
                if argmax(row) != y {
                    wrong += 1;
                }
                self.store.record(i, row[y].clamp(0.0, 1.0), self.iteration)?;
            }
            weight_sum += v.iter().sum::<f64>();
            drawn.extend_from_slice(&indices);
        }

        let draws = drawn.len();
        Ok(EpochSummary {
            epoch,
            iterations: self.data.len().div_ceil(self.config.batch_size),
            draws,
            train_error: 100.0 * wrong as f64 / draws as f64,
            mean_weight: weight_sum / draws as f64,
            learning_rate: lr,
            drawn,
        })
    }
}

/// Result of a full training run.
pub struct TrainOutcome<M> {
    pub record: RunRecord,
    pub model: M,
    pub store: HistoryStore,
}

/// Runs all configured epochs, evaluating on `test` after each.
pub fn train<M: Model>(
    config: &TrainConfig,
    strategy: StrategyKind,
    data: &Dataset,
    test: &Dataset,
    model: M,
    seed: u64,
    trial: usize,
) -> Result<TrainOutcome<M>> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty"));
    }
    let mut trainer = Trainer::new(config.clone(), strategy, data, model, seed)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let start = Instant::now();
        let summary = trainer.run_epoch()?;
        let test_error = evaluate(trainer.model(), test);
        let rec = EpochRecord {
            epoch: summary.epoch,
            train_error: summary.train_error,
            test_error,
            mean_weight: summary.mean_weight,
            learning_rate: summary.learning_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{strategy} trial {trial} epoch {:>3}: train {:6.3}% test {:6.3}% mean v {:.4} lr {:.3e} ({:.1}s)",
            rec.epoch,
            rec.train_error,
            rec.test_error,
            rec.mean_weight,
            rec.learning_rate,
            rec.seconds
        );
        epochs.push(rec);
    }
    let (model, store) = trainer.into_parts();
    Ok(TrainOutcome {
        record: RunRecord {
            strategy,
            trial,
            seed,
            epochs,
        },
        model,
        store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy2d;
    use crate::models::{BinaryLogReg, SoftmaxRegression};
    use ndarray::array;

    fn config(batch: usize, epochs: usize, burn_in: usize) -> TrainConfig {
        TrainConfig {
            batch_size: batch,
            learning_rate: 0.1,
            lr_decay: 1.0,
            lr_decay_every: 1,
            epochs,
            burn_in,
            trials: 1,
            seed: 0,
            history_window: None,
            wtc_form: WtcForm::Literal,
            reduction: Reduction::Mean,
        }
    }

    #[test]
    fn validation() {
        assert!(config(0, 3, 1).validate().is_err());
        assert!(config(2, 3, 4).validate().is_err());
        assert!(config(2, 0, 0).validate().is_err());
        let mut c = config(2, 3, 1);
        c.learning_rate = -1.0;
        assert!(c.validate().is_err());
        assert!(config(2, 3, 3).validate().is_ok());
    }

    #[test]
    fn decay_schedule() {
        let mut c = config(1, 30, 0);
        c.learning_rate = 1.0;
        c.lr_decay = 0.5;
        assert_eq!(c.learning_rate_at(1), 1.0);
        assert_eq!(c.learning_rate_at(3), 0.25);
        c.lr_decay_every = 5;
        assert_eq!(c.learning_rate_at(5), 1.0);
        assert_eq!(c.learning_rate_at(6), 0.5);
        assert_eq!(c.learning_rate_at(30), 0.5f64.powi(5));
    }

    #[test]
    fn scan_epoch_partitions_data() {
        let data = gen_toy2d(1, 5, 0.0).unwrap();
        let mut t = Trainer::new(config(3, 2, 0), StrategyKind::Scan, &data, BinaryLogReg::new(2, 0.0), 7).unwrap();
        let e = t.run_epoch().unwrap();
        assert_eq!(e.iterations, 4);
        assert_eq!(e.draws, 10);
        let mut seen = e.drawn.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(t.batch_sizes().eq([3, 3, 3, 1]));
    }

    #[test]
    fn sampled_epoch_budget_and_bookkeeping() {
        let data = gen_toy2d(2, 5, 0.0).unwrap();
        let mut t = Trainer::new(config(3, 3, 1), StrategyKind::Sd, &data, BinaryLogReg::new(2, 0.0), 3).unwrap();
        t.run_epoch().unwrap();
        let before: Vec<usize> = (0..10).map(|i| t.store().history(i).len()).collect();
        let e = t.run_epoch().unwrap();
        assert_eq!((e.iterations, e.draws), (4, 10));
        for i in 0..10 {
            let times = e.drawn.iter().filter(|&&j| j == i).count();
            assert_eq!(t.store().history(i).len(), before[i] + times);
        }
    }

    #[test]
    fn evaluate_counts() {
        let m = BinaryLogReg::from_weights(&[1.0], 0.0, 0.0);
        let x = array![[1.0], [2.0], [-1.0], [-3.0], [0.0]];
        // predictions: 1, 1, 0, 0, tie -> 0
        let d = Dataset::new(x.clone(), vec![1, 0, 0, 1, 0], 2, "t").unwrap();
        assert_eq!(evaluate(&m, &d), 40.0);
        let all_right = Dataset::new(x.clone(), vec![1, 1, 0, 0, 0], 2, "t").unwrap();
        assert_eq!(evaluate(&m, &all_right), 0.0);
        let all_wrong = Dataset::new(x, vec![0, 0, 1, 1, 1], 2, "t").unwrap();
        assert_eq!(evaluate(&m, &all_wrong), 100.0);
    }

    #[test]
    fn burn_in_everywhere_matches_scan() {
        let data = gen_toy2d(4, 30, 0.1).unwrap();
        let test = gen_toy2d(5, 30, 0.0).unwrap();
        let cfg = config(8, 4, 4);
        let base = train(&cfg, StrategyKind::Scan, &data, &test, BinaryLogReg::new(2, 0.0), 11, 0).unwrap();
        for k in StrategyKind::ALL {
            let other = train(&cfg, k, &data, &test, BinaryLogReg::new(2, 0.0), 11, 0).unwrap();
            let strip = |r: &RunRecord| {
                r.epochs
                    .iter()
                    .map(|e| (e.train_error, e.test_error, e.mean_weight))
                    .collect::<Vec<_>>()
            };
            assert_eq!(strip(&other.record), strip(&base.record), "{k}");
            assert_eq!(other.model, base.model);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let data = gen_toy2d(6, 40, 0.1).unwrap();
        let test = gen_toy2d(7, 40, 0.0).unwrap();
        let cfg = config(10, 5, 2);
        for k in [StrategyKind::Spv, StrategyKind::Wtc, StrategyKind::Uni] {
            let a = train(&cfg, k, &data, &test, BinaryLogReg::new(2, 0.0), 5, 0).unwrap();
            let b = train(&cfg, k, &data, &test, BinaryLogReg::new(2, 0.0), 5, 0).unwrap();
            assert_eq!(a.model, b.model);
            let ea: Vec<_> = a.record.epochs.iter().map(|e| e.test_error).collect();
            let eb: Vec<_> = b.record.epochs.iter().map(|e| e.test_error).collect();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn scan_ignores_history() {
        // Scan and Uni must not read the store: pre-filling it with garbage
        // changes nothing.
        let data = gen_toy2d(8, 20, 0.0).unwrap();
        let run = |poison: bool, k: StrategyKind| {
            let mut t = Trainer::new(config(5, 3, 0), k, &data, BinaryLogReg::new(2, 0.0), 9).unwrap();
            if poison {
                for i in 0..data.len() {
                    t.store.record(i, (i % 7) as f64 / 7.0, 0).unwrap();
                }
            }
            for _ in 0..3 {
                t.run_epoch().unwrap();
            }
            t.model().clone()
        };
        for k in [StrategyKind::Scan, StrategyKind::Uni] {
            assert_eq!(run(false, k), run(true, k));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let x = array![[1e200, 1e200], [-1e200, 1e200]];
        let data = Dataset::new(x, vec![0, 1], 2, "huge").unwrap();
        let mut cfg = config(2, 2, 0);
        cfg.learning_rate = 1e200;
        let err = train(&cfg, StrategyKind::Scan, &data, &data, SoftmaxRegression::new(2, 2, 0.0), 1, 0);
        assert!(matches!(err, Err(Error::Diverged { .. })), "{:?}", err.err());
    }

    #[test]
    fn run_record_metrics() {
        let mk = |errs: &[f64]| RunRecord {
            strategy: StrategyKind::Scan,
            trial: 0,
            seed: 0,
            epochs: errs
                .iter()
                .enumerate()
                .map(|(k, &e)| EpochRecord {
                    epoch: k + 1,
                    train_error: e / 2.0,
                    test_error: e,
                    mean_weight: 1.0,
                    learning_rate: 0.1,
                    seconds: 0.0,
                })
                .collect(),
        };
        let r = mk(&[5.0, 3.0, 4.0]);
        assert_eq!(r.best_test_error(), 3.0);
        assert_eq!(r.best_train_error(), 1.5);
        assert_eq!(r.last10_mean_test_error(), 4.0);
        let long: Vec<f64> = (1..=12).map(|k| k as f64).collect();
        assert_eq!(mk(&long).last10_mean_test_error(), 7.5);
    }
}
