//! Acceptance criteria, one test per criterion, each printing a single
//! `criterion N ...: PASS|FAIL|SKIP` line (run with `--nocapture` to see
//! them).
//!
//! Criteria 5 to 9 are exact properties and always assert. Criteria 1 to 4
//! and 10 are training experiments; they always run and report, and assert
//! only when `ACCEPTANCE_STRICT=1`.
//!
//! MNIST is read from `$ACTIVE_BIAS_MNIST` (default `/root/data/mnist`),
//! CIFAR-10 binaries from `$ACTIVE_BIAS_CIFAR10`. Missing data turns the
//! affected criteria into SKIP lines.

use std::path::PathBuf;
use std::sync::OnceLock;

use active_bias::analysis::{fit_map, laplace_covariance, prediction_variance, trace_identity_residual, Design};
use active_bias::data::{inject_label_noise, load_idx, Dataset, Normalization};
use active_bias::emphasis::{sampling_distribution, weights, EmphasisState, StrategyKind, WtcForm};
use active_bias::experiment::{
    run_trial, summarize, DataConfig, DataSource, ExperimentConfig, Prepared, RunConfig, SummaryTable,
};
use active_bias::history::HistoryStore;
use active_bias::models::{BinaryLogReg, FcNet, Model, ModelSpec, SoftmaxRegression};
use active_bias::numerics::{mean_and_stderr, Rng};
use active_bias::trainer::{Reduction, TrainConfig};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;

use StrategyKind::*;

fn strict() -> bool {
    std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

fn report(n: u32, name: &str, passed: bool, detail: &str) {
    println!(
        "criterion {n} {name}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
}

fn skip(n: u32, name: &str, why: &str) {
    println!("criterion {n} {name}: SKIP ({why})");
}

/// Experiment criteria report their outcome and gate only in strict mode.
fn settle(n: u32, name: &str, passed: bool, detail: &str) {
    report(n, name, passed, detail);
    if strict() {
        assert!(passed, "criterion {n} failed: {detail}");
    }
}

// ---------------------------------------------------------------- MNIST

const FIVE: [StrategyKind; 5] = [Scan, Wd, We, Wpv, Wtc];

fn mnist_dir() -> PathBuf {
    std::env::var_os("ACTIVE_BIAS_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data/mnist"))
}

fn mnist() -> Option<&'static (Dataset, Dataset)> {
    static DATA: OnceLock<Option<(Dataset, Dataset)>> = OnceLock::new();
    DATA.get_or_init(|| {
        let d = mnist_dir();
        let train = load_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte")).ok()?;
        let test = load_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")).ok()?;
        Some((train, test))
    })
    .as_ref()
}

fn mnist_fc_config(trials: usize, label_noise: f64) -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig {
            source: DataSource::Mnist { dir: mnist_dir() },
            normalization: Normalization::None,
            label_noise,
        },
        model: ModelSpec::Fc {
            hidden: vec![40],
            l2: 0.0,
        },
        train: TrainConfig {
            batch_size: 128,
            learning_rate: 0.1,
            lr_decay: 1.0,
            lr_decay_every: 1,
            epochs: 60,
            burn_in: 20,
            trials,
            seed: 2017,
            history_window: None,
            wtc_form: WtcForm::Literal,
            reduction: Reduction::Mean,
        },
        run: RunConfig {
            strategies: FIVE.to_vec(),
            output: PathBuf::from("unused"),
            parallel: 1,
        },
    }
}

fn run_all(cfg: &ExperimentConfig, data: &Prepared) -> SummaryTable {
    let mut records = Vec::new();
    for &k in &cfg.run.strategies {
        for t in 0..cfg.train.trials {
            records.push(run_trial(cfg, data, k, t).expect("trial completes"));
        }
    }
    summarize(&records)
}

fn describe(s: &SummaryTable, pick: fn(&active_bias::experiment::SummaryRow) -> (f64, f64)) -> String {
    s.rows
        .iter()
        .map(|r| {
            let (m, se) = pick(r);
            format!("{} {m:.3}±{se:.3}", r.strategy.token())
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Criteria 1 and 2 share the clean MNIST runs.
fn clean_mnist_summary() -> Option<&'static SummaryTable> {
    static SUMMARY: OnceLock<Option<SummaryTable>> = OnceLock::new();
    SUMMARY
        .get_or_init(|| {
            let (train, test) = mnist()?;
            let data = Prepared::Fixed {
                train: train.clone(),
                test: test.clone(),
            };
            Some(run_all(&mnist_fc_config(10, 0.0), &data))
        })
        .as_ref()
}

#[test]
fn criterion_01_mnist_fc_reproduction() {
    let name = "MNIST FC best test error";
    let Some(s) = clean_mnist_summary() else {
        return skip(1, name, "MNIST files not found");
    };
    let targets = [(Scan, 2.85), (Wd, 2.17), (We, 3.08), (Wpv, 2.68), (Wtc, 2.34)];
    let mean = |k| s.get(k).unwrap().best_test_mean;
    let within = targets.iter().all(|&(k, t)| (mean(k) - t).abs() <= 0.4);
    let ordered = mean(Wd) < mean(Wtc) && mean(Wtc) < mean(Wpv) && mean(Wpv) < mean(Scan) && mean(Scan) < mean(We);
    let detail = format!(
        "{}; within 0.4: {within}; order wd<wtc<wpv<scan<we: {ordered}",
        describe(s, |r| (r.best_test_mean, r.best_test_se))
    );
    settle(1, name, within && ordered, &detail);
}

#[test]
fn criterion_02_mnist_fc_training_error() {
    let name = "MNIST FC best training error, WD lowest";
    let Some(s) = clean_mnist_summary() else {
        return skip(2, name, "MNIST files not found");
    };
    let wd = s.get(Wd).unwrap().best_train_mean;
    let lowest = FIVE.iter().filter(|&&k| k != Wd).all(|&k| wd < s.get(k).unwrap().best_train_mean);
    settle(2, name, lowest, &describe(s, |r| (r.best_train_mean, r.best_train_se)));
}

#[test]
fn criterion_03_mnist_fc_label_noise() {
    let name = "MNIST FC with 10% label noise";
    let Some((train, test)) = mnist() else {
        return skip(3, name, "MNIST files not found");
    };
    let cfg = mnist_fc_config(5, 0.1);
    let noisy = inject_label_noise(train, 0.1, 2017).expect("noise").0;
    let data = Prepared::Fixed {
        train: noisy,
        test: test.clone(),
    };
    let s = run_all(&cfg, &data);
    let m = |k| s.get(k).unwrap().best_test_mean;
    let passed = [We, Wpv, Wtc].iter().all(|&k| m(k) < m(Scan) && m(k) < m(Wd));
    settle(3, name, passed, &describe(&s, |r| (r.best_test_mean, r.best_test_se)));
}

// ------------------------------------------------------------------ toy

#[test]
fn criterion_04_toy_outliers() {
    let name = "toy outliers, WPV beats Scan and WD";
    let cfg = ExperimentConfig {
        data: DataConfig {
            source: DataSource::Toy {
                n_per_class: 50,
                outlier_frac: 0.1,
                test_per_class: 2000,
            },
            normalization: Normalization::None,
            label_noise: 0.0,
        },
        model: ModelSpec::BinaryLogistic { l2: 0.0 },
        train: TrainConfig {
            batch_size: 10,
            learning_rate: 0.1,
            lr_decay: 1.0,
            lr_decay_every: 1,
            epochs: 40,
            burn_in: 10,
            trials: 30,
            seed: 7,
            history_window: None,
            wtc_form: WtcForm::Literal,
            reduction: Reduction::Sum,
        },
        run: RunConfig {
            strategies: vec![Scan, Wd, Wpv],
            output: PathBuf::from("unused"),
            parallel: 1,
        },
    };
    let data = Prepared::PerTrial(cfg.data.clone());
    let best = |k| -> Vec<f64> {
        (0..30)
            .map(|t| run_trial(&cfg, &data, k, t).expect("trial").best_test_error())
            .collect()
    };
    let (scan, wd, wpv) = (best(Scan), best(Wd), best(Wpv));
    let paired = |other: &[f64]| {
        let d: Vec<f64> = other.iter().zip(&wpv).map(|(o, w)| o - w).collect();
        mean_and_stderr(&d)
    };
    let (gain_scan, se_scan) = paired(&scan);
    let (gain_wd, se_wd) = paired(&wd);
    let passed = gain_scan > se_scan && gain_wd > se_wd;
    let detail = format!(
        "mean best test scan {:.3}, wd {:.3}, wpv {:.3}; scan-wpv {gain_scan:+.4}±{se_scan:.4}, wd-wpv {gain_wd:+.4}±{se_wd:.4}",
        mean_and_stderr(&scan).0,
        mean_and_stderr(&wd).0,
        mean_and_stderr(&wpv).0
    );
    settle(4, name, passed, &detail);
}

// ------------------------------------------------------------- analysis

fn random_design(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Design {
    let w_true: Vec<f64> = (0..d).map(|_| rng.normal() * scale).collect();
    let x = DMatrix::from_fn(n, d, |_, _| rng.normal());
    let y = (0..n)
        .map(|r| {
            let z: f64 = (0..d).map(|c| x[(r, c)] * w_true[c]).sum();
            if rng.uniform() < 1.0 / (1.0 + (-z).exp()) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    Design::new(x, y).unwrap()
}

#[test]
fn criterion_05_average_variance_identity() {
    let mut rng = Rng::new(55);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 30 + rng.below(171);
        let d = 2 + rng.below(9);
        let design = random_design(&mut rng, n, d, 1.0);
        let w = DVector::from_fn(d, |_, _| rng.normal());
        worst = worst.max(trace_identity_residual(&design, &w, 0.0).unwrap());
    }
    let passed = worst < 1e-8;
    report(5, "average prediction variance identity", passed, &format!("max residual {worst:.2e} over 20 instances"));
    assert!(passed);
}

#[test]
fn criterion_06_laplace_vs_monte_carlo() {
    let mut rng = Rng::new(66);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..10 {
        let design = random_design(&mut rng, 2000, 2, 0.5);
        let w = fit_map(&design, 1.0, 0.5).unwrap();
        let s_n = laplace_covariance(&w, &design, 1.0, 0.5, None).unwrap();
        let x = [rng.normal(), rng.normal()];
        let lap = prediction_variance(&x, 1.0, &w, &s_n);

        // Independent oracle: sample w ~ N(w_N, S_N) through a hand-rolled
        // 2x2 Cholesky factor and measure the spread of p.
        let (a, b, c) = (s_n[(0, 0)], s_n[(1, 0)], s_n[(1, 1)]);
        let l00 = a.sqrt();
        let l10 = b / l00;
        let l11 = (c - l10 * l10).sqrt();
        const M: usize = 100_000;
        let ps: Vec<f64> = (0..M)
            .map(|_| {
                let (z0, z1) = (rng.normal(), rng.normal());
                let w0 = w[0] + l00 * z0;
                let w1 = w[1] + l10 * z0 + l11 * z1;
                1.0 / (1.0 + (-(w0 * x[0] + w1 * x[1])).exp())
            })
            .collect();
        let mean = ps.iter().sum::<f64>() / M as f64;
        let var = ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (M - 1) as f64;
        let m4 = ps.iter().map(|p| (p - mean).powi(4)).sum::<f64>() / M as f64;
        let se = ((m4 - var * var) / M as f64).sqrt();
        let bound = (0.05 * var).max(3.0 * se);
        worst_ratio = worst_ratio.max((lap - var).abs() / bound);
    }
    let passed = worst_ratio <= 1.0;
    report(
        6,
        "first-order variance vs Monte-Carlo",
        passed,
        &format!("worst |laplace-mc| / bound = {worst_ratio:.3} over 10 instances"),
    );
    assert!(passed);
}

// --------------------------------------------------------------- models

fn random_batch(rng: &mut Rng, n: usize, d: usize, k: usize) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
    let x = Array2::from_shape_fn((n, d), |_| rng.normal());
    let y = (0..n).map(|_| rng.below(k)).collect();
    let v = (0..n).map(|_| rng.uniform_range(0.0, 2.0)).collect();
    (x, y, v)
}

/// Worst relative error between analytic and central-difference gradients
/// over 50 random coordinates.
fn gradient_error<M: Model>(model: &mut M, rng: &mut Rng, n: usize) -> f64 {
    let (d, k) = (model.input_dim(), model.num_classes());
    let (x, y, v) = random_batch(rng, n, d, k);
    let analytic = model.weighted_grad(x.view(), &y, &v).unwrap().grad;
    let total = model.params().len();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let j = rng.below(total);
        let theta = model.params().get(j);
        let h = 1e-6 * (1.0 + theta.abs());
        model.params_mut().set(j, theta + h);
        let up = model.weighted_loss(x.view(), &y, &v).unwrap();
        model.params_mut().set(j, theta - h);
        let down = model.weighted_loss(x.view(), &y, &v).unwrap();
        model.params_mut().set(j, theta);
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.get(j);
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
    }
    worst
}

fn randomize<M: Model>(model: &mut M, rng: &mut Rng) {
    for j in 0..model.params().len() {
        model.params_mut().set(j, rng.normal() * 0.5);
    }
}

#[test]
fn criterion_07_gradients() {
    let mut rng = Rng::new(77);
    let mut errors = Vec::new();
    let mut bin = BinaryLogReg::new(5, 0.01);
    randomize(&mut bin, &mut rng);
    errors.push(("binary-logistic", gradient_error(&mut bin, &mut rng, 16)));
    let mut soft = SoftmaxRegression::new(6, 4, 0.01);
    randomize(&mut soft, &mut rng);
    errors.push(("softmax", gradient_error(&mut soft, &mut rng, 16)));
    let mut fc = FcNet::new(&[7, 9, 6, 3], 0.01, &mut rng).unwrap();
    errors.push(("fc", gradient_error(&mut fc, &mut rng, 16)));
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let passed = worst < 1e-5;
    report(7, "gradients vs finite differences", passed, &detail);
    assert!(passed);
}

// ------------------------------------------------------------- emphasis

fn random_store(rng: &mut Rng, n: usize, classes: usize) -> HistoryStore {
    let mut store = HistoryStore::new(n, classes);
    let epochs = 1 + rng.below(6);
    let mut t = 0;
    for e in 1..=epochs as u32 {
        store.begin_epoch(e);
        for i in 0..n {
            if rng.uniform() < 0.7 {
                t += 1;
                store.record(i, rng.uniform(), t).unwrap();
            }
        }
    }
    store
}

#[test]
fn criterion_08_isd_unbiased() {
    let mut rng = Rng::new(88);
    let n = 6;
    let mut model = SoftmaxRegression::new(3, 3, 0.0);
    randomize(&mut model, &mut rng);
    let (x, y, _) = random_batch(&mut rng, n, 3, 3);
    let store = random_store(&mut rng, n, 3);
    let p = sampling_distribution(Isd, &store, &[false; 6]);
    let v = weights(Isd, &store, WtcForm::Literal);

    let row_grad = |i: usize, weight: f64| {
        let xi = x.slice(ndarray::s![i..i + 1, ..]);
        model.weighted_grad(xi, &y[i..i + 1], &[weight]).unwrap().grad.to_flat()
    };
    let dim = model.params().len();
    let mut expected = vec![0.0; dim];
    for i in 0..n {
        for (e, g) in expected.iter_mut().zip(row_grad(i, v[i])) {
            *e += p[i] * g;
        }
    }
    let full = model.weighted_grad(x.view(), &y, &[1.0; 6]).unwrap().grad.to_flat();
    let worst = expected
        .iter()
        .zip(&full)
        .map(|(e, f)| (e - f / n as f64).abs())
        .fold(0.0, f64::max);
    let spread = EmphasisState::compute(Isd, &store, WtcForm::Literal).scores().to_vec();
    let passed = worst < 1e-10;
    report(
        8,
        "importance-sampled difficulty is unbiased",
        passed,
        &format!("max |E[v g] - mean g| = {worst:.1e}; raw scores {spread:.3?}"),
    );
    assert!(passed);
}

#[test]
fn criterion_09_normalization() {
    let mut rng = Rng::new(99);
    let mut worst_mean: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + rng.below(40);
        let classes = 2 + rng.below(9);
        let store = random_store(&mut rng, n, classes);
        for k in [Wd, We, Wpv] {
            let v = weights(k, &store, WtcForm::Literal);
            worst_mean = worst_mean.max((v.iter().sum::<f64>() / n as f64 - 1.0).abs());
        }
        let used: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        for k in StrategyKind::ALL {
            let p = sampling_distribution(k, &store, &used);
            assert!(p.iter().all(|&q| q >= 0.0));
            worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let passed = worst_mean < 1e-9 && worst_sum < 1e-9;
    report(
        9,
        "weight and sampling normalization",
        passed,
        &format!("max |mean(v)-1| = {worst_mean:.1e}, max |sum(P)-1| = {worst_sum:.1e} over 1000 states"),
    );
    assert!(passed);
}

// ---------------------------------------------------------------- CIFAR

#[test]
fn criterion_10_cifar10_logistic() {
    let name = "CIFAR-10 logistic regression (optional)";
    let Some(dir) = std::env::var_os("ACTIVE_BIAS_CIFAR10").map(PathBuf::from) else {
        return skip(10, name, "ACTIVE_BIAS_CIFAR10 not set");
    };
    let cfg = ExperimentConfig {
        data: DataConfig {
            source: DataSource::Cifar10 { dir },
            normalization: Normalization::Scale01,
            label_noise: 0.0,
        },
        model: ModelSpec::Softmax { l2: 0.0 },
        train: TrainConfig {
            batch_size: 100,
            learning_rate: 1e-6,
            lr_decay: 0.5,
            lr_decay_every: 5,
            epochs: 30,
            burn_in: 10,
            trials: 5,
            seed: 2017,
            history_window: None,
            wtc_form: WtcForm::Literal,
            reduction: Reduction::Sum,
        },
        run: RunConfig {
            strategies: vec![Uni, Scan, Spv, Wpv],
            output: PathBuf::from("unused"),
            parallel: 1,
        },
    };
    let data = match active_bias::experiment::prepare_data(&cfg.data, cfg.train.seed) {
        Ok(d) => d,
        Err(e) => return skip(10, name, &format!("cannot load data: {e}")),
    };
    let s = run_all(&cfg, &data);
    let m = |k| s.get(k).unwrap().best_test_mean;
    let targets = [(Uni, 62.49), (Scan, 62.48), (Spv, 60.66), (Wpv, 60.61)];
    let within = targets.iter().all(|&(k, t)| (m(k) - t).abs() <= 0.7);
    let beats = [Spv, Wpv].iter().all(|&b| m(Uni) - m(b) >= 1.0 && m(Scan) - m(b) >= 1.0);
    settle(
        10,
        name,
        within && beats,
        &describe(&s, |r| (r.best_test_mean, r.best_test_se)),
    );
}
