use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use active_bias::analysis::{
    compare_variances, trace_identity, verify_suite, Design, DEFAULT_C,
};
use active_bias::data::{gen_toy2d, inject_label_noise, load_idx, IDX_LABELS_MAGIC};
use active_bias::emphasis::StrategyKind;
use active_bias::experiment::{run_experiment, ExperimentConfig};
use active_bias::models::BinaryLogReg;
use active_bias::trainer::{Reduction, TrainConfig, Trainer};
use active_bias::Error;
use anyhow::Context;
use clap::{Parser, Subcommand};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "active-bias", version, about = "SGD with history-driven sample emphasis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a multi-trial strategy comparison from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the number of concurrent trials.
        #[arg(long)]
        parallel: Option<usize>,
        /// Overrides the root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the Laplace analysis against its identities and a Monte-Carlo
    /// oracle.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also train on toy data and write a variance report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic or label-corrupted datasets.
    GenData {
        #[command(subcommand)]
        kind: GenKind,
    },
}

#[derive(Subcommand)]
enum GenKind {
    /// Two-cluster 2-D data with mirrored outliers, as CSV.
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        outlier_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a fraction of IDX labels; writes the new label file and a
    /// manifest of changed indices.
    Noise {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config problems map to exit code 2, everything else to 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, parallel: Option<usize>, seed: Option<u64>) -> anyhow::Result<bool> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(out) = out {
        cfg.run.output = out;
    }
    if let Some(p) = parallel {
        cfg.run.parallel = p;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let outcome = run_experiment(&cfg)?;
    println!(
        "{:<6} {:>6} {:>16} {:>16} {:>16}",
        "method", "trials", "best test", "last-10 test", "best train"
    );
    for r in &outcome.summary.rows {
        println!(
            "{:<6} {:>6} {:>8.3} ± {:<5.3} {:>8.3} ± {:<5.3} {:>8.3} ± {:<5.3}",
            r.strategy.token(),
            r.trials,
            r.best_test_mean,
            r.best_test_se,
            r.last10_test_mean,
            r.last10_test_se,
            r.best_train_mean,
            r.best_train_se
        );
    }
    println!("results in {}", cfg.run.output.display());
    for (k, t, e) in &outcome.failures {
        eprintln!("{k} trial {t} failed: {e}");
    }
    Ok(outcome.failures.is_empty())
}

fn verify(seed: u64, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let checks = verify_suite(seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        println!(
            "{} {}: {:.3e} (bound {:.3e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.bound
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(&dir)?;
        let data = gen_toy2d(seed, 50, 0.0)?;
        let cfg = TrainConfig {
            batch_size: 10,
            learning_rate: 0.01,
            lr_decay: 1.0,
            lr_decay_every: 1,
            epochs: 220,
            burn_in: 20,
            trials: 1,
            seed,
            history_window: None,
            wtc_form: Default::default(),
            reduction: Reduction::Sum,
        };
        let mut trainer = Trainer::new(cfg, StrategyKind::Scan, &data, BinaryLogReg::new(2, 0.0), seed)?;
        for _ in 0..220 {
            trainer.run_epoch()?;
        }
        let report = compare_variances(&data, trainer.store(), 20, 10.0, DEFAULT_C)?;
        report.write_csv(fs::File::create(dir.join("variance_report.csv"))?)?;
        let design = Design::from_dataset(&data, true)?;
        let w = active_bias::analysis::params_with_bias(trainer.model());
        let identity = trace_identity(&design, &w, 0.0)?;
        fs::write(dir.join("identity.json"), identity.to_json())?;
        println!(
            "variance report: spearman {:?}; identity residual {:.3e}; written to {}",
            report.spearman,
            identity.residual,
            dir.display()
        );
    }
    Ok(ok)
}

fn gen_data(kind: GenKind) -> anyhow::Result<bool> {
    match kind {
        GenKind::Toy {
            seed,
            n_per_class,
            outlier_frac,
            out,
        } => {
            let d = gen_toy2d(seed, n_per_class, outlier_frac)?;
            d.write_csv(fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?)?;
            println!("wrote {} samples to {}", d.len(), out.display());
        }
        GenKind::Noise {
            images,
            labels,
            frac,
            seed,
            out,
        } => {
            let d = load_idx(&images, &labels)?;
            let (noisy, manifest) = inject_label_noise(&d, frac, seed)?;
            fs::create_dir_all(&out)?;
            let mut bytes = Vec::with_capacity(8 + noisy.len());
            bytes.extend(IDX_LABELS_MAGIC.to_be_bytes());
            bytes.extend((noisy.len() as u32).to_be_bytes());
            bytes.extend(noisy.labels().iter().map(|&y| y as u8));
            let name = labels.file_name().map_or("labels-idx1-ubyte".into(), |n| n.to_os_string());
            fs::write(out.join(name), bytes)?;
            manifest.write_csv(fs::File::create(out.join("noise_manifest.csv"))?)?;
            println!("corrupted {} of {} labels into {}", manifest.indices.len(), noisy.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            parallel,
            seed,
        } => run(config, out, parallel, seed),
        Command::Verify { seed, out } => verify(seed, out),
        Command::GenData { kind } => gen_data(kind),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
