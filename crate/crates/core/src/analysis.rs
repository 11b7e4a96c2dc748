//! Laplace approximation for binary logistic regression.
//!
//! Labels are `±1` and `p(y | x, w) = σ(y wᵀx)`. The negative log posterior
//! under a `N(0, s0 I)` prior is
//! `Σ log(1 + exp(−y wᵀx)) + (c / s0)‖w‖²`.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::history::HistoryStore;
use crate::models::BinaryLogReg;
use crate::numerics::{spearman, Rng, StreamingStats};

/// Condition number above which a Hessian is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

pub const DEFAULT_C: f64 = 0.5;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-z))` without overflow.
fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Binary design: rows of `x` paired with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl Design {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidArgument(format!("label {bad} is not ±1")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix"));
        }
        Ok(Self { x, y })
    }

    /// Builds a design from a two-class dataset, class 1 mapping to `+1`.
    /// With `bias`, a constant 1 column is appended.
    pub fn from_dataset(data: &Dataset, bias: bool) -> Result<Self> {
        if data.n_classes() != 2 {
            return Err(Error::InvalidArgument(format!(
                "analysis needs 2 classes, dataset has {}",
                data.n_classes()
            )));
        }
        let d = data.dim() + usize::from(bias);
        let x = DMatrix::from_fn(data.len(), d, |r, c| {
            if c < data.dim() {
                data.features()[[r, c]]
            } else {
                1.0
            }
        });
        let y = data
            .labels()
            .iter()
            .map(|&l| if l == 1 { 1.0 } else { -1.0 })
            .collect();
        Self::new(x, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn check_w(&self, w: &DVector<f64>) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.dim(),
                got: w.len(),
            });
        }
        Ok(())
    }

    /// Correct-class probabilities `σ(y_i wᵀx_i)`.
    pub fn correct_probs(&self, w: &DVector<f64>) -> Vec<f64> {
        let z = &self.x * w;
        z.iter().zip(&self.y).map(|(z, y)| sigmoid(y * z)).collect()
    }

    pub fn objective(&self, w: &DVector<f64>, s0: f64, c: f64) -> f64 {
        let z = &self.x * w;
        let nll: f64 = z.iter().zip(&self.y).map(|(z, y)| log1p_exp_neg(y * z)).sum();
        nll + c / s0 * w.norm_squared()
    }

    pub fn gradient(&self, w: &DVector<f64>, s0: f64, c: f64) -> DVector<f64> {
        let z = &self.x * w;
        let r = DVector::from_iterator(
            self.len(),
            z.iter().zip(&self.y).map(|(z, y)| -y * sigmoid(-y * z)),
        );
        self.x.tr_mul(&r) + w * (2.0 * c / s0)
    }

    /// `Σ v_i p_i(1 − p_i) x_i x_iᵀ + prior I`.
    fn weighted_hessian(&self, w: &DVector<f64>, v: Option<&[f64]>, prior: f64) -> DMatrix<f64> {
        let p = self.correct_probs(w);
        let mut scaled = self.x.clone();
        for (r, mut row) in scaled.row_iter_mut().enumerate() {
            let vi = v.map_or(1.0, |v| v[r]);
            row *= vi * p[r] * (1.0 - p[r]);
        }
        let mut h = self.x.tr_mul(&scaled);
        for k in 0..self.dim() {
            h[(k, k)] += prior;
        }
        h
    }

    pub fn hessian(&self, w: &DVector<f64>, s0: f64, c: f64) -> DMatrix<f64> {
        self.weighted_hessian(w, None, 2.0 * c / s0)
    }
}

fn check_prior(s0: f64, c: f64) -> Result<()> {
    if !(s0 > 0.0 && c > 0.0 && s0.is_finite() && c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior scale and constant must be positive, got s0 = {s0}, c = {c}"
        )));
    }
    Ok(())
}

/// Inverts a symmetric positive definite matrix, refusing ill-conditioned
/// input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::Singular(cond));
    }
    let chol = Cholesky::new(m.clone()).ok_or(Error::Singular(hi / lo))?;
    let inv = chol.inverse();
    // Symmetrize away rounding so downstream checks see an exact transpose.
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Newton's method with backtracking on the negative log posterior.
pub fn fit_map(design: &Design, s0: f64, c: f64) -> Result<DVector<f64>> {
    const MAX_ITER: usize = 100;
    const TOL: f64 = 1e-8;
    check_prior(s0, c)?;
    let mut w = DVector::zeros(design.dim());
    let mut f = design.objective(&w, s0, c);
    let mut g = design.gradient(&w, s0, c);
    for _ in 0..MAX_ITER {
        if g.amax() < TOL {
            return Ok(w);
        }
        let h = design.hessian(&w, s0, c);
        let step = Cholesky::new(h)
            .map(|ch| ch.solve(&g))
            .unwrap_or_else(|| g.clone());
        let slope = g.dot(&step);
        // Near the optimum the decrease falls below what f can resolve;
        // the full Newton step is then safe and the line search is not.
        if slope < 1e-12 * (1.0 + f.abs()) {
            w -= &step;
            f = design.objective(&w, s0, c);
            g = design.gradient(&w, s0, c);
            continue;
        }
        let mut t = 1.0;
        loop {
            let cand = &w - &step * t;
            let fc = design.objective(&cand, s0, c);
            if fc <= f - 1e-4 * t * slope || t < 1e-12 {
                w = cand;
                f = fc;
                break;
            }
            t *= 0.5;
        }
        g = design.gradient(&w, s0, c);
    }
    if g.amax() < TOL {
        return Ok(w);
    }
    Err(Error::NotConverged {
        iterations: MAX_ITER,
        grad_norm: g.amax(),
    })
}

/// Posterior covariance `S_N`, optionally with per-sample weights on the
/// likelihood curvature.
pub fn laplace_covariance(
    w: &DVector<f64>,
    design: &Design,
    s0: f64,
    c: f64,
    v: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    check_prior(s0, c)?;
    design.check_w(w)?;
    if let Some(v) = v {
        if v.len() != design.len() {
            return Err(Error::DimensionMismatch {
                what: "sample weights",
                expected: design.len(),
                got: v.len(),
            });
        }
    }
    spd_inverse(&design.weighted_hessian(w, v, 2.0 * c / s0))
}

/// `p(1 − p) x` for the correct-class probability `p`.
pub fn prediction_gradient(x: &[f64], y: f64, w: &DVector<f64>) -> DVector<f64> {
    let xv = DVector::from_column_slice(x);
    let p = sigmoid(y * xv.dot(w));
    xv * (p * (1.0 - p))
}

/// First-order prediction variance `gᵀ S_N g`.
pub fn prediction_variance(x: &[f64], y: f64, w: &DVector<f64>, s_n: &DMatrix<f64>) -> f64 {
    let g = prediction_gradient(x, y, w);
    (g.transpose() * s_n * &g)[(0, 0)].max(0.0)
}

/// Outcome of the average-variance identity check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub residual: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub n: usize,
    pub dim: usize,
    pub n_t: f64,
    pub epsilon_t: f64,
    pub prior: &'static str,
}

impl IdentityCheck {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

/// Checks `Σ g_iᵀ S_N g_i = N_T · dim(w)` for threshold-closeness weights
/// `v_i = s_i / N_T + ε_T`, `s_i = p_i(1 − p_i)`, `N_T = mean(s) + ε_T`,
/// with no prior. Exact when `ε_T = 0`.
pub fn trace_identity(design: &Design, w: &DVector<f64>, epsilon_t: f64) -> Result<IdentityCheck> {
    design.check_w(w)?;
    if design.is_empty() {
        return Err(Error::Empty("trace identity needs samples"));
    }
    let p = design.correct_probs(w);
    let s: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
    let n_t = s.iter().sum::<f64>() / s.len() as f64 + epsilon_t;
    let v: Vec<f64> = s.iter().map(|s| s / n_t + epsilon_t).collect();
    let s_n = spd_inverse(&design.weighted_hessian(w, Some(&v), 0.0))?;
    let lhs: f64 = design
        .x
        .row_iter()
        .zip(&design.y)
        .map(|(row, &y)| {
            let x: Vec<f64> = row.iter().copied().collect();
            prediction_variance(&x, y, w, &s_n)
        })
        .sum();
    let rhs = n_t * design.dim() as f64;
    Ok(IdentityCheck {
        residual: (lhs - rhs).abs() / rhs,
        lhs,
        rhs,
        n: design.len(),
        dim: design.dim(),
        n_t,
        epsilon_t,
        prior: "none",
    })
}

pub fn trace_identity_residual(design: &Design, w: &DVector<f64>, epsilon_t: f64) -> Result<f64> {
    trace_identity(design, w, epsilon_t).map(|c| c.residual)
}

/// Variance of sample `i`'s filtered history restricted to epochs after
/// `burn_in`. Flagged insufficient unless the entries span at least two
/// epochs and two of them survive the filter.
pub fn empirical_prediction_variance(store: &HistoryStore, i: usize, burn_in: u32) -> crate::history::Estimate {
    let entries = &store.history(i).entries()[1..];
    let mut epochs = entries.iter().filter(|e| e.epoch > burn_in).map(|e| e.epoch);
    let span_ok = match epochs.next() {
        Some(first) => epochs.any(|e| e != first),
        None => false,
    };
    match store.stats_after_epoch(i, burn_in) {
        Some(stats) => {
            let mut est = stats.pred_variance();
            est.insufficient |= !span_ok;
            est
        }
        None => crate::history::Estimate {
            value: 0.0,
            insufficient: true,
        },
    }
}

/// Model parameters of a trained binary logistic model as `[w, b]`.
pub fn params_with_bias(model: &BinaryLogReg) -> DVector<f64> {
    let mut w = model.weights();
    w.push(model.bias());
    DVector::from_vec(w)
}

/// Sample variance of `p(y | x, w)` over `samples` draws of
/// `w ~ N(w_N, S_N)`, with the standard error of that variance estimate.
pub fn monte_carlo_prediction_variance(
    x: &[f64],
    y: f64,
    w: &DVector<f64>,
    s_n: &DMatrix<f64>,
    samples: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let l = Cholesky::new(s_n.clone()).ok_or(Error::Singular(f64::INFINITY))?.l();
    let xv = DVector::from_column_slice(x);
    let mut stats = StreamingStats::new();
    let mut values = Vec::with_capacity(samples);
    let mut z = DVector::zeros(w.len());
    for _ in 0..samples {
        z.iter_mut().for_each(|v| *v = rng.normal());
        let draw = w + &l * &z;
        let p = sigmoid(y * xv.dot(&draw));
        stats.push(p);
        values.push(p);
    }
    let mean = stats.mean();
    let var = stats.variance().unwrap_or(0.0);
    let m4 = values.iter().map(|p| (p - mean).powi(4)).sum::<f64>() / samples as f64;
    let se = ((m4 - var * var).max(0.0) / samples as f64).sqrt();
    Ok((var, se))
}

/// One line of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Labels drawn from a logistic model with `N(0, scale²)` true weights.
fn random_instance(rng: &mut Rng, n: usize, d: usize, scale: f64) -> Design {
    let w_true: Vec<f64> = (0..d).map(|_| rng.normal() * scale).collect();
    let x = DMatrix::from_fn(n, d, |_, _| rng.normal());
    let y = (0..n)
        .map(|r| {
            let z: f64 = (0..d).map(|c| x[(r, c)] * w_true[c]).sum();
            if rng.uniform() < sigmoid(z) { 1.0 } else { -1.0 }
        })
        .collect();
    Design { x, y }
}

/// Average-variance identity on 20 random instances and the Monte-Carlo
/// check of the first-order variance on 10 random 2-D instances.
pub fn verify_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    for k in 0..20 {
        let n = 30 + rng.below(171);
        let d = 2 + rng.below(9);
        let design = random_instance(&mut rng, n, d, 1.0);
        let w = DVector::from_fn(d, |_, _| rng.normal() * 0.5);
        let r = trace_identity_residual(&design, &w, 0.0)?;
        checks.push(Check {
            name: format!("identity[{k}] n={n} dim={d}"),
            value: r,
            bound: 1e-8,
            passed: r < 1e-8,
        });
    }
    for k in 0..10 {
        // Data-rich, weakly separated instances keep the posterior tight,
        // the regime where the first-order expansion is meant to hold.
        let design = random_instance(&mut rng, 2000, 2, 0.5);
        let w = fit_map(&design, 1.0, DEFAULT_C)?;
        let s_n = laplace_covariance(&w, &design, 1.0, DEFAULT_C, None)?;
        let x = [rng.normal(), rng.normal()];
        let lap = prediction_variance(&x, 1.0, &w, &s_n);
        let (mc, se) = monte_carlo_prediction_variance(&x, 1.0, &w, &s_n, 100_000, &mut rng)?;
        let bound = (0.05 * mc).max(3.0 * se);
        let diff = (lap - mc).abs();
        checks.push(Check {
            name: format!("monte-carlo[{k}] laplace={lap:.4e} mc={mc:.4e}"),
            value: diff,
            bound,
            passed: diff <= bound,
        });
    }
    Ok(checks)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub sample_id: usize,
    pub p_map: f64,
    pub laplace_variance: f64,
    /// Absent when the history is too short.
    pub empirical_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub rows: Vec<ReportRow>,
    /// Rank correlation over rows that have an empirical value.
    pub spearman: Option<f64>,
}

impl VarianceReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "p_map", "laplace_variance", "empirical_variance"])?;
        for r in &self.rows {
            w.write_record([
                r.sample_id.to_string(),
                r.p_map.to_string(),
                r.laplace_variance.to_string(),
                r.empirical_variance.map_or(String::new(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Laplace variance at the MAP fit next to the SGD-history variance of
/// every sample in `data`. The design gets a bias column.
pub fn compare_variances(
    data: &Dataset,
    store: &HistoryStore,
    burn_in: u32,
    s0: f64,
    c: f64,
) -> Result<VarianceReport> {
    let design = Design::from_dataset(data, true)?;
    if store.len() != design.len() {
        return Err(Error::DimensionMismatch {
            what: "history store",
            expected: design.len(),
            got: store.len(),
        });
    }
    let w = fit_map(&design, s0, c)?;
    let s_n = laplace_covariance(&w, &design, s0, c, None)?;
    let p = design.correct_probs(&w);
    let rows: Vec<ReportRow> = design
        .x
        .row_iter()
        .enumerate()
        .map(|(i, row)| {
            let x: Vec<f64> = row.iter().copied().collect();
            let emp = empirical_prediction_variance(store, i, burn_in);
            ReportRow {
                sample_id: i,
                p_map: p[i],
                laplace_variance: prediction_variance(&x, design.y[i], &w, &s_n),
                empirical_variance: (!emp.insufficient).then_some(emp.value),
            }
        })
        .collect();
    let (lap, emp): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.empirical_variance.map(|e| (r.laplace_variance, e)))
        .unzip();
    Ok(VarianceReport {
        spearman: spearman(&lap, &emp),
        rows,
    })
}
