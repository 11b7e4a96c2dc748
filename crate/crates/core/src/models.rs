//! Classifiers trained with a per-sample weighted cross-entropy:
//! `L = Σ v_i · CE_i + λ Σ ‖W‖²` over the weight matrices (biases are not
//! regularized).

use std::io::{BufRead, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Rng};

/// Named parameter (or gradient) arrays, row-major, biases stored as 1×k.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Array2<f64>)>) -> Self {
        let (names, arrays) = entries.into_iter().unzip();
        Self { names, arrays }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            names: other.names.clone(),
            arrays: other
                .arrays
                .iter()
                .map(|a| Array2::zeros(a.raw_dim()))
                .collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn arrays(&self) -> &[Array2<f64>] {
        &self.arrays
    }

    pub fn array(&self, k: usize) -> &Array2<f64> {
        &self.arrays[k]
    }

    pub fn array_mut(&mut self, k: usize) -> &mut Array2<f64> {
        &mut self.arrays[k]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut k: usize) -> (usize, usize, usize) {
        for (j, a) in self.arrays.iter().enumerate() {
            if k < a.len() {
                let cols = a.ncols();
                return (j, k / cols, k % cols);
            }
            k -= a.len();
        }
        panic!("parameter index out of range");
    }

    /// Scalar at flat index `k` (arrays concatenated in order, row-major).
    pub fn get(&self, k: usize) -> f64 {
        let (j, r, c) = self.locate(k);
        self.arrays[j][[r, c]]
    }

    pub fn set(&mut self, k: usize, value: f64) {
        let (j, r, c) = self.locate(k);
        self.arrays[j][[r, c]] = value;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays.iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.arrays {
            a.mapv_inplace(|x| x * alpha);
        }
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.arrays
            .iter()
            .zip(&other.arrays)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Output of one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub grad: ParamSet,
    /// Weighted loss including the regularizer.
    pub loss: f64,
    /// Class probabilities of each batch row, before the update.
    pub probs: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Post-activation outputs of the hidden layers.
    pub hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

pub trait Model: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// Regularization scale λ.
    fn l2(&self) -> f64;
    /// Indices into `params()` of the arrays that are L2-regularized.
    fn regularized(&self) -> Vec<usize>;
    fn forward_batch(&self, x: ArrayView2<f64>) -> Forward;
    /// Gradient of `Σ_i Σ_c dlogits[i,c] · logits[i,c]` w.r.t. parameters.
    fn backward(&self, x: ArrayView2<f64>, fwd: &Forward, dlogits: Array2<f64>) -> ParamSet;
    fn kind_name(&self) -> &'static str;

    fn check_batch(&self, x: ArrayView2<f64>, labels: &[usize], v: &[f64]) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        if labels.len() != x.nrows() || v.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                what: "batch labels/weights",
                expected: x.nrows(),
                got: labels.len().min(v.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// Class probabilities for every row.
    fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut p = self.forward_batch(x).logits;
        for mut row in p.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        p
    }

    /// Class probabilities for one feature vector.
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "features",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let view = ArrayView2::from_shape((1, x.len()), x).expect("shape");
        Ok(self.predict(view).row(0).to_vec())
    }

    fn regularizer(&self) -> f64 {
        let lambda = self.l2();
        if lambda == 0.0 {
            return 0.0;
        }
        let p = self.params();
        lambda
            * self
                .regularized()
                .into_iter()
                .map(|k| p.array(k).iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    fn weighted_loss(&self, x: ArrayView2<f64>, labels: &[usize], v: &[f64]) -> Result<f64> {
        self.check_batch(x, labels, v)?;
        let fwd = self.forward_batch(x);
        let ce: f64 = fwd
            .logits
            .rows()
            .into_iter()
            .zip(labels)
            .zip(v)
            .map(|((z, &y), &w)| w * cross_entropy(z.as_slice().expect("contiguous"), y))
            .sum();
        Ok(ce + self.regularizer())
    }

    fn weighted_grad(&self, x: ArrayView2<f64>, labels: &[usize], v: &[f64]) -> Result<BatchGrad> {
        self.check_batch(x, labels, v)?;
        let fwd = self.forward_batch(x);
        let mut loss = 0.0;
        let mut probs = fwd.logits.clone();
        for ((mut row, &y), &w) in probs.rows_mut().into_iter().zip(labels).zip(v) {
            let z = row.as_slice_mut().expect("contiguous");
            loss += w * cross_entropy(z, y);
            softmax_in_place(z);
        }
        let mut dlogits = probs.clone();
        for ((mut row, &y), &w) in dlogits.rows_mut().into_iter().zip(labels).zip(v) {
            row[y] -= 1.0;
            row.mapv_inplace(|g| g * w);
        }
        let mut grad = self.backward(x, &fwd, dlogits);
        let lambda = self.l2();
        if lambda != 0.0 {
            for k in self.regularized() {
                grad.array_mut(k)
                    .scaled_add(2.0 * lambda, self.params().array(k));
            }
        }
        Ok(BatchGrad {
            grad,
            loss: loss + self.regularizer(),
            probs,
        })
    }

    /// Plain SGD step `W <- W - lr * grad`.
    fn apply_update(&mut self, grad: &ParamSet, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.params_mut().axpy(-learning_rate, grad);
        Ok(())
    }
}

/// `-log softmax(z)[y]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

fn add_bias(z: &mut Array2<f64>, b: &Array2<f64>) {
    *z += &b.row(0);
}

/// Two-class logistic regression `p(y|x) = σ(y (wᵀx + b))`, `y ∈ {-1, +1}`.
/// Class index 1 maps to `+1`, index 0 to `-1`; internally the logits are
/// `[0, wᵀx + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryLogReg {
    params: ParamSet,
    l2: f64,
}

impl BinaryLogReg {
    pub fn new(input_dim: usize, l2: f64) -> Self {
        Self {
            params: ParamSet::new(vec![
                ("w".into(), Array2::zeros((input_dim, 1))),
                ("b".into(), Array2::zeros((1, 1))),
            ]),
            l2,
        }
    }

    pub fn from_weights(w: &[f64], b: f64, l2: f64) -> Self {
        let mut m = Self::new(w.len(), l2);
        m.params.array_mut(0).column_mut(0).assign(&Array1::from(w.to_vec()));
        m.params.array_mut(1)[[0, 0]] = b;
        m
    }

    pub fn weights(&self) -> Vec<f64> {
        self.params.array(0).column(0).to_vec()
    }

    pub fn bias(&self) -> f64 {
        self.params.array(1)[[0, 0]]
    }
}

impl Model for BinaryLogReg {
    fn input_dim(&self) -> usize {
        self.params.array(0).nrows()
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn l2(&self) -> f64 {
        self.l2
    }
    fn regularized(&self) -> Vec<usize> {
        vec![0]
    }
    fn kind_name(&self) -> &'static str {
        "binary-logistic"
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Forward {
        let mut z = x.dot(self.params.array(0));
        add_bias(&mut z, self.params.array(1));
        let mut logits = Array2::zeros((x.nrows(), 2));
        logits.slice_mut(s![.., 1..2]).assign(&z);
        Forward {
            hidden: Vec::new(),
            logits,
        }
    }

    fn backward(&self, x: ArrayView2<f64>, _fwd: &Forward, dlogits: Array2<f64>) -> ParamSet {
        let dz = dlogits.slice(s![.., 1..2]).to_owned();
        let gw = x.t().dot(&dz);
        let gb = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
        ParamSet::new(vec![("w".into(), gw), ("b".into(), gb)])
    }
}

/// Multiclass (softmax) logistic regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    params: ParamSet,
    l2: f64,
}

impl SoftmaxRegression {
    pub fn new(input_dim: usize, num_classes: usize, l2: f64) -> Self {
        Self {
            params: ParamSet::new(vec![
                ("W".into(), Array2::zeros((input_dim, num_classes))),
                ("b".into(), Array2::zeros((1, num_classes))),
            ]),
            l2,
        }
    }
}

impl Model for SoftmaxRegression {
    fn input_dim(&self) -> usize {
        self.params.array(0).nrows()
    }
    fn num_classes(&self) -> usize {
        self.params.array(0).ncols()
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn l2(&self) -> f64 {
        self.l2
    }
    fn regularized(&self) -> Vec<usize> {
        vec![0]
    }
    fn kind_name(&self) -> &'static str {
        "softmax"
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Forward {
        let mut logits = x.dot(self.params.array(0));
        add_bias(&mut logits, self.params.array(1));
        Forward {
            hidden: Vec::new(),
            logits,
        }
    }

    fn backward(&self, x: ArrayView2<f64>, _fwd: &Forward, dlogits: Array2<f64>) -> ParamSet {
        let gw = x.t().dot(&dlogits);
        let gb = dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
        ParamSet::new(vec![("W".into(), gw), ("b".into(), gb)])
    }
}

/// Fully connected network: ReLU hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct FcNet {
    params: ParamSet,
    l2: f64,
}

impl FcNet {
    /// `sizes` = `[input, hidden..., classes]`. Weights are drawn from
    /// `U(±sqrt(6 / (fan_in + fan_out)))`, biases start at zero.
    pub fn new(sizes: &[usize], l2: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "bad layer sizes {sizes:?}"
            )));
        }
        let mut entries = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.uniform_range(-limit, limit));
            entries.push((format!("W{l}"), w));
            entries.push((format!("b{l}"), Array2::zeros((1, fan_out))));
        }
        Ok(Self {
            params: ParamSet::new(entries),
            l2,
        })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.weights().map(|w| w.ncols()));
        sizes
    }

    fn weights(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.params.arrays().iter().step_by(2)
    }

    fn n_layers(&self) -> usize {
        self.params.arrays().len() / 2
    }
}

impl Model for FcNet {
    fn input_dim(&self) -> usize {
        self.params.array(0).nrows()
    }
    fn num_classes(&self) -> usize {
        self.params.array(self.params.arrays().len() - 2).ncols()
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn l2(&self) -> f64 {
        self.l2
    }
    fn regularized(&self) -> Vec<usize> {
        (0..self.n_layers()).map(|l| 2 * l).collect()
    }
    fn kind_name(&self) -> &'static str {
        "fc"
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Forward {
        let n = self.n_layers();
        let mut hidden = Vec::with_capacity(n - 1);
        let mut z = x.dot(self.params.array(0));
        add_bias(&mut z, self.params.array(1));
        for l in 1..n {
            z.mapv_inplace(|a| a.max(0.0));
            let mut next = z.dot(self.params.array(2 * l));
            add_bias(&mut next, self.params.array(2 * l + 1));
            hidden.push(z);
            z = next;
        }
        Forward { hidden, logits: z }
    }

    fn backward(&self, x: ArrayView2<f64>, fwd: &Forward, dlogits: Array2<f64>) -> ParamSet {
        let n = self.n_layers();
        let mut grads: Vec<Option<(Array2<f64>, Array2<f64>)>> = vec![None; n];
        let mut delta = dlogits;
        for l in (0..n).rev() {
            let input = if l == 0 { x } else { fwd.hidden[l - 1].view() };
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0)).insert_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.params.array(2 * l).t());
                Zip::from(&mut back)
                    .and(&fwd.hidden[l - 1])
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = back;
            }
            grads[l] = Some((gw, gb));
        }
        let mut entries = Vec::with_capacity(2 * n);
        for (l, g) in grads.into_iter().enumerate() {
            let (gw, gb) = g.expect("every layer visited");
            entries.push((format!("W{l}"), gw));
            entries.push((format!("b{l}"), gb));
        }
        ParamSet::new(entries)
    }
}

/// Architecture choice as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    BinaryLogistic {
        #[serde(default)]
        l2: f64,
    },
    Softmax {
        #[serde(default)]
        l2: f64,
    },
    Fc {
        hidden: Vec<usize>,
        #[serde(default)]
        l2: f64,
    },
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<AnyModel> {
        Ok(match self {
            ModelSpec::BinaryLogistic { l2 } => {
                if num_classes != 2 {
                    return Err(Error::Config(format!(
                        "binary-logistic needs 2 classes, dataset has {num_classes}"
                    )));
                }
                AnyModel::Binary(BinaryLogReg::new(input_dim, *l2))
            }
            ModelSpec::Softmax { l2 } => {
                AnyModel::Softmax(SoftmaxRegression::new(input_dim, num_classes, *l2))
            }
            ModelSpec::Fc { hidden, l2 } => {
                let mut sizes = vec![input_dim];
                sizes.extend(hidden);
                sizes.push(num_classes);
                AnyModel::Fc(FcNet::new(&sizes, *l2, rng)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Binary(BinaryLogReg),
    Softmax(SoftmaxRegression),
    Fc(FcNet),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            AnyModel::Binary($m) => $e,
            AnyModel::Softmax($m) => $e,
            AnyModel::Fc($m) => $e,
        }
    };
}

impl Model for AnyModel {
    fn input_dim(&self) -> usize {
        delegate!(self, m => m.input_dim())
    }
    fn num_classes(&self) -> usize {
        delegate!(self, m => m.num_classes())
    }
    fn params(&self) -> &ParamSet {
        delegate!(self, m => m.params())
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        delegate!(self, m => m.params_mut())
    }
    fn l2(&self) -> f64 {
        delegate!(self, m => m.l2())
    }
    fn regularized(&self) -> Vec<usize> {
        delegate!(self, m => m.regularized())
    }
    fn forward_batch(&self, x: ArrayView2<f64>) -> Forward {
        delegate!(self, m => m.forward_batch(x))
    }
    fn backward(&self, x: ArrayView2<f64>, fwd: &Forward, dlogits: Array2<f64>) -> ParamSet {
        delegate!(self, m => m.backward(x, fwd, dlogits))
    }
    fn kind_name(&self) -> &'static str {
        delegate!(self, m => m.kind_name())
    }
}

const CHECKPOINT_MAGIC: &str = "active-bias-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters as text:
///
/// ```text
/// active-bias-checkpoint 1
/// model <kind>
/// arrays <count>
/// <name> <rows> <cols>
/// <rows lines of cols space-separated values>
/// ...
/// ```
///
/// Values use Rust's shortest round-trip float formatting, so reading the
/// file back reproduces every bit.
pub fn write_checkpoint<W: Write>(model: &impl Model, mut out: W) -> Result<()> {
    let p = model.params();
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(out, "model {}", model.kind_name())?;
    writeln!(out, "arrays {}", p.arrays().len())?;
    for (name, a) in p.names().iter().zip(p.arrays()) {
        writeln!(out, "{name} {} {}", a.nrows(), a.ncols())?;
        for row in a.rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

/// Reads a checkpoint back into `(model kind, parameters)`.
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(String, ParamSet)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(Error::from)
    };
    let header = next()?;
    let mut it = header.split_whitespace();
    if it.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad("missing header"));
    }
    let version: u32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = next()?
        .strip_prefix("model ")
        .ok_or_else(|| bad("missing model line"))?
        .to_string();
    let count: usize = next()?
        .strip_prefix("arrays ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad("missing array count"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let head = next()?;
        let parts: Vec<&str> = head.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(bad("bad array header"));
        };
        let rows: usize = rows.parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = cols.parse().map_err(|_| bad("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = next()?;
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| bad("bad value"))?);
            }
        }
        let a = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| bad("row length does not match header"))?;
        entries.push((name.to_string(), a));
    }
    Ok((kind, ParamSet::new(entries)))
}
