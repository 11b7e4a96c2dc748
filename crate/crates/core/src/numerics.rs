//! Seeded randomness, categorical sampling, softmax and small statistics
//! helpers shared by the rest of the crate.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Reproducible random stream. ChaCha8 gives the same sequence on every
/// platform for a given seed.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// `k` distinct indices from `0..n`, order randomized.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// SplitMix64 finalizer; used to fan a root seed out into independent
/// per-trial streams.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derived from a root seed and a path of integer labels.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(root), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stable 64-bit hash of a string (FNV-1a), for seed derivation.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax on a row that is already known to be finite.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_distribution(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidDistribution("empty probability vector".into()));
    }
    let mut total = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!("bad mass {p}")));
        }
        total += p;
    }
    if total <= 0.0 {
        return Err(Error::InvalidDistribution("zero total mass".into()));
    }
    Ok(total)
}

/// Single categorical draw by cumulative-sum inversion.
pub fn sample_categorical(rng: &mut Rng, probs: &[f64]) -> Result<usize> {
    let total = check_distribution(probs)?;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "probabilities sum to {total}"
        )));
    }
    Ok(CumulativeTable::from_unchecked(probs, total).draw(rng))
}

/// Cumulative table over a fixed distribution, rebuilt whenever the
/// distribution changes and then reused for a batch of draws.
#[derive(Debug, Clone)]
pub struct CumulativeTable {
    cumulative: Vec<f64>,
}

impl CumulativeTable {
    /// Accepts unnormalized nonnegative mass.
    pub fn new(mass: &[f64]) -> Result<Self> {
        let total = check_distribution(mass)?;
        Ok(Self::from_unchecked(mass, total))
    }

    fn from_unchecked(mass: &[f64], total: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = mass
            .iter()
            .map(|&m| {
                acc += m / total;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn draw(&self, rng: &mut Rng) -> usize {
        let u = rng.uniform() * self.cumulative[self.cumulative.len() - 1];
        // first index whose cumulative mass exceeds u; zero-mass bins are never hit
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cumulative.len() - 1)
    }
}

/// Lower median: for even length the smaller of the two middle values.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of empty list"));
    }
    let mut buf = values.to_vec();
    Ok(median_in_place(&mut buf))
}

/// Lower median that reorders `buf`. Panics on empty input.
pub(crate) fn median_in_place(buf: &mut [f64]) -> f64 {
    let k = (buf.len() - 1) / 2;
    let (_, m, _) = buf.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *m
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StreamingStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl StreamingStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased variance; `None` below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| (self.m2 / (self.count - 1) as f64).max(0.0))
    }

    /// Combine two disjoint streams (Chan et al. pairwise update).
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Self { count, mean, m2 }
    }
}

impl FromIterator<f64> for StreamingStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Mean and standard error of the mean (n-1 denominator; 0 for n = 1).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let stats: StreamingStats = values.iter().copied().collect();
    let se = stats
        .variance()
        .map(|v| (v / stats.count() as f64).sqrt())
        .unwrap_or(0.0);
    (stats.mean(), se)
}

/// Ranks starting at 1, ties receive their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side has no spread.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            for p in softmax(&[c, c, c, c]).unwrap() {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
        // e^k / (e + e^2 + e^3), evaluated independently
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for ((g, e), r) in got.iter().zip(expected).zip([0.09003, 0.24473, 0.66524]) {
            assert!((g - e).abs() < 1e-15);
            assert!((g - r).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn degenerate_categorical() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            assert_eq!(sample_categorical(&mut rng, &[0.0, 1.0, 0.0]).unwrap(), 1);
        }
    }

    #[test]
    fn categorical_errors() {
        let mut rng = Rng::new(1);
        assert!(sample_categorical(&mut rng, &[0.0, 0.0]).is_err());
        assert!(sample_categorical(&mut rng, &[-0.5, 1.5]).is_err());
        assert!(sample_categorical(&mut rng, &[0.2, 0.2]).is_err());
        assert!(CumulativeTable::new(&[]).is_err());
    }

    #[test]
    fn categorical_uniform_frequencies() {
        let n = 7;
        let draws = 100_000;
        let probs = vec![1.0 / n as f64; n];
        let mut rng = Rng::new(42);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[sample_categorical(&mut rng, &probs).unwrap()] += 1;
        }
        let p = 1.0 / n as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 4.0 * sigma);
        }
    }

    #[test]
    fn categorical_is_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            (0..200)
                .map(|_| sample_categorical(&mut rng, &[0.3, 0.7]).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn categorical_total_variation() {
        let mass = [0.05, 0.2, 0.01, 0.14, 0.1, 0.1, 0.03, 0.17, 0.12, 0.08];
        let table = CumulativeTable::new(&mass).unwrap();
        let mut rng = Rng::new(5);
        let draws = 1_000_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[table.draw(&mut rng)] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(mass)
            .map(|(&c, p)| (c as f64 / draws as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv = {tv}");
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0]).unwrap(), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn stderr_of_three() {
        let (m, se) = mean_and_stderr(&[2.0, 2.2, 2.4]);
        assert!((m - 2.2).abs() < 1e-12);
        assert!((se - 0.11547).abs() < 1e-5);
        assert_eq!(mean_and_stderr(&[1.5]), (1.5, 0.0));
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 40.0, 90.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }

    fn two_pass_variance(xs: &[f64]) -> f64 {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            xs in prop::collection::vec(-30.0f64..30.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&xs).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn streaming_matches_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let s: StreamingStats = xs.iter().copied().collect();
            let v = two_pass_variance(&xs);
            prop_assert!((s.variance().unwrap() - v).abs() <= 1e-10 * v.abs().max(1e-300) + 1e-12);
        }

        #[test]
        fn streaming_merge_is_concatenation(
            a in prop::collection::vec(-10.0f64..10.0, 0..50),
            b in prop::collection::vec(-10.0f64..10.0, 0..50),
        ) {
            let sa: StreamingStats = a.iter().copied().collect();
            let sb: StreamingStats = b.iter().copied().collect();
            let all: StreamingStats = a.iter().chain(&b).copied().collect();
            let merged = sa.merge(&sb);
            prop_assert_eq!(merged.count(), all.count());
            prop_assert!((merged.mean() - all.mean()).abs() < 1e-10);
            match (merged.variance(), all.variance()) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn lower_median_matches_sort(xs in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let mut sorted = xs.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            prop_assert_eq!(median(&xs).unwrap(), sorted[(sorted.len() - 1) / 2]);
        }
    }
}
