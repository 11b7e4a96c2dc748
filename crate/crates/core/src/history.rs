//! Per-sample record of correct-class probabilities and the filtered
//! statistics every emphasis strategy reads.
//!
//! Each history starts from a seed entry of `1/|C|`. A new probability gets
//! a deviation `d = |p - mean(kept)|` against the entries kept at the time it
//! arrives. When statistics are read, an entry is kept iff its deviation is
//! at most twice the (lower) median of all stored deviations. The seed entry
//! carries no deviation and is always kept.

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::median_in_place;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub iteration: u64,
    pub epoch: u32,
    pub prob: f64,
    /// Zero for the seed entry, which never takes part in the median.
    pub deviation: f64,
}

/// A value that may be unavailable for lack of history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub insufficient: bool,
}

/// Statistics over the kept entries of one history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryStats {
    pub n_kept: usize,
    pub mean: f64,
    /// Unbiased variance of kept probabilities; 0 when fewer than 2 are kept.
    pub variance: f64,
}

impl HistoryStats {
    pub fn sufficient(&self) -> bool {
        self.n_kept >= 2
    }

    pub fn pred_variance(&self) -> Estimate {
        Estimate {
            value: self.variance,
            insufficient: !self.sufficient(),
        }
    }

    pub fn std_conf(&self) -> Estimate {
        if !self.sufficient() {
            return Estimate {
                value: 0.0,
                insufficient: true,
            };
        }
        Estimate {
            value: std_conf_from(self.variance, self.n_kept),
            insufficient: false,
        }
    }
}

/// Standard deviation widened by the spread of the variance estimate:
/// `sqrt(v + v^2 / (n - 1))`.
pub fn std_conf_from(variance: f64, n: usize) -> f64 {
    debug_assert!(n >= 2);
    (variance + variance * variance / (n - 1) as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct SampleHistory {
    entries: Vec<Entry>,
}

impl SampleHistory {
    fn seeded(seed_prob: f64) -> Self {
        Self {
            entries: vec![Entry {
                iteration: 0,
                epoch: 0,
                prob: seed_prob,
                deviation: 0.0,
            }],
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn threshold(&self, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.extend(self.entries[1..].iter().map(|e| e.deviation));
        if scratch.is_empty() {
            f64::INFINITY
        } else {
            2.0 * median_in_place(scratch)
        }
    }

    /// Kept flag per entry under the current threshold.
    pub fn kept_flags(&self) -> Vec<bool> {
        let threshold = self.threshold(&mut Vec::new());
        self.entries
            .iter()
            .enumerate()
            .map(|(j, e)| j == 0 || e.deviation <= threshold)
            .collect()
    }

    fn kept_mean(&self, scratch: &mut Vec<f64>) -> f64 {
        let threshold = self.threshold(scratch);
        let (sum, n) = self
            .entries
            .iter()
            .enumerate()
            .filter(|(j, e)| *j == 0 || e.deviation <= threshold)
            .fold((0.0, 0usize), |(s, n), (_, e)| (s + e.prob, n + 1));
        sum / n as f64
    }

    fn stats(&self, scratch: &mut Vec<f64>) -> HistoryStats {
        let threshold = self.threshold(scratch);
        let kept = || {
            self.entries
                .iter()
                .enumerate()
                .filter(move |(j, e)| *j == 0 || e.deviation <= threshold)
                .map(|(_, e)| e.prob)
        };
        let n_kept = kept().count();
        let mean = kept().sum::<f64>() / n_kept as f64;
        let variance = if n_kept >= 2 {
            kept().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n_kept - 1) as f64
        } else {
            0.0
        };
        HistoryStats {
            n_kept,
            mean,
            variance,
        }
    }

    fn push(&mut self, prob: f64, iteration: u64, epoch: u32, scratch: &mut Vec<f64>) {
        let deviation = (prob - self.kept_mean(scratch)).abs();
        self.entries.push(Entry {
            iteration,
            epoch,
            prob,
            deviation,
        });
    }
}

/// Replays the filtering rule from scratch on a probability sequence: the
/// first value acts as the always-kept anchor.
pub fn replay_stats(anchor: f64, probs: impl IntoIterator<Item = f64>) -> HistoryStats {
    let mut h = SampleHistory::seeded(anchor);
    let mut scratch = Vec::new();
    for (k, p) in probs.into_iter().enumerate() {
        h.push(p, k as u64 + 1, 0, &mut scratch);
    }
    h.stats(&mut scratch)
}

/// All per-sample histories of one training run.
#[derive(Debug, Clone)]
pub struct HistoryStore {
    n_classes: usize,
    histories: Vec<SampleHistory>,
    stats: Vec<HistoryStats>,
    window: Option<u32>,
    epoch: u32,
    scratch: Vec<f64>,
}

impl HistoryStore {
    pub fn new(n_samples: usize, n_classes: usize) -> Self {
        Self::build(n_samples, n_classes, None)
    }

    /// Statistics only see entries from the latest `window_epochs` epochs.
    pub fn with_window(n_samples: usize, n_classes: usize, window_epochs: u32) -> Self {
        Self::build(n_samples, n_classes, Some(window_epochs.max(1)))
    }

    fn build(n_samples: usize, n_classes: usize, window: Option<u32>) -> Self {
        let seed = 1.0 / n_classes as f64;
        let seed_stats = HistoryStats {
            n_kept: 1,
            mean: seed,
            variance: 0.0,
        };
        Self {
            n_classes,
            histories: vec![SampleHistory::seeded(seed); n_samples],
            stats: vec![seed_stats; n_samples],
            window,
            epoch: 0,
            scratch: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.histories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn window(&self) -> Option<u32> {
        self.window
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Marks the start of a new epoch. In window mode, entries older than the
    /// horizon are dropped and statistics refreshed.
    pub fn begin_epoch(&mut self, epoch: u32) {
        self.epoch = epoch;
        let Some(w) = self.window else { return };
        let oldest = epoch.saturating_sub(w - 1);
        for i in 0..self.histories.len() {
            let h = &mut self.histories[i];
            let before = h.entries.len();
            h.entries.retain(|e| e.iteration == 0 || e.epoch >= oldest);
            if h.entries.len() != before {
                self.refresh_windowed(i);
            }
        }
    }

    fn refresh_windowed(&mut self, i: usize) {
        let seed = 1.0 / self.n_classes as f64;
        let probs = self.histories[i].entries[1..].iter().map(|e| e.prob);
        self.stats[i] = replay_stats(seed, probs);
    }

    /// Appends `prob` for sample `i` at iteration `t` of the current epoch.
    pub fn record(&mut self, i: usize, prob: f64, t: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::ProbabilityOutOfRange(prob));
        }
        let h = &mut self.histories[i];
        let last = h.entries.last().map_or(0, |e| e.iteration);
        // Sampling with replacement may draw a sample twice in one iteration.
        if t < last {
            return Err(Error::NonIncreasingIteration { last, got: t });
        }
        if self.window.is_some() {
            h.entries.push(Entry {
                iteration: t,
                epoch: self.epoch,
                prob,
                deviation: 0.0,
            });
            self.refresh_windowed(i);
        } else {
            h.push(prob, t, self.epoch, &mut self.scratch);
            self.stats[i] = h.stats(&mut self.scratch);
        }
        Ok(())
    }

    pub fn history(&self, i: usize) -> &SampleHistory {
        &self.histories[i]
    }

    pub fn stats(&self, i: usize) -> &HistoryStats {
        &self.stats[i]
    }

    #[cfg(test)]
    pub(crate) fn override_stats(&mut self, i: usize, stats: HistoryStats) {
        self.stats[i] = stats;
    }

    pub fn all_stats(&self) -> &[HistoryStats] {
        &self.stats
    }

    pub fn mean_prob(&self, i: usize) -> f64 {
        self.stats[i].mean
    }

    pub fn pred_variance(&self, i: usize) -> Estimate {
        self.stats[i].pred_variance()
    }

    pub fn std_conf(&self, i: usize) -> Estimate {
        self.stats[i].std_conf()
    }

    /// Filtered statistics of the entries recorded in epochs after
    /// `after_epoch`, replayed with the first such entry as anchor. `None`
    /// when no entry qualifies.
    pub fn stats_after_epoch(&self, i: usize, after_epoch: u32) -> Option<HistoryStats> {
        let mut probs = self.histories[i].entries[1..]
            .iter()
            .filter(|e| e.epoch > after_epoch)
            .map(|e| e.prob);
        let anchor = probs.next()?;
        Some(replay_stats(anchor, probs))
    }

    /// Diagnostic dump: `sample_id,n_kept,mean_prob,variance,std_conf`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample_id", "n_kept", "mean_prob", "variance", "std_conf"])?;
        for (i, s) in self.stats.iter().enumerate() {
            w.write_record(&[
                i.to_string(),
                s.n_kept.to_string(),
                s.mean.to_string(),
                s.variance.to_string(),
                s.std_conf().value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
