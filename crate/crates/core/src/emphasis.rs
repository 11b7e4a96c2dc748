//! Strategies that turn history statistics into a sampling distribution
//! and/or per-sample loss weights.
//!
//! Every strategy works from a raw score per sample (difficulty `1 - p̄`,
//! easiness `p̄`, confidence-widened prediction std, or threshold closeness
//! `p̄(1 - p̄)`). The smoothing constant is the current mean raw score over
//! the whole training set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::history::{HistoryStats, HistoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Uni,
    Scan,
    Sd,
    Wd,
    Isd,
    Se,
    We,
    Spv,
    Wpv,
    Stc,
    Wtc,
}

/// How a strategy picks the samples of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// With replacement, uniform over the whole set.
    Uniform,
    /// Without replacement, each sample once per epoch.
    Scan,
    /// With replacement, proportional to `score + ε`.
    Scored,
}

/// Which statistic of the history a strategy scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Score {
    Constant,
    Difficulty,
    Easiness,
    PredictionStd,
    ThresholdCloseness,
}

/// Weight form for the threshold-closeness weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WtcForm {
    /// `v = score / N_T + ε` with `N_T = mean(score) + ε`.
    #[default]
    Literal,
    /// `v = (score + ε) / mean(score + ε)`, same as the other weightings.
    UnitMean,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 11] = [
        StrategyKind::Uni,
        StrategyKind::Scan,
        StrategyKind::Sd,
        StrategyKind::Wd,
        StrategyKind::Isd,
        StrategyKind::Se,
        StrategyKind::We,
        StrategyKind::Spv,
        StrategyKind::Wpv,
        StrategyKind::Stc,
        StrategyKind::Wtc,
    ];

    pub fn token(self) -> &'static str {
        match self {
            StrategyKind::Uni => "uni",
            StrategyKind::Scan => "scan",
            StrategyKind::Sd => "sd",
            StrategyKind::Wd => "wd",
            StrategyKind::Isd => "isd",
            StrategyKind::Se => "se",
            StrategyKind::We => "we",
            StrategyKind::Spv => "spv",
            StrategyKind::Wpv => "wpv",
            StrategyKind::Stc => "stc",
            StrategyKind::Wtc => "wtc",
        }
    }

    pub fn selection(self) -> Selection {
        use StrategyKind::*;
        match self {
            Uni => Selection::Uniform,
            Scan | Wd | We | Wpv | Wtc => Selection::Scan,
            Sd | Isd | Se | Spv | Stc => Selection::Scored,
        }
    }

    pub fn score(self) -> Score {
        use StrategyKind::*;
        match self {
            Uni | Scan => Score::Constant,
            Sd | Wd | Isd => Score::Difficulty,
            Se | We => Score::Easiness,
            Spv | Wpv => Score::PredictionStd,
            Stc | Wtc => Score::ThresholdCloseness,
        }
    }

    pub fn alters_weights(self) -> bool {
        use StrategyKind::*;
        matches!(self, Wd | We | Wpv | Wtc | Isd)
    }

    pub fn uses_history(self) -> bool {
        self.score() != Score::Constant
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.token().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

pub fn raw_score_from(kind: StrategyKind, stats: &HistoryStats) -> f64 {
    let p = stats.mean;
    match kind.score() {
        Score::Constant => 1.0,
        Score::Difficulty => 1.0 - p,
        Score::Easiness => p,
        Score::PredictionStd => stats.std_conf().value,
        Score::ThresholdCloseness => p * (1.0 - p),
    }
}

pub fn raw_score(kind: StrategyKind, store: &HistoryStore, i: usize) -> f64 {
    raw_score_from(kind, store.stats(i))
}

/// Scores, smoothing constant and normalizer for one iteration.
#[derive(Debug, Clone)]
pub struct EmphasisState {
    kind: StrategyKind,
    wtc_form: WtcForm,
    scores: Vec<f64>,
    epsilon: f64,
    /// `mean(score + ε)`; for the literal threshold-closeness weights this is
    /// also `N_T = mean(score) + ε`.
    normalizer: f64,
}

impl EmphasisState {
    pub fn compute(kind: StrategyKind, store: &HistoryStore, wtc_form: WtcForm) -> Self {
        let scores: Vec<f64> = store
            .all_stats()
            .iter()
            .map(|s| raw_score_from(kind, s))
            .collect();
        Self::from_scores(kind, scores, wtc_form)
    }

    pub fn from_scores(kind: StrategyKind, scores: Vec<f64>, wtc_form: WtcForm) -> Self {
        let n = scores.len().max(1) as f64;
        let epsilon = scores.iter().sum::<f64>() / n;
        Self {
            kind,
            wtc_form,
            scores,
            epsilon,
            normalizer: 2.0 * epsilon,
        }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// True when every raw score is zero, so no emphasis can be expressed.
    fn degenerate(&self) -> bool {
        self.normalizer <= 0.0
    }

    /// Unnormalized selection mass `score + ε`, uniform when degenerate.
    pub fn sampling_mass(&self) -> Vec<f64> {
        if self.degenerate() {
            return vec![1.0; self.scores.len()];
        }
        self.scores.iter().map(|s| s + self.epsilon).collect()
    }

    pub fn weight(&self, i: usize) -> f64 {
        use StrategyKind::*;
        if self.degenerate() {
            return 1.0;
        }
        let s = self.scores[i];
        match self.kind {
            Wd | We | Wpv => (s + self.epsilon) / self.normalizer,
            Wtc => match self.wtc_form {
                WtcForm::Literal => s / self.normalizer + self.epsilon,
                WtcForm::UnitMean => (s + self.epsilon) / self.normalizer,
            },
            Isd => self.normalizer / (s + self.epsilon),
            Uni | Scan | Sd | Se | Spv | Stc => 1.0,
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.scores.len()).map(|i| self.weight(i)).collect()
    }
}

/// Selection probabilities over the training set. `scan_used[i]` marks
/// samples already visited this epoch; only Scan looks at it.
pub fn sampling_distribution(
    kind: StrategyKind,
    store: &HistoryStore,
    scan_used: &[bool],
) -> Vec<f64> {
    let n = store.len();
    match kind.selection() {
        Selection::Uniform => vec![1.0 / n as f64; n],
        Selection::Scan => {
            let remaining = scan_used.iter().filter(|&&u| !u).count();
            if remaining == 0 {
                return vec![1.0 / n as f64; n];
            }
            scan_used
                .iter()
                .map(|&u| if u { 0.0 } else { 1.0 / remaining as f64 })
                .collect()
        }
        Selection::Scored => {
            let mass = EmphasisState::compute(kind, store, WtcForm::Literal).sampling_mass();
            let total: f64 = mass.iter().sum();
            mass.into_iter().map(|m| m / total).collect()
        }
    }
}

pub fn weights(kind: StrategyKind, store: &HistoryStore, wtc_form: WtcForm) -> Vec<f64> {
    if !kind.alters_weights() {
        return vec![1.0; store.len()];
    }
    EmphasisState::compute(kind, store, wtc_form).weights()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store_with_means(means: &[f64]) -> HistoryStore {
        let mut s = HistoryStore::new(means.len(), 2);
        for (i, &m) in means.iter().enumerate() {
            s.override_stats(
                i,
                HistoryStats {
                    n_kept: 4,
                    mean: m,
                    variance: m * (1.0 - m) / 3.0,
                },
            );
        }
        s
    }

    #[test]
    fn parses_tokens() {
        for k in StrategyKind::ALL {
            assert_eq!(k.token().parse::<StrategyKind>().unwrap(), k);
        }
        assert_eq!("WPV".parse::<StrategyKind>().unwrap(), StrategyKind::Wpv);
        assert!("sgd".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn raw_score_examples() {
        let st = |p: f64| HistoryStats {
            n_kept: 3,
            mean: p,
            variance: 0.0,
        };
        assert_eq!(raw_score_from(StrategyKind::Stc, &st(0.5)), 0.25);
        assert_eq!(raw_score_from(StrategyKind::Sd, &st(1.0)), 0.0);
        assert_eq!(raw_score_from(StrategyKind::Se, &st(1.0)), 1.0);
        assert!((raw_score_from(StrategyKind::Stc, &st(0.9)) - 0.09).abs() < 1e-12);
        assert_eq!(raw_score_from(StrategyKind::Scan, &st(0.3)), 1.0);
        let v = HistoryStats {
            n_kept: 5,
            mean: 0.5,
            variance: 0.04,
        };
        assert!((raw_score_from(StrategyKind::Wpv, &v) - 0.0404f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn difficulty_sampling_example() {
        let st = EmphasisState::from_scores(StrategyKind::Sd, vec![0.1, 0.5], WtcForm::Literal);
        assert!((st.epsilon() - 0.3).abs() < 1e-15);
        let mass = st.sampling_mass();
        assert!((mass[0] - 0.4).abs() < 1e-15 && (mass[1] - 0.8).abs() < 1e-15);
        let store = store_with_means(&[0.9, 0.5]);
        let p = sampling_distribution(StrategyKind::Sd, &store, &[false, false]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scan_mask() {
        let store = HistoryStore::new(3, 2);
        let p = sampling_distribution(StrategyKind::Scan, &store, &[true, false, false]);
        assert_eq!(p, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn identical_histories_give_uniform() {
        let store = store_with_means(&[0.7; 4]);
        for k in StrategyKind::ALL {
            let p = sampling_distribution(k, &store, &[false; 4]);
            for x in p {
                assert!((x - 0.25).abs() < 1e-12, "{k}");
            }
        }
        let w = weights(StrategyKind::Wd, &store, WtcForm::Literal);
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn importance_weights_cancel() {
        let store = store_with_means(&[0.2, 0.95]);
        let p = sampling_distribution(StrategyKind::Isd, &store, &[false; 2]);
        let v = weights(StrategyKind::Isd, &store, WtcForm::Literal);
        assert!((p[0] * v[0] - p[1] * v[1]).abs() < 1e-12);
        // constant equals 1/|D|
        assert!((p[0] * v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn literal_threshold_closeness_weights() {
        // p̄ = [0.5, 0.9]: scores [0.25, 0.09], ε = 0.17, N_T = 0.34
        let st = EmphasisState::from_scores(StrategyKind::Wtc, vec![0.25, 0.09], WtcForm::Literal);
        let expected = [0.25 / 0.34 + 0.17, 0.09 / 0.34 + 0.17];
        for (i, e) in expected.iter().enumerate() {
            assert!((st.weight(i) - e).abs() < 1e-12);
        }
        assert!((st.weight(0) - 0.905).abs() < 1e-3);
        assert!((st.weight(1) - 0.435).abs() < 1e-3);
        // the literal form does not have unit mean: mean(s)/N_T + ε
        let mean: f64 = (st.weight(0) + st.weight(1)) / 2.0;
        assert!((mean - (0.17 / 0.34 + 0.17)).abs() < 1e-12);

        let unit = EmphasisState::from_scores(StrategyKind::Wtc, vec![0.25, 0.09], WtcForm::UnitMean);
        assert!(((unit.weight(0) + unit.weight(1)) / 2.0 - 1.0).abs() < 1e-12);
        assert!((unit.weight(0) - 0.42 / 0.34).abs() < 1e-12);
    }

    #[test]
    fn all_zero_scores_fall_back() {
        let st = EmphasisState::from_scores(StrategyKind::Sd, vec![0.0; 3], WtcForm::Literal);
        assert_eq!(st.sampling_mass(), vec![1.0; 3]);
        for k in [StrategyKind::Wd, StrategyKind::Isd, StrategyKind::Wtc] {
            let st = EmphasisState::from_scores(k, vec![0.0; 3], WtcForm::Literal);
            assert_eq!(st.weights(), vec![1.0; 3]);
        }
    }

    #[test]
    fn unweighted_kinds_leave_weights_alone() {
        let store = store_with_means(&[0.1, 0.6, 0.99]);
        for k in [
            StrategyKind::Uni,
            StrategyKind::Scan,
            StrategyKind::Sd,
            StrategyKind::Se,
            StrategyKind::Spv,
            StrategyKind::Stc,
        ] {
            assert_eq!(weights(k, &store, WtcForm::Literal), vec![1.0; 3]);
        }
    }

    proptest! {
        #[test]
        fn unit_mean_and_normalized(means in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let store = store_with_means(&means);
            let n = means.len();
            for k in StrategyKind::ALL {
                let p = sampling_distribution(k, &store, &vec![false; n]);
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            for k in [StrategyKind::Wd, StrategyKind::We, StrategyKind::Wpv] {
                let v = weights(k, &store, WtcForm::Literal);
                prop_assert!((v.iter().sum::<f64>() / n as f64 - 1.0).abs() < 1e-9);
            }
            let p = sampling_distribution(StrategyKind::Isd, &store, &vec![false; n]);
            let v = weights(StrategyKind::Isd, &store, WtcForm::Literal);
            let c = p[0] * v[0];
            for (a, b) in p.iter().zip(&v) {
                prop_assert!((a * b - c).abs() < 1e-9);
            }
        }

        #[test]
        fn monotone_in_mean(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0) {
            let store = store_with_means(&[a, b, c]);
            let sd = sampling_distribution(StrategyKind::Sd, &store, &[false; 3]);
            let se = sampling_distribution(StrategyKind::Se, &store, &[false; 3]);
            let stc = sampling_distribution(StrategyKind::Stc, &store, &[false; 3]);
            let (ma, mb) = (store.mean_prob(0), store.mean_prob(1));
            if ma < mb {
                prop_assert!(sd[0] >= sd[1] - 1e-12);
                prop_assert!(se[0] <= se[1] + 1e-12);
            }
            if (ma - 0.5).abs() < (mb - 0.5).abs() {
                prop_assert!(stc[0] >= stc[1] - 1e-12);
            }
        }
    }
}
