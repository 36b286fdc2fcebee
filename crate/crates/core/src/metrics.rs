//! Evaluation metrics over sampled answers.
//!
//! All functions here return fractions in `[0, 1]` except [`a2r_score`],
//! which reports a percentage like the tables it feeds.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{classify_votes, is_equivalent, CanonicalAnswer};

/// Seeded subsample trials for Cons@N when the pool is larger than N.
pub const DEFAULT_CONS_TRIALS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("k = {k} exceeds sample count n = {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("pool for {query_id} has {have} samples, need {need}")]
    PoolTooSmall {
        query_id: String,
        have: usize,
        need: usize,
    },
    #[error("query {query_id} has {have} runs, need {need}")]
    MissingRuns {
        query_id: String,
        have: usize,
        need: usize,
    },
    #[error("sample set for {0} is empty or has mismatched lengths")]
    InvalidSampleSet(String),
    #[error("no queries to score")]
    NoQueries,
}

/// Independent samples for one query with their verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub query_id: String,
    pub verdicts: Vec<bool>,
    pub answers: Vec<CanonicalAnswer>,
}

impl SampleSet {
    pub fn new(
        query_id: impl Into<String>,
        verdicts: Vec<bool>,
        answers: Vec<CanonicalAnswer>,
    ) -> Result<Self, MetricsError> {
        let query_id = query_id.into();
        if verdicts.is_empty() || verdicts.len() != answers.len() {
            return Err(MetricsError::InvalidSampleSet(query_id));
        }
        Ok(Self {
            query_id,
            verdicts,
            answers,
        })
    }

    /// Builds the set by grading `answers` against `gold`.
    pub fn graded(
        query_id: impl Into<String>,
        answers: Vec<CanonicalAnswer>,
        gold: &CanonicalAnswer,
    ) -> Result<Self, MetricsError> {
        let verdicts = answers
            .iter()
            .map(|a| !a.is_missing() && is_equivalent(a, gold))
            .collect();
        Self::new(query_id, verdicts, answers)
    }

    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn correct(&self) -> usize {
        self.verdicts.iter().filter(|&&v| v).count()
    }
}

pub fn pass_at_1(set: &SampleSet) -> f64 {
    set.correct() as f64 / set.len() as f64
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)`.
///
/// Evaluated as `1 - prod_{i=1..k} (n-c-k+i) / (n-k+i)`, which never forms
/// a binomial coefficient.
pub fn pass_at_k_counts(n: usize, c: usize, k: usize) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if k > n {
        return Err(MetricsError::KTooLarge { k, n });
    }
    let c = c.min(n);
    if k == 1 {
        // same value as the product, without the rounding of 1 - (n-c)/n
        return Ok(c as f64 / n as f64);
    }
    let wrong = n - c;
    if wrong < k {
        return Ok(1.0);
    }
    let miss = (1..=k).fold(1.0_f64, |acc, i| {
        acc * (wrong - k + i) as f64 / (n - k + i) as f64
    });
    Ok(1.0 - miss)
}

pub fn pass_at_k(set: &SampleSet, k: usize) -> Result<f64, MetricsError> {
    pass_at_k_counts(set.len(), set.correct(), k)
}

/// 1.0 if the majority class of `answers` matches `gold`.
pub fn majority_correct(answers: &[CanonicalAnswer], gold: &CanonicalAnswer) -> bool {
    classify_votes(answers)
        .ok()
        .and_then(|v| v.majority().map(|c| is_equivalent(&c.representative, gold)))
        .unwrap_or(false)
}

/// Majority-vote accuracy of `n` samples drawn from `pool`.
///
/// When the pool holds exactly `n` samples the vote is evaluated once.
/// Otherwise `trials` subsets are drawn without replacement from a ChaCha8
/// stream seeded with `seed`. Each subset keeps pool order, so ties go to
/// the answer that appears first in the pool.
pub fn cons_at_n(
    pool: &SampleSet,
    n: usize,
    gold: &CanonicalAnswer,
    trials: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroK);
    }
    if pool.len() < n {
        return Err(MetricsError::PoolTooSmall {
            query_id: pool.query_id.clone(),
            have: pool.len(),
            need: n,
        });
    }
    if pool.len() == n {
        return Ok(f64::from(u8::from(majority_correct(&pool.answers, gold))));
    }
    let trials = trials.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        let drawn: Vec<CanonicalAnswer> = idx.iter().map(|&i| pool.answers[i].clone()).collect();
        if majority_correct(&drawn, gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / trials as f64)
}

/// Mean verdict over queries, using the first `runs` verdicts of each query,
/// as a percentage. Every query carries equal weight.
pub fn a2r_score(verdicts_by_query: &BTreeMap<String, Vec<bool>>, runs: usize) -> Result<f64, MetricsError> {
    if verdicts_by_query.is_empty() {
        return Err(MetricsError::NoQueries);
    }
    if runs == 0 {
        return Err(MetricsError::ZeroK);
    }
    let mut total = 0.0;
    for (query_id, verdicts) in verdicts_by_query {
        if verdicts.len() < runs {
            return Err(MetricsError::MissingRuns {
                query_id: query_id.clone(),
                have: verdicts.len(),
                need: runs,
            });
        }
        let hits = verdicts[..runs].iter().filter(|&&v| v).count();
        total += hits as f64 / runs as f64;
    }
    Ok(100.0 * total / verdicts_by_query.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(verdicts: &[bool]) -> SampleSet {
        let answers = verdicts
            .iter()
            .map(|&v| CanonicalAnswer::parse(if v { "1" } else { "0" }))
            .collect();
        SampleSet::new("q", verdicts.to_vec(), answers).unwrap()
    }

    fn pool(answers: &[&str]) -> SampleSet {
        SampleSet::graded(
            "q",
            answers.iter().map(|a| CanonicalAnswer::parse(a)).collect(),
            &CanonicalAnswer::parse("5"),
        )
        .unwrap()
    }

    #[test]
    fn pass1_examples() {
        assert_eq!(pass_at_1(&set(&[true, true, false, false])), 0.5);
        assert_eq!(pass_at_1(&set(&[true; 3])), 1.0);
        assert_eq!(pass_at_1(&set(&[false; 3])), 0.0);
    }

    #[test]
    fn pass_k_examples() {
        assert_eq!(pass_at_k_counts(4, 4, 2).unwrap(), 1.0);
        assert_eq!(pass_at_k_counts(4, 0, 4).unwrap(), 0.0);
        // 1 - C(8,4)/C(16,4) = 1 - 70/1820
        assert!((pass_at_k_counts(16, 8, 4).unwrap() - (1.0 - 70.0 / 1820.0)).abs() < 1e-15);
        assert_eq!(
            pass_at_k_counts(3, 1, 4),
            Err(MetricsError::KTooLarge { k: 4, n: 3 })
        );
        assert_eq!(pass_at_k_counts(3, 1, 0), Err(MetricsError::ZeroK));
    }

    #[test]
    fn pass_k_large_n_stays_finite() {
        let v = pass_at_k_counts(10_000, 3, 5_000).unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn cons_examples() {
        let gold = CanonicalAnswer::parse("5");
        assert_eq!(cons_at_n(&pool(&["5", "5", "3", "9"]), 4, &gold, 10, 0).unwrap(), 1.0);
        assert_eq!(cons_at_n(&pool(&["5", "3", "5", "3"]), 4, &gold, 10, 0).unwrap(), 1.0);
        assert_eq!(cons_at_n(&pool(&["3", "5", "3", "5"]), 4, &gold, 10, 0).unwrap(), 0.0);
        let seven = CanonicalAnswer::parse("2");
        assert_eq!(cons_at_n(&pool(&["7", "7", "7"]), 3, &seven, 10, 0).unwrap(), 0.0);
        assert!(matches!(
            cons_at_n(&pool(&["7"]), 2, &gold, 10, 0),
            Err(MetricsError::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn cons_subsampling_is_seeded() {
        let gold = CanonicalAnswer::parse("5");
        let p = pool(&["5", "3", "5", "3", "3", "5", "9", "5"]);
        let a = cons_at_n(&p, 3, &gold, 200, 42).unwrap();
        let b = cons_at_n(&p, 3, &gold, 200, 42).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn a2r_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![true, true]);
        m.insert("b".to_string(), vec![true, false]);
        assert_eq!(a2r_score(&m, 2).unwrap(), 75.0);

        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![true, true]);
        assert_eq!(a2r_score(&m, 2).unwrap(), 100.0);

        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![false]);
        assert_eq!(a2r_score(&m, 1).unwrap(), 0.0);
        assert!(matches!(a2r_score(&m, 2), Err(MetricsError::MissingRuns { .. })));
    }
}
