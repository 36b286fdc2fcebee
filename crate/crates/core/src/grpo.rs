//! Group-relative policy objective for training the synthesizer, as pure math
//! over supplied log-probabilities.
//!
//! For a group of `G` responses to one prompt with rewards `R_i`:
//!
//! ```text
//! A_i     = (R_i - mean(R)) / std(R)              population std, same for every token of i
//! r_{i,t} = exp(logp_new - logp_old)
//! term    = min(r * A_i, clip(r, 1 - eps, 1 + eps) * A_i)
//! J       = sum of all terms / total token count
//! ```
//!
//! Groups whose rewards are all equal carry no signal and are rejected by
//! [`dynamic_sampling_filter`]. There is no KL term.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::answer::{is_equivalent, CanonicalAnswer};
use crate::pipeline::{Query, ReasoningPath};

/// Default symmetric clip threshold.
pub const DEFAULT_CLIP_EPSILON: f64 = 0.2;

/// Upper bound on explorer candidates kept per query for curation.
pub const MAX_CANDIDATES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("all rewards in the group are equal; advantages are undefined")]
    DegenerateGroup,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("query {query_id} has {valid} valid candidates, need {needed}")]
    TooFewCandidates {
        query_id: String,
        valid: usize,
        needed: usize,
    },
    #[error("train_batch_size {train} != mini_batch_size {mini}; updates would be off-policy")]
    OffPolicyPlan { train: usize, mini: usize },
}

/// Per-token log-probabilities of one response under the current and old policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.logp_new.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp_new.is_empty()
    }
}

/// `G` responses to one (query, reference) prompt with their rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    #[serde(default)]
    pub query_context: String,
    pub rewards: Vec<f64>,
    pub responses: Vec<TokenSequence>,
}

impl GroupBatch {
    pub fn new(
        query_context: impl Into<String>,
        rewards: Vec<f64>,
        responses: Vec<TokenSequence>,
    ) -> Result<Self, GrpoError> {
        let batch = Self {
            query_context: query_context.into(),
            rewards,
            responses,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn from_json_str(text: &str) -> Result<Self, GrpoError> {
        let batch: Self =
            serde_json::from_str(text).map_err(|e| GrpoError::InvalidBatch(e.to_string()))?;
        batch.validate()?;
        Ok(batch)
    }

    pub fn group_size(&self) -> usize {
        self.rewards.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.responses.iter().map(TokenSequence::len).sum()
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.rewards.len() < 2 {
            return Err(GrpoError::InvalidBatch("group size must be at least 2".into()));
        }
        if self.rewards.len() != self.responses.len() {
            return Err(GrpoError::LengthMismatch(format!(
                "{} rewards for {} responses",
                self.rewards.len(),
                self.responses.len()
            )));
        }
        if let Some(r) = self.rewards.iter().find(|&&r| r != 0.0 && r != 1.0) {
            return Err(GrpoError::InvalidBatch(format!("reward {r} is not binary")));
        }
        for (i, seq) in self.responses.iter().enumerate() {
            if seq.logp_new.len() != seq.logp_old.len() {
                return Err(GrpoError::LengthMismatch(format!(
                    "response {i}: {} new vs {} old log-probs",
                    seq.logp_new.len(),
                    seq.logp_old.len()
                )));
            }
            if seq.logp_new.iter().chain(&seq.logp_old).any(|&lp| lp.is_nan() || lp > 0.0) {
                return Err(GrpoError::InvalidBatch(format!(
                    "response {i} has a log-prob above zero or NaN"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self, GrpoError> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(GrpoError::InvalidConfig(format!("epsilon {epsilon} outside (0, 1)")));
        }
        Ok(Self { epsilon })
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_CLIP_EPSILON,
        }
    }
}

/// Linear overlong penalty: 0 up to `soft_limit`, ramping to -1 at `hard_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthPenaltyConfig {
    pub soft_limit: usize,
    pub hard_limit: usize,
    pub enabled: bool,
}

impl LengthPenaltyConfig {
    pub fn new(soft_limit: usize, hard_limit: usize, enabled: bool) -> Result<Self, GrpoError> {
        if soft_limit >= hard_limit {
            return Err(GrpoError::InvalidConfig(format!(
                "soft_limit {soft_limit} must be below hard_limit {hard_limit}"
            )));
        }
        Ok(Self {
            soft_limit,
            hard_limit,
            enabled,
        })
    }
}

impl Default for LengthPenaltyConfig {
    fn default() -> Self {
        Self {
            soft_limit: 7_168,
            hard_limit: 8_192,
            enabled: false,
        }
    }
}

pub fn binary_reward(predicted: &CanonicalAnswer, gold: &CanonicalAnswer) -> f64 {
    if is_equivalent(predicted, gold) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingDecision {
    Accept,
    Reject,
}

/// Keeps only groups with at least one correct and one incorrect response.
pub fn dynamic_sampling_filter(batch: &GroupBatch) -> SamplingDecision {
    let first = batch.rewards.first().copied();
    if batch.rewards.iter().all(|&r| Some(r) == first) {
        SamplingDecision::Reject
    } else {
        SamplingDecision::Accept
    }
}

/// `(R_i - mean) / std` with the population standard deviation.
pub fn standardized_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    let Some(&first) = rewards.first() else {
        return Err(GrpoError::DegenerateGroup);
    };
    if rewards.iter().all(|&r| r == first) {
        return Err(GrpoError::DegenerateGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Penalty added to the reward of a response with `length` tokens.
pub fn length_penalty(length: usize, cfg: &LengthPenaltyConfig) -> f64 {
    if !cfg.enabled || length <= cfg.soft_limit {
        return 0.0;
    }
    if length >= cfg.hard_limit {
        return -1.0;
    }
    -((length - cfg.soft_limit) as f64 / (cfg.hard_limit - cfg.soft_limit) as f64)
}

/// Rewards after the length penalty, ready for standardization.
pub fn shaped_rewards(batch: &GroupBatch, cfg: &LengthPenaltyConfig) -> Vec<f64> {
    batch
        .rewards
        .iter()
        .zip(&batch.responses)
        .map(|(r, seq)| r + length_penalty(seq.len(), cfg))
        .collect()
}

/// Clipped surrogate for one token.
pub fn token_term(logp_new: f64, logp_old: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`token_term`] with respect to `logp_new`: `r * A` where
/// the unclipped branch is the minimum, 0 where the clipped branch wins.
pub fn token_term_grad(logp_new: f64, logp_old: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let ratio = (logp_new - logp_old).exp();
    let clipped = ratio.clamp(1.0 - clip.epsilon, 1.0 + clip.epsilon);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub per_token: Vec<Vec<f64>>,
}

/// Token-level objective: every token of the group weighs the same.
pub fn token_objective(
    batch: &GroupBatch,
    advantages: &[f64],
    clip: &ClipConfig,
) -> Result<ObjectiveValue, GrpoError> {
    if advantages.len() != batch.responses.len() {
        return Err(GrpoError::LengthMismatch(format!(
            "{} advantages for {} responses",
            advantages.len(),
            batch.responses.len()
        )));
    }
    let mut per_token = Vec::with_capacity(batch.responses.len());
    let mut sum = 0.0;
    for (i, (seq, &adv)) in batch.responses.iter().zip(advantages).enumerate() {
        if seq.logp_new.len() != seq.logp_old.len() {
            return Err(GrpoError::LengthMismatch(format!("response {i}")));
        }
        let terms: Vec<f64> = seq
            .logp_new
            .iter()
            .zip(&seq.logp_old)
            .map(|(&new, &old)| token_term(new, old, adv, clip))
            .collect();
        sum += terms.iter().sum::<f64>();
        per_token.push(terms);
    }
    let tokens = batch.total_tokens();
    let value = if tokens == 0 { 0.0 } else { sum / tokens as f64 };
    Ok(ObjectiveValue { value, per_token })
}

/// Batch sizes handed to an external trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub train_batch_size: usize,
    pub mini_batch_size: usize,
}

impl BatchPlan {
    pub fn on_policy(batch_size: usize) -> Self {
        Self {
            train_batch_size: batch_size,
            mini_batch_size: batch_size,
        }
    }

    /// Only plans with one gradient step per rollout batch are accepted.
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.train_batch_size == 0 || self.train_batch_size != self.mini_batch_size {
            return Err(GrpoError::OffPolicyPlan {
                train: self.train_batch_size,
                mini: self.mini_batch_size,
            });
        }
        Ok(())
    }
}

/// Settings written next to curated records for the trainer that consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerPlan {
    pub batch: BatchPlan,
    pub clip: ClipConfig,
    pub temperature: f64,
    pub max_sequence_length: usize,
    pub length_penalty: LengthPenaltyConfig,
    pub n_references: usize,
}

impl TrainerPlan {
    pub fn new(n_references: usize) -> Self {
        Self {
            batch: BatchPlan::on_policy(32),
            clip: ClipConfig::default(),
            temperature: crate::gateway::DEFAULT_TEMPERATURE,
            max_sequence_length: 8_192,
            length_penalty: LengthPenaltyConfig::default(),
            n_references,
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        self.batch.validate()?;
        ClipConfig::new(self.clip.epsilon)?;
        LengthPenaltyConfig::new(
            self.length_penalty.soft_limit,
            self.length_penalty.hard_limit,
            self.length_penalty.enabled,
        )?;
        Ok(())
    }
}

/// Explorer candidates collected for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRollouts {
    pub query_id: String,
    pub question: String,
    pub gold_answer: String,
    pub candidates: Vec<String>,
}

impl QueryRollouts {
    /// Keeps the answer components of paths that produced output.
    pub fn from_paths<'a>(query: &Query, paths: impl IntoIterator<Item = &'a ReasoningPath>) -> Self {
        Self {
            query_id: query.id.clone(),
            question: query.question.clone(),
            gold_answer: query.gold_answer.canonical.clone(),
            candidates: paths
                .into_iter()
                .filter(|p| !p.is_failed() && !p.answer_component.trim().is_empty())
                .map(|p| p.answer_component.clone())
                .collect(),
        }
    }
}

/// One line of the training-record file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub query_id: String,
    pub question: String,
    pub reference_blocks: Vec<String>,
    pub gold_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurateConfig {
    pub n_paths: usize,
    pub records_per_query: usize,
    pub max_candidates: usize,
    pub seed: u64,
}

impl CurateConfig {
    pub fn new(n_paths: usize, records_per_query: usize, seed: u64) -> Self {
        Self {
            n_paths,
            records_per_query,
            max_candidates: MAX_CANDIDATES,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Curation {
    pub records: Vec<TrainingRecord>,
    /// Queries without enough candidates, as `TooFewCandidates` errors.
    pub skipped: Vec<GrpoError>,
}

fn query_rng(seed: u64, query_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Builds training records from explorer rollouts.
///
/// Each record uses `n_paths` candidates drawn without replacement and placed
/// in random order. Records for one query are distinct orderings where
/// possible. The stream for a query depends only on `seed` and its id.
pub fn curate_training_records(rollouts: &[QueryRollouts], cfg: &CurateConfig) -> Result<Curation, GrpoError> {
    if cfg.n_paths == 0 || cfg.records_per_query == 0 {
        return Err(GrpoError::InvalidConfig(
            "n_paths and records_per_query must be positive".into(),
        ));
    }
    let mut out = Curation::default();
    for rollout in rollouts {
        let pool: Vec<&String> = rollout.candidates.iter().take(cfg.max_candidates).collect();
        if pool.len() < cfg.n_paths {
            out.skipped.push(GrpoError::TooFewCandidates {
                query_id: rollout.query_id.clone(),
                valid: pool.len(),
                needed: cfg.n_paths,
            });
            continue;
        }
        let mut rng = query_rng(cfg.seed, &rollout.query_id);
        let mut seen: HashSet<Vec<usize>> = HashSet::new();
        for _ in 0..cfg.records_per_query {
            let mut pick = Vec::new();
            for _ in 0..64 {
                pick = rand::seq::index::sample(&mut rng, pool.len(), cfg.n_paths).into_vec();
                pick.shuffle(&mut rng);
                if !seen.contains(&pick) {
                    break;
                }
            }
            seen.insert(pick.clone());
            out.records.push(TrainingRecord {
                query_id: rollout.query_id.clone(),
                question: rollout.question.clone(),
                reference_blocks: pick.iter().map(|&i| pool[i].clone()).collect(),
                gold_answer: rollout.gold_answer.clone(),
            });
        }
    }
    Ok(out)
}
