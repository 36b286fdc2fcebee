//! The two-stage procedure: explorer fan-out, reference context, synthesis.
//!
//! The explorer samples `n_paths` independent solutions. Only the answer
//! segment of each (the text after the reasoning block) goes into the
//! reference context. The second stage is an [`Aggregator`] chosen by name:
//! `"a2r"` asks the synthesizer to re-solve with the references in view,
//! `"majority"` is the plain self-consistency vote with no second call.

mod prompt;
mod strategy;

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{extract_answer, is_equivalent, CanonicalAnswer, RawCompletion};
use crate::gateway::{
    ChatMessage, CompletionRequest, CompletionResult, Gateway, GatewayError, SampleKey, Stage,
    TokenUsage,
};

pub use prompt::{
    build_reference, build_reference_with_budget, compose_explorer_prompt,
    compose_synthesizer_prompt, template_fingerprint, ReferenceContext, DEFAULT_CONTEXT_BUDGET,
    EXPLORER_INSTRUCTION, SYNTHESIZER_INSTRUCTION,
};
pub use strategy::{
    default_strategies, AggregateContext, Aggregation, Aggregator, MajorityVote, StrategyRegistry,
    Synthesize,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no reasoning paths")]
    EmptyPaths,
    #[error("path at position {position} has index {index}")]
    UnorderedPaths { position: usize, index: usize },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("n_paths must be at least 1")]
    NoPathsRequested,
    #[error("every explorer sample failed for query {query_id}: {first_error}")]
    AllPathsFailed {
        query_id: String,
        first_error: String,
    },
    #[error("synthesizer failed: {source}")]
    SynthesizerFailed {
        /// Explorer paths, kept for salvage reporting.
        paths: Vec<ReasoningPath>,
        source: GatewayError,
    },
    #[error("strategy '{0}' needs a synthesizer endpoint")]
    MissingSynthesizer(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("dataset line {line}: {message}")]
pub struct DatasetError {
    /// 1-based line number, 0 when the file itself could not be read.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub question: String,
    pub gold_answer: CanonicalAnswer,
}

impl Query {
    pub fn new(id: impl Into<String>, question: impl Into<String>, gold: &str) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            gold_answer: CanonicalAnswer::parse(gold),
        }
    }
}

#[derive(Debug, Deserialize)]
struct DatasetLine {
    id: String,
    question: String,
    answer: serde_json::Value,
}

/// Parses a JSONL dataset of `{id, question, answer}` lines.
pub fn parse_dataset(text: &str) -> Result<Vec<Query>, DatasetError> {
    let mut seen = HashSet::new();
    let mut queries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| DatasetError {
            line: line_no,
            message,
        };
        let rec: DatasetLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let answer = match rec.answer {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(err(format!("answer must be a string or number, got {other}"))),
        };
        if rec.question.trim().is_empty() {
            return Err(err("question is empty".into()));
        }
        if answer.trim().is_empty() {
            return Err(err("answer is empty".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id '{}'", rec.id)));
        }
        queries.push(Query::new(rec.id, rec.question, &answer));
    }
    Ok(queries)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Query>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    parse_dataset(&text)
}

/// One explorer sample: reasoning trace plus answer component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub index: usize,
    pub seed: u64,
    pub trace: String,
    pub answer_component: String,
    pub canonical: CanonicalAnswer,
    pub usage: TokenUsage,
    /// Set when the sample failed permanently; the answer is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReasoningPath {
    pub fn from_completion(index: usize, seed: u64, result: &CompletionResult) -> Self {
        let completion = &result.completion;
        let canonical = extract_answer(completion).unwrap_or_else(|_| CanonicalAnswer::missing());
        Self {
            index,
            seed,
            trace: completion.think_segment().unwrap_or_default().to_string(),
            answer_component: completion.answer_segment().to_string(),
            canonical,
            usage: result.usage,
            error: None,
        }
    }

    pub fn failed(index: usize, seed: u64, error: &GatewayError) -> Self {
        Self {
            index,
            seed,
            trace: String::new(),
            answer_component: String::new(),
            canonical: CanonicalAnswer::missing(),
            usage: TokenUsage::default(),
            error: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTokens {
    pub explorer: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesizer: Option<TokenUsage>,
}

/// Everything recorded for one (query, run) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A2ROutcome {
    pub query_id: String,
    pub question: String,
    pub gold_answer: CanonicalAnswer,
    pub run: usize,
    pub strategy: String,
    pub paths: Vec<ReasoningPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesis: Option<RawCompletion>,
    pub final_answer: CanonicalAnswer,
    pub verdict: bool,
    pub stage_usage: StageTokens,
}

impl A2ROutcome {
    pub fn path_verdicts(&self) -> Vec<bool> {
        self.paths
            .iter()
            .map(|p| !p.is_failed() && is_equivalent(&p.canonical, &self.gold_answer))
            .collect()
    }

    pub fn path_answers(&self) -> Vec<CanonicalAnswer> {
        self.paths.iter().map(|p| p.canonical.clone()).collect()
    }
}

/// Sample index of path `i` in run `run`; also the mock script key.
pub fn explorer_sample_index(run: usize, n_paths: usize, i: usize) -> u64 {
    (run * n_paths + i) as u64
}

/// Samples `n_paths` explorer solutions. Sample `i` uses index
/// `sample_offset + i` and seed `base_seed + sample_offset + i`.
pub async fn run_explorer(
    query: &Query,
    explorer: &Gateway,
    n_paths: usize,
    base_seed: u64,
    sample_offset: u64,
) -> Result<Vec<ReasoningPath>, PipelineError> {
    if n_paths == 0 {
        return Err(PipelineError::NoPathsRequested);
    }
    let prompt = compose_explorer_prompt(&query.question)?;
    let requests: Vec<CompletionRequest> = (0..n_paths as u64)
        .map(|i| {
            let sample_index = sample_offset + i;
            CompletionRequest {
                messages: vec![ChatMessage::user(prompt.clone())],
                seed: base_seed.wrapping_add(sample_index),
                key: SampleKey::new(query.id.clone(), sample_index, Stage::Explorer),
            }
        })
        .collect();

    let results = explorer.complete_many(&requests).await?;
    let mut first_error = None;
    let paths: Vec<ReasoningPath> = results
        .iter()
        .zip(&requests)
        .enumerate()
        .map(|(i, (result, req))| match result {
            Ok(r) => ReasoningPath::from_completion(i, req.seed, r),
            Err(e) => {
                tracing::warn!(key = %req.key, error = %e, "explorer sample failed");
                first_error.get_or_insert_with(|| e.to_string());
                ReasoningPath::failed(i, req.seed, e)
            }
        })
        .collect();

    if paths.iter().all(ReasoningPath::is_failed) {
        return Err(PipelineError::AllPathsFailed {
            query_id: query.id.clone(),
            first_error: first_error.unwrap_or_default(),
        });
    }
    Ok(paths)
}

/// Explorer gateway, optional synthesizer gateway and second-stage strategy.
#[derive(Clone)]
pub struct Pipeline {
    pub explorer: Gateway,
    pub synthesizer: Option<Gateway>,
    pub strategy: Arc<dyn Aggregator>,
    pub n_paths: usize,
    pub context_budget: usize,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("strategy", &self.strategy.name())
            .field("n_paths", &self.n_paths)
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        explorer: Gateway,
        synthesizer: Option<Gateway>,
        strategy: Arc<dyn Aggregator>,
        n_paths: usize,
    ) -> Result<Self, PipelineError> {
        if n_paths == 0 {
            return Err(PipelineError::NoPathsRequested);
        }
        if strategy.needs_synthesizer() && synthesizer.is_none() {
            return Err(PipelineError::MissingSynthesizer(strategy.name().to_string()));
        }
        Ok(Self {
            explorer,
            synthesizer,
            strategy,
            n_paths,
            context_budget: DEFAULT_CONTEXT_BUDGET,
        })
    }

    /// Runs both stages for one query in run `run`.
    pub async fn run_query(
        &self,
        query: &Query,
        run: usize,
        base_seed: u64,
    ) -> Result<A2ROutcome, PipelineError> {
        let offset = explorer_sample_index(run, self.n_paths, 0);
        let paths = run_explorer(query, &self.explorer, self.n_paths, base_seed, offset).await?;
        let explorer_usage: TokenUsage = paths.iter().map(|p| p.usage).sum();

        let ctx = AggregateContext {
            synthesizer: self.synthesizer.as_ref(),
            run,
            seed: base_seed.wrapping_add(run as u64),
            context_budget: self.context_budget,
        };
        let agg = match self.strategy.aggregate(query, &paths, &ctx).await {
            Ok(a) => a,
            Err(PipelineError::Gateway(source)) => {
                return Err(PipelineError::SynthesizerFailed { paths, source })
            }
            Err(e) => return Err(e),
        };

        let verdict = is_equivalent(&agg.final_answer, &query.gold_answer);
        Ok(A2ROutcome {
            query_id: query.id.clone(),
            question: query.question.clone(),
            gold_answer: query.gold_answer.clone(),
            run,
            strategy: self.strategy.name().to_string(),
            paths,
            synthesis_prompt: agg.prompt,
            synthesis: agg.synthesis,
            final_answer: agg.final_answer,
            verdict,
            stage_usage: StageTokens {
                explorer: explorer_usage,
                synthesizer: agg.usage,
            },
        })
    }
}

/// Explorer then synthesizer for a single query, run 0.
pub async fn run_a2r(
    query: &Query,
    explorer: &Gateway,
    synthesizer: &Gateway,
    n_paths: usize,
    base_seed: u64,
) -> Result<A2ROutcome, PipelineError> {
    Pipeline::new(
        explorer.clone(),
        Some(synthesizer.clone()),
        Arc::new(Synthesize),
        n_paths,
    )?
    .run_query(query, 0, base_seed)
    .await
}
