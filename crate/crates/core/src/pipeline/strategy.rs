use std::sync::Arc;

use async_trait::async_trait;

use super::{build_reference_with_budget, compose_synthesizer_prompt, PipelineError, Query, ReasoningPath};
use crate::answer::{classify_votes, extract_answer, CanonicalAnswer, RawCompletion};
use crate::gateway::{ChatMessage, CompletionRequest, Gateway, SampleKey, Stage, TokenUsage};
use crate::registry::Registry;

pub struct AggregateContext<'a> {
    pub synthesizer: Option<&'a Gateway>,
    pub run: usize,
    pub seed: u64,
    pub context_budget: usize,
}

/// Result of the second stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub prompt: Option<String>,
    pub synthesis: Option<RawCompletion>,
    pub final_answer: CanonicalAnswer,
    /// Synthesizer usage; `None` when no model call was made.
    pub usage: Option<TokenUsage>,
}

/// Turns explorer paths into one final answer.
#[async_trait]
pub trait Aggregator: Send + Sync {
    fn name(&self) -> &str;

    fn needs_synthesizer(&self) -> bool;

    async fn aggregate(
        &self,
        query: &Query,
        paths: &[ReasoningPath],
        ctx: &AggregateContext<'_>,
    ) -> Result<Aggregation, PipelineError>;
}

pub type StrategyRegistry = Registry<Arc<dyn Aggregator>>;

pub fn default_strategies() -> StrategyRegistry {
    let mut r = StrategyRegistry::new();
    r.register("a2r", Arc::new(Synthesize) as Arc<dyn Aggregator>);
    r.register("majority", Arc::new(MajorityVote) as Arc<dyn Aggregator>);
    r
}

/// Generative synthesis over the reference context, one synthesizer call.
#[derive(Debug, Clone, Copy, Default)]
pub struct Synthesize;

#[async_trait]
impl Aggregator for Synthesize {
    fn name(&self) -> &str {
        "a2r"
    }

    fn needs_synthesizer(&self) -> bool {
        true
    }

    async fn aggregate(
        &self,
        query: &Query,
        paths: &[ReasoningPath],
        ctx: &AggregateContext<'_>,
    ) -> Result<Aggregation, PipelineError> {
        let synthesizer = ctx
            .synthesizer
            .ok_or_else(|| PipelineError::MissingSynthesizer(self.name().to_string()))?;
        let reference = build_reference_with_budget(paths, ctx.context_budget)?;
        if reference.truncated {
            tracing::debug!(query = %query.id, "reference context truncated to budget");
        }
        let prompt = compose_synthesizer_prompt(&query.question, &reference)?;
        let request = CompletionRequest {
            messages: vec![ChatMessage::user(prompt.clone())],
            seed: ctx.seed,
            key: SampleKey::new(query.id.clone(), ctx.run as u64, Stage::Synthesizer),
        };
        let result = synthesizer.complete(&request).await?;
        let final_answer =
            extract_answer(&result.completion).unwrap_or_else(|_| CanonicalAnswer::missing());
        Ok(Aggregation {
            prompt: Some(prompt),
            synthesis: Some(result.completion),
            final_answer,
            usage: Some(result.usage),
        })
    }
}

/// Self-consistency: the largest vote class wins, first class on ties.
#[derive(Debug, Clone, Copy, Default)]
pub struct MajorityVote;

#[async_trait]
impl Aggregator for MajorityVote {
    fn name(&self) -> &str {
        "majority"
    }

    fn needs_synthesizer(&self) -> bool {
        false
    }

    async fn aggregate(
        &self,
        _query: &Query,
        paths: &[ReasoningPath],
        _ctx: &AggregateContext<'_>,
    ) -> Result<Aggregation, PipelineError> {
        let answers: Vec<CanonicalAnswer> = paths.iter().map(|p| p.canonical.clone()).collect();
        let classes = classify_votes(&answers).map_err(|_| PipelineError::EmptyPaths)?;
        let final_answer = classes
            .majority()
            .map(|c| c.representative.clone())
            .unwrap_or_else(CanonicalAnswer::missing);
        Ok(Aggregation {
            prompt: None,
            synthesis: None,
            final_answer,
            usage: None,
        })
    }
}
