//! Two-stage parallel reasoning: many explorer samples, one synthesizer pass
//! over their answers, plus the evaluation, cost and training-data tooling
//! around it.

pub mod answer;
pub mod cost;
pub mod gateway;
pub mod grpo;
pub mod harness;
pub mod metrics;
pub mod pipeline;
pub mod registry;

pub use answer::{classify_votes, extract_answer, is_equivalent, normalize, CanonicalAnswer, RawCompletion};
pub use gateway::{EndpointConfig, Gateway, GatewayError, SampleKey, Stage, TokenUsage};
pub use pipeline::{A2ROutcome, Pipeline, PipelineError, Query, ReasoningPath};
pub use registry::Registry;
