//! Prompt text for both stages and reference-context rendering.

use sha2::{Digest, Sha256};

use super::{PipelineError, ReasoningPath};

/// First line of the synthesizer prompt, fixed text.
pub const SYNTHESIZER_INSTRUCTION: &str = "You can solve the problem using the provided references, or you can choose to find a new solution. The final answer should be placed in boxed{}.";

/// Appended to the question for explorer samples.
pub const EXPLORER_INSTRUCTION: &str =
    "Please reason step by step, and put your final answer within \\boxed{}.";

/// Default character budget for the rendered reference context.
pub const DEFAULT_CONTEXT_BUDGET: usize = 24_000;

/// Digest of every prompt template. Part of the run config hash, so editing
/// a template invalidates resumable runs.
pub fn template_fingerprint() -> String {
    let mut h = Sha256::new();
    for part in [
        SYNTHESIZER_INSTRUCTION,
        "Instruction: ",
        "\nQuery: ",
        "\nReference: ",
        "<reference{k}>",
        "</reference{k}>",
        EXPLORER_INSTRUCTION,
    ] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

pub fn compose_explorer_prompt(question: &str) -> Result<String, PipelineError> {
    if question.trim().is_empty() {
        return Err(PipelineError::EmptyQuestion);
    }
    Ok(format!("{question}\n{EXPLORER_INSTRUCTION}"))
}

/// Answer components wrapped in numbered reference tags.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceContext {
    pub blocks: Vec<String>,
    pub rendered: String,
    /// Whether any block was cut to fit the budget.
    pub truncated: bool,
}

fn open_tag(k: usize) -> String {
    format!("<reference{k}>")
}

fn close_tag(k: usize) -> String {
    format!("</reference{k}>")
}

pub fn build_reference(paths: &[ReasoningPath]) -> Result<ReferenceContext, PipelineError> {
    build_reference_with_budget(paths, DEFAULT_CONTEXT_BUDGET)
}

/// Concatenates answer components in path-index order.
///
/// When the rendered text would exceed `budget` characters, blocks are cut
/// from the front so their conclusions survive. Short blocks are kept whole
/// and the remaining budget is shared evenly among the long ones.
pub fn build_reference_with_budget(
    paths: &[ReasoningPath],
    budget: usize,
) -> Result<ReferenceContext, PipelineError> {
    if paths.is_empty() {
        return Err(PipelineError::EmptyPaths);
    }
    for (pos, p) in paths.iter().enumerate() {
        if p.index != pos {
            return Err(PipelineError::UnorderedPaths {
                position: pos,
                index: p.index,
            });
        }
    }

    let n = paths.len();
    let tag_chars: usize = (1..=n).map(|k| open_tag(k).len() + close_tag(k).len()).sum();
    let lengths: Vec<usize> = paths
        .iter()
        .map(|p| p.answer_component.chars().count())
        .collect();
    let available = budget.saturating_sub(tag_chars);
    let cap = fair_cap(&lengths, available);

    let mut truncated = false;
    let blocks: Vec<String> = paths
        .iter()
        .zip(&lengths)
        .map(|(p, &len)| match cap {
            Some(cap) if len > cap => {
                truncated = true;
                p.answer_component.chars().skip(len - cap).collect()
            }
            _ => p.answer_component.clone(),
        })
        .collect();

    let mut rendered = String::with_capacity(blocks.iter().map(String::len).sum::<usize>() + tag_chars);
    for (i, block) in blocks.iter().enumerate() {
        rendered.push_str(&open_tag(i + 1));
        rendered.push_str(block);
        rendered.push_str(&close_tag(i + 1));
    }
    Ok(ReferenceContext {
        blocks,
        rendered,
        truncated,
    })
}

/// Largest per-block length such that the capped total fits `available`, or
/// `None` when everything already fits.
fn fair_cap(lengths: &[usize], available: usize) -> Option<usize> {
    if lengths.iter().sum::<usize>() <= available {
        return None;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mut remaining = available;
    for (i, &len) in sorted.iter().enumerate() {
        let share = remaining / (sorted.len() - i);
        if len > share {
            return Some(share);
        }
        remaining -= len;
    }
    None
}

/// Synthesizer prompt: instruction, query and rendered references on three lines.
pub fn compose_synthesizer_prompt(
    question: &str,
    reference: &ReferenceContext,
) -> Result<String, PipelineError> {
    if question.trim().is_empty() {
        return Err(PipelineError::EmptyQuestion);
    }
    Ok(format!(
        "Instruction: {SYNTHESIZER_INSTRUCTION}\nQuery: {question}\nReference: {}",
        reference.rendered
    ))
}
