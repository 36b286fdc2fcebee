//! Scripted corpora shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use a2r_core::gateway::{EndpointConfig, Gateway, MockBackend, MockEntry, MockScript, Stage};
use a2r_core::pipeline::{Query, Synthesize};
use a2r_core::Pipeline;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn explorer_text(answer: &str) -> String {
    format!("Let me work through it carefully.</think> So the answer is \\boxed{{{answer}}}.")
}

pub fn synth_text(answer: &str) -> String {
    format!("Checking the references.</think> Final: \\boxed{{{answer}}}")
}

pub fn entry(query_id: &str, sample_index: u64, stage: Stage, text: String, tokens: (u64, u64)) -> MockEntry {
    MockEntry {
        query_id: query_id.into(),
        sample_index,
        stage,
        text,
        input_tokens: tokens.0,
        output_tokens: tokens.1,
        fail_times: 0,
        omit_usage: false,
    }
}

/// Majority by plain string counting, ties to the first value seen.
/// Returns the winner and whether it was the only value with the top count.
pub fn oracle_majority(answers: &[String]) -> (String, bool) {
    let mut order: Vec<&String> = Vec::new();
    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for a in answers {
        if !counts.contains_key(a) {
            order.push(a);
        }
        *counts.entry(a).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let winner = order.iter().find(|a| counts[*a] == top).expect("non-empty");
    let unique = counts.values().filter(|&&c| c == top).count() == 1;
    ((*winner).clone(), unique)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthPolicy {
    /// Answers with the majority of the references it was shown.
    MajorityEcho,
    /// Always answers with the gold value.
    Oracle,
}

pub struct Corpus {
    pub queries: Vec<Query>,
    pub dataset_jsonl: String,
    pub entries: Vec<MockEntry>,
    pub script: MockScript,
    /// Explorer answers per (query id, run), in path order.
    pub explorer_answers: BTreeMap<(String, usize), Vec<String>>,
    pub gold: BTreeMap<String, String>,
}

/// `n_queries` integer-answer questions; each explorer sample is correct
/// with probability `p_correct`, otherwise one of two nearby wrong values.
pub fn corpus(n_queries: usize, n_paths: usize, runs: usize, seed: u64, p_correct: f64, policy: SynthPolicy) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut queries = Vec::new();
    let mut dataset = String::new();
    let mut explorer_answers = BTreeMap::new();
    let mut gold_map = BTreeMap::new();
    for q in 0..n_queries {
        let id = format!("q{q:03}");
        let gold = (q * 7 + 3) as i64;
        let question = format!("Compute the value of problem {q}.");
        dataset.push_str(&format!(
            "{{\"id\":\"{id}\",\"question\":\"{question}\",\"answer\":\"{gold}\"}}\n"
        ));
        queries.push(Query::new(id.clone(), question, &gold.to_string()));
        gold_map.insert(id.clone(), gold.to_string());
        for run in 0..runs {
            let answers: Vec<String> = (0..n_paths)
                .map(|_| {
                    if rng.random_bool(p_correct) {
                        gold.to_string()
                    } else {
                        (gold + rng.random_range(1..=2)).to_string()
                    }
                })
                .collect();
            for (i, a) in answers.iter().enumerate() {
                let idx = (run * n_paths + i) as u64;
                let out_tokens = rng.random_range(50..400);
                entries.push(entry(&id, idx, Stage::Explorer, explorer_text(a), (40, out_tokens)));
            }
            let synth_answer = match policy {
                SynthPolicy::MajorityEcho => oracle_majority(&answers).0,
                SynthPolicy::Oracle => gold.to_string(),
            };
            entries.push(entry(&id, run as u64, Stage::Synthesizer, synth_text(&synth_answer), (600, 120)));
            explorer_answers.insert((id.clone(), run), answers);
        }
    }
    Corpus {
        queries,
        dataset_jsonl: dataset,
        script: MockScript::new(entries.clone()),
        entries,
        explorer_answers,
        gold: gold_map,
    }
}

impl Corpus {
    /// Writes `dataset.jsonl` and `script.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> (PathBuf, PathBuf) {
        let dataset = dir.join("dataset.jsonl");
        let script = dir.join("script.jsonl");
        std::fs::write(&dataset, &self.dataset_jsonl).unwrap();
        let lines: String = self
            .entries
            .iter()
            .map(|e| serde_json::to_string(e).unwrap() + "\n")
            .collect();
        std::fs::write(&script, lines).unwrap();
        (dataset, script)
    }
}

pub fn mock_endpoint(model: &str) -> EndpointConfig {
    let mut cfg = EndpointConfig::new("mock", model);
    cfg.backoff_base_ms = 1;
    cfg.concurrency_limit = 8;
    cfg
}

pub fn gateway(backend: &Arc<MockBackend>, model: &str) -> Gateway {
    Gateway::new(mock_endpoint(model), backend.clone()).expect("valid mock endpoint")
}

/// A2R pipeline with explorer and synthesizer on the same scripted backend.
pub fn a2r_pipeline(backend: &Arc<MockBackend>, n_paths: usize) -> Pipeline {
    Pipeline::new(
        gateway(backend, "explorer-m"),
        Some(gateway(backend, "synth-m")),
        Arc::new(Synthesize),
        n_paths,
    )
    .expect("pipeline")
}
