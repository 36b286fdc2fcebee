mod common;

use std::sync::Arc;
use std::time::Duration;

use a2r_core::answer::extract_answer;
use a2r_core::gateway::{MockBackend, MockEntry, MockScript, Stage, TokenUsage};
use a2r_core::pipeline::{
    build_reference, default_strategies, run_a2r, run_explorer, MajorityVote, Pipeline, PipelineError, Query,
};
use common::{entry, explorer_text, gateway, synth_text};

fn script(query: &str, explorer: &[&str], synth: Option<&str>) -> Vec<MockEntry> {
    let mut entries: Vec<MockEntry> = explorer
        .iter()
        .enumerate()
        .map(|(i, a)| entry(query, i as u64, Stage::Explorer, explorer_text(a), (20, 100 + i as u64)))
        .collect();
    if let Some(s) = synth {
        entries.push(entry(query, 0, Stage::Synthesizer, synth_text(s), (500, 80)));
    }
    entries
}

fn backend(entries: Vec<MockEntry>) -> Arc<MockBackend> {
    Arc::new(MockBackend::new(MockScript::new(entries)))
}

async fn a2r(query: &Query, explorer: &[&str], synth: &str) -> a2r_core::A2ROutcome {
    let b = backend(script(&query.id, explorer, Some(synth)));
    run_a2r(query, &gateway(&b, "e"), &gateway(&b, "s"), explorer.len(), 0).await.unwrap()
}

#[tokio::test]
async fn explorer_returns_indexed_paths_with_answer_segments() {
    let q = Query::new("q", "Find x.", "9");
    let mut entries = script("q", &["1", "2", "3"], None);
    entries.push(entry("q", 3, Stage::Explorer, "reason…</think> Thus \\boxed{9}".into(), (5, 5)));
    let b = backend(entries);
    let paths = run_explorer(&q, &gateway(&b, "e"), 4, 100, 0).await.unwrap();
    assert_eq!(paths.iter().map(|p| p.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(paths.iter().map(|p| p.seed).collect::<Vec<_>>(), vec![100, 101, 102, 103]);
    assert_eq!(paths[3].answer_component, " Thus \\boxed{9}");
    assert_eq!(paths[3].trace, "reason…");
    assert_eq!(paths[3].canonical.canonical, "9");
}

#[tokio::test]
async fn single_path_gives_single_block() {
    let q = Query::new("q", "Find x.", "4");
    let b = backend(script("q", &["4"], None));
    let paths = run_explorer(&q, &gateway(&b, "e"), 1, 0, 0).await.unwrap();
    let r = build_reference(&paths).unwrap();
    assert_eq!(r.blocks.len(), 1);
    assert_eq!(r.rendered.matches("<reference").count(), 1);
}

#[tokio::test]
async fn scripted_syntheses() {
    let q = Query::new("q", "What is it?", "7");
    let o = a2r(&q, &["7", "7", "7", "7"], "7").await;
    assert!(o.verdict);

    let q = Query::new("q", "What is it?", "5");
    let o = a2r(&q, &["3", "5", "5", "9"], "5").await;
    assert_eq!(o.final_answer.canonical, "5");
    assert!(o.verdict);

    // the synthesizer may ignore every reference
    let q = Query::new("q", "What is it?", "4");
    let o = a2r(&q, &["7", "7", "7", "7"], "4").await;
    assert_eq!(o.final_answer.canonical, "4");
    assert!(o.verdict);
    assert!(o.path_verdicts().iter().all(|v| !v));
}

#[tokio::test]
async fn outcome_invariants() {
    let q = Query::new("q", "What is it?", "5");
    let o = a2r(&q, &["3", "5", "5", "9"], "5").await;
    let sum: TokenUsage = o.paths.iter().map(|p| p.usage).sum();
    assert_eq!(o.stage_usage.explorer, sum);
    assert_eq!(o.stage_usage.synthesizer, Some(TokenUsage::new(500, 80)));
    let replay = extract_answer(o.synthesis.as_ref().unwrap()).unwrap();
    assert_eq!(replay, o.final_answer);
    let prompt = o.synthesis_prompt.unwrap();
    assert!(prompt.starts_with("Instruction: "));
    assert!(prompt.contains("\nQuery: What is it?\nReference: <reference1>"));
    assert!(prompt.ends_with("</reference4>"));
}

#[tokio::test]
async fn arrival_order_does_not_change_reference() {
    let q = Query::new("q", "Q?", "1");
    let answers = ["1", "2", "3", "4", "5", "6"];
    let fast = backend(script("q", &answers, None));
    let reversed = Arc::new(
        MockBackend::new(MockScript::new(script("q", &answers, None)))
            .with_latency(|k| Duration::from_millis(3 * (6 - k.sample_index))),
    );
    let a = run_explorer(&q, &gateway(&fast, "e"), 6, 0, 0).await.unwrap();
    let b = run_explorer(&q, &gateway(&reversed, "e"), 6, 0, 0).await.unwrap();
    assert_eq!(build_reference(&a).unwrap().rendered, build_reference(&b).unwrap().rendered);
}

#[tokio::test]
async fn failed_path_keeps_an_empty_block() {
    let q = Query::new("q", "Q?", "2");
    let mut entries = script("q", &["2", "2"], Some("2"));
    // index 2 is unscripted and fails permanently
    entries.push(entry("q", 3, Stage::Explorer, explorer_text("3"), (1, 1)));
    let b = backend(entries);
    let o = run_a2r(&q, &gateway(&b, "e"), &gateway(&b, "s"), 4, 0).await.unwrap();
    assert!(o.paths[2].is_failed());
    assert!(o.paths[2].canonical.is_missing());
    assert_eq!(o.path_verdicts(), vec![true, true, false, false]);
    assert!(o.synthesis_prompt.unwrap().contains("<reference3></reference3>"));
}

#[tokio::test]
async fn all_paths_failing_is_an_error() {
    let q = Query::new("q", "Q?", "2");
    let b = backend(Vec::new());
    let err = run_explorer(&q, &gateway(&b, "e"), 3, 0, 0).await.unwrap_err();
    assert!(matches!(err, PipelineError::AllPathsFailed { .. }), "{err:?}");
}

#[tokio::test]
async fn synthesizer_failure_keeps_paths() {
    let q = Query::new("q", "Q?", "2");
    let b = backend(script("q", &["2", "3"], None));
    let err = run_a2r(&q, &gateway(&b, "e"), &gateway(&b, "s"), 2, 0).await.unwrap_err();
    match err {
        PipelineError::SynthesizerFailed { paths, .. } => assert_eq!(paths.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[tokio::test]
async fn majority_strategy_makes_no_synthesizer_call() {
    let q = Query::new("q", "Q?", "5");
    let b = backend(script("q", &["3", "5", "3", "5"], None));
    let p = Pipeline::new(gateway(&b, "e"), None, Arc::new(MajorityVote), 4).unwrap();
    let o = p.run_query(&q, 0, 0).await.unwrap();
    // tie between 3 and 5 goes to the first class seen
    assert_eq!(o.final_answer.canonical, "3");
    assert!(!o.verdict);
    assert!(o.synthesis.is_none());
    assert_eq!(b.calls(Stage::Synthesizer), 0);
}

#[test]
fn strategy_registry_lookup() {
    let r = default_strategies();
    assert_eq!(r.names().collect::<Vec<_>>(), vec!["a2r", "majority"]);
    assert!(r.get("a2r").unwrap().needs_synthesizer());
    assert!(!r.get("majority").unwrap().needs_synthesizer());
    assert!(r.get("best-of-n").is_none());
}

#[tokio::test]
async fn a2r_strategy_requires_synthesizer() {
    let b = backend(Vec::new());
    let strategy = default_strategies().get("a2r").unwrap().clone();
    let err = Pipeline::new(gateway(&b, "e"), None, strategy, 4).unwrap_err();
    assert!(matches!(err, PipelineError::MissingSynthesizer(_)));
}

#[tokio::test]
async fn later_runs_use_disjoint_sample_indices() {
    let q = Query::new("q", "Q?", "1");
    let entries: Vec<MockEntry> = (0..4)
        .map(|i| entry("q", i, Stage::Explorer, explorer_text(&i.to_string()), (1, 1)))
        .chain([entry("q", 1, Stage::Synthesizer, synth_text("1"), (1, 1))])
        .collect();
    let b = backend(entries);
    let p = Pipeline::new(gateway(&b, "e"), Some(gateway(&b, "s")), default_strategies().get("a2r").unwrap().clone(), 2)
        .unwrap();
    let o = p.run_query(&q, 1, 10).await.unwrap();
    assert_eq!(o.path_answers().iter().map(|a| a.canonical.clone()).collect::<Vec<_>>(), vec!["2", "3"]);
    assert_eq!(o.paths[0].seed, 12);
}
