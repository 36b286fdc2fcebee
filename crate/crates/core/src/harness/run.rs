use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::Utc;
use futures::StreamExt;
use serde::{Deserialize, Serialize};

use super::store::{
    append_jsonl, config_hash, file_sha256, hashed_config, open_append, read_jsonl, PairStatus,
    RunManifest, FAILURES_FILE, OUTCOMES_FILE,
};
use super::HarnessError;
use crate::gateway::{default_backends, EndpointConfig, Gateway};
use crate::pipeline::{
    default_strategies, load_dataset, A2ROutcome, Pipeline, PipelineError, Query, ReasoningPath,
    DEFAULT_CONTEXT_BUDGET,
};

/// Corpus-level settings that are not part of the pipeline itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub runs: usize,
    pub seed: u64,
    /// (query, run) pairs in flight at once.
    pub workers: usize,
    /// Stop after this many pairs; the rest stay pending for a later resume.
    pub limit: Option<usize>,
}

impl RunSpec {
    pub fn new(runs: usize, seed: u64) -> Self {
        Self {
            runs,
            seed,
            workers: 4,
            limit: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dataset: PathBuf,
    pub explorer: EndpointConfig,
    pub synthesizer: Option<EndpointConfig>,
    pub strategy: String,
    pub n_paths: usize,
    pub context_budget: usize,
    pub spec: RunSpec,
    pub out_dir: PathBuf,
}

impl RunOptions {
    pub fn new(
        dataset: impl Into<PathBuf>,
        explorer: EndpointConfig,
        synthesizer: Option<EndpointConfig>,
        n_paths: usize,
        spec: RunSpec,
        out_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            explorer,
            synthesizer,
            strategy: "a2r".into(),
            n_paths,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            spec,
            out_dir: out_dir.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub query_id: String,
    pub run: usize,
    pub error: String,
    /// Explorer paths that completed before the failure.
    #[serde(default)]
    pub paths: Vec<ReasoningPath>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    /// Pairs completed by this invocation.
    pub completed: usize,
    /// Pairs already present in the store and skipped.
    pub skipped: usize,
    pub failures: Vec<FailureRecord>,
}

impl RunSummary {
    pub fn is_complete(&self) -> bool {
        self.manifest.count(PairStatus::Done) == self.manifest.status.values().map(Vec::len).sum::<usize>()
    }
}

/// Loads the dataset, builds gateways and the strategy from the default
/// registries, then runs [`execute_run`].
pub async fn cmd_run(opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    let queries = load_dataset(&opts.dataset)?;
    let dataset_sha = file_sha256(&opts.dataset)?;
    let backends = default_backends();
    let strategy = default_strategies()
        .get(&opts.strategy)
        .cloned()
        .ok_or_else(|| HarnessError::UnknownStrategy(opts.strategy.clone()))?;
    let explorer = Gateway::from_registry(opts.explorer.clone(), &backends)?;
    let synthesizer = match (&opts.synthesizer, strategy.needs_synthesizer()) {
        (Some(cfg), true) => Some(Gateway::from_registry(cfg.clone(), &backends)?),
        (None, true) => {
            return Err(PipelineError::MissingSynthesizer(opts.strategy.clone()).into());
        }
        (_, false) => None,
    };
    let mut pipeline = Pipeline::new(explorer, synthesizer, strategy, opts.n_paths)?;
    pipeline.context_budget = opts.context_budget;
    let label = opts
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    execute_run(&queries, &label, &dataset_sha, &pipeline, &opts.spec, &opts.out_dir).await
}

/// Runs every pending (query, run) pair and appends outcomes to `out_dir`.
///
/// Pairs already in the outcome store are skipped, so calling this again
/// after an interruption only does the missing work. A store written under a
/// different configuration is refused.
pub async fn execute_run(
    queries: &[Query],
    dataset_label: &str,
    dataset_sha256: &str,
    pipeline: &Pipeline,
    spec: &RunSpec,
    out_dir: &Path,
) -> Result<RunSummary, HarnessError> {
    if spec.runs == 0 {
        return Err(HarnessError::InvalidOption("runs must be at least 1".into()));
    }
    if spec.workers == 0 {
        return Err(HarnessError::InvalidOption("workers must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;

    let explorer_cfg = pipeline.explorer.endpoint();
    let synthesizer_cfg = pipeline.synthesizer.as_ref().map(Gateway::endpoint);
    let config = hashed_config(
        explorer_cfg,
        synthesizer_cfg,
        pipeline.strategy.name(),
        pipeline.n_paths,
        spec.seed,
        dataset_sha256,
        pipeline.context_budget,
    );
    let hash = config_hash(&config);

    let mut manifest = match RunManifest::load(out_dir)? {
        Some(m) if m.config_hash != hash => {
            return Err(HarnessError::ConfigMismatch {
                dir: out_dir.into(),
                expected: hash,
                found: m.config_hash,
            })
        }
        Some(m) => {
            tracing::info!(run_id = %m.run_id, "resuming run");
            m
        }
        None => RunManifest {
            run_id: uuid::Uuid::new_v4().to_string(),
            config_hash: hash,
            config,
            dataset: dataset_label.to_string(),
            strategy: pipeline.strategy.name().to_string(),
            explorer_model: explorer_cfg.model_name.clone(),
            synthesizer_model: synthesizer_cfg.map(|c| c.model_name.clone()),
            n_paths: pipeline.n_paths,
            runs: spec.runs,
            seed: spec.seed,
            started: Utc::now(),
            finished: None,
            status: BTreeMap::new(),
        },
    };

    let outcomes_path = out_dir.join(OUTCOMES_FILE);
    let failures_path = out_dir.join(FAILURES_FILE);
    let stored: Vec<A2ROutcome> = read_jsonl(&outcomes_path, true)?;
    let completed: HashSet<(String, usize)> =
        stored.iter().map(|o| (o.query_id.clone(), o.run)).collect();

    manifest.runs = spec.runs;
    manifest.finished = None;
    manifest.status = queries
        .iter()
        .map(|q| {
            let row = (0..spec.runs)
                .map(|r| {
                    if completed.contains(&(q.id.clone(), r)) {
                        PairStatus::Done
                    } else {
                        PairStatus::Pending
                    }
                })
                .collect();
            (q.id.clone(), row)
        })
        .collect();
    let skipped = manifest.count(PairStatus::Done);
    manifest.save(out_dir)?;

    let jobs: Vec<(usize, &Query)> = (0..spec.runs)
        .flat_map(|run| queries.iter().map(move |q| (run, q)))
        .filter(|(run, q)| !completed.contains(&(q.id.clone(), *run)))
        .take(spec.limit.unwrap_or(usize::MAX))
        .collect();

    let mut outcomes_file = open_append(&outcomes_path)?;
    let mut failures_file = None;
    let mut failures = Vec::new();
    let mut done_now = 0;

    // buffered() yields in job order, so the store is written in (run, query)
    // order no matter which pair finishes first
    let mut results = futures::stream::iter(jobs.into_iter().map(|(run, query)| async move {
        (run, query, pipeline.run_query(query, run, spec.seed).await)
    }))
    .buffered(spec.workers);

    while let Some((run, query, result)) = results.next().await {
        match result {
            Ok(outcome) => {
                append_jsonl(&mut outcomes_file, &outcomes_path, &outcome)?;
                manifest.set(&query.id, run, PairStatus::Done);
                done_now += 1;
            }
            Err(err) => {
                tracing::warn!(query = %query.id, run, error = %err, "pair failed");
                let paths = match &err {
                    PipelineError::SynthesizerFailed { paths, .. } => paths.clone(),
                    _ => Vec::new(),
                };
                let record = FailureRecord {
                    query_id: query.id.clone(),
                    run,
                    error: err.to_string(),
                    paths,
                };
                let file = match &mut failures_file {
                    Some(f) => f,
                    None => failures_file.insert(open_append(&failures_path)?),
                };
                append_jsonl(file, &failures_path, &record)?;
                manifest.set(&query.id, run, PairStatus::Failed);
                failures.push(record);
            }
        }
        manifest.save(out_dir)?;
    }

    if manifest.pending() == 0 {
        manifest.finished = Some(Utc::now());
        manifest.save(out_dir)?;
    }
    Ok(RunSummary {
        manifest,
        completed: done_now,
        skipped,
        failures,
    })
}
