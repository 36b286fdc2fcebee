use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use super::report::load_run;
use super::HarnessError;
use crate::grpo::{curate_training_records, CurateConfig, GrpoError, QueryRollouts, TrainerPlan, MAX_CANDIDATES};
use crate::pipeline::{A2ROutcome, Query};

/// Appended to the record file name for the trainer settings sidecar.
pub const CURATE_PLAN_SUFFIX: &str = ".plan.json";

#[derive(Debug, Clone)]
pub struct CurateOptions {
    pub rollout_dir: PathBuf,
    pub n_paths: usize,
    pub records_per_query: usize,
    pub seed: u64,
    pub out_path: PathBuf,
    pub max_candidates: usize,
}

impl CurateOptions {
    pub fn new(
        rollout_dir: impl Into<PathBuf>,
        n_paths: usize,
        records_per_query: usize,
        seed: u64,
        out_path: impl Into<PathBuf>,
    ) -> Self {
        Self {
            rollout_dir: rollout_dir.into(),
            n_paths,
            records_per_query,
            seed,
            out_path: out_path.into(),
            max_candidates: MAX_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateSummary {
    pub records: usize,
    /// (query id, valid candidates, records written)
    pub per_query: Vec<(String, usize, usize)>,
    pub skipped: Vec<GrpoError>,
}

impl fmt::Display for CurateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, valid, written) in &self.per_query {
            writeln!(f, "{id}\tvalid={valid}\trecords={written}")?;
        }
        for s in &self.skipped {
            writeln!(f, "skipped: {s}")?;
        }
        write!(
            f,
            "{} records from {} queries, {} skipped",
            self.records,
            self.per_query.len() - self.skipped.len(),
            self.skipped.len()
        )
    }
}

/// Pools explorer paths per query across runs, in (run, index) order.
fn rollouts(outcomes: &[A2ROutcome]) -> Vec<QueryRollouts> {
    let mut grouped: BTreeMap<&str, Vec<&A2ROutcome>> = BTreeMap::new();
    for o in outcomes {
        grouped.entry(&o.query_id).or_default().push(o);
    }
    grouped
        .into_values()
        .map(|mut os| {
            os.sort_by_key(|o| o.run);
            let first = os[0];
            let query = Query {
                id: first.query_id.clone(),
                question: first.question.clone(),
                gold_answer: first.gold_answer.clone(),
            };
            QueryRollouts::from_paths(&query, os.iter().flat_map(|o| &o.paths))
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes training records as JSONL plus a trainer-plan sidecar.
pub fn cmd_curate(opts: &CurateOptions) -> Result<CurateSummary, HarnessError> {
    let run = load_run(&opts.rollout_dir)?;
    let rollouts = rollouts(&run.outcomes);
    let cfg = CurateConfig {
        n_paths: opts.n_paths,
        records_per_query: opts.records_per_query,
        max_candidates: opts.max_candidates,
        seed: opts.seed,
    };
    let curation = curate_training_records(&rollouts, &cfg)?;

    let mut text = String::new();
    for r in &curation.records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    write_file(&opts.out_path, &text)?;

    let plan = TrainerPlan::new(opts.n_paths);
    plan.validate()?;
    let mut plan_path = opts.out_path.clone().into_os_string();
    plan_path.push(CURATE_PLAN_SUFFIX);
    let mut plan_text = serde_json::to_string_pretty(&plan).expect("plan serializes");
    plan_text.push('\n');
    write_file(Path::new(&plan_path), &plan_text)?;

    let mut written: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &curation.records {
        *written.entry(&r.query_id).or_default() += 1;
    }
    let per_query = rollouts
        .iter()
        .map(|r| {
            (
                r.query_id.clone(),
                r.candidates.len().min(opts.max_candidates),
                written.get(r.query_id.as_str()).copied().unwrap_or(0),
            )
        })
        .collect();
    Ok(CurateSummary {
        records: curation.records.len(),
        per_query,
        skipped: curation.skipped,
    })
}
