use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::store::{read_jsonl, RunManifest, OUTCOMES_FILE};
use super::HarnessError;
use crate::cost::{total_cost, PricingSheet, UsageLedger};
use crate::gateway::Stage;
use crate::metrics::{a2r_score, cons_at_n, pass_at_1, pass_at_k, SampleSet, DEFAULT_CONS_TRIALS};
use crate::pipeline::A2ROutcome;

/// Decimal places for money in reports.
const MONEY_PLACES: u32 = 6;

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub run_dirs: Vec<PathBuf>,
    pub pricing: Option<PathBuf>,
    /// Ask for the cost table; fails with `MissingPricing` when no sheet is given.
    pub cost: bool,
    pub allow_partial: bool,
    /// Leave usage estimated from text length out of the cost table.
    pub exclude_estimated: bool,
}

#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcomes: Vec<A2ROutcome>,
}

pub fn load_run(dir: &Path) -> Result<RunData, HarnessError> {
    let manifest = RunManifest::load(dir)?.ok_or_else(|| HarnessError::EmptyRun(dir.into()))?;
    let mut outcomes: Vec<A2ROutcome> = read_jsonl(&dir.join(OUTCOMES_FILE), false)?;
    if outcomes.is_empty() {
        return Err(HarnessError::EmptyRun(dir.into()));
    }
    outcomes.sort_by(|a, b| (a.run, &a.query_id).cmp(&(b.run, &b.query_id)));
    Ok(RunData {
        dir: dir.into(),
        manifest,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub query_id: String,
    pub runs: usize,
    pub pass1: f64,
    pub cons_n: f64,
    pub pass_n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2r: Option<f64>,
    /// Every run of this query had a single largest vote class.
    pub unique_majority: bool,
}

/// One benchmark/configuration line; all scores are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub benchmark: String,
    pub configuration: String,
    pub n: usize,
    pub runs: usize,
    pub queries: usize,
    pub pass1: f64,
    pub cons_n: f64,
    pub pass_n: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a2r: Option<f64>,
    pub per_query: Vec<QueryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub configuration: String,
    pub n: usize,
    pub invocations: u64,
    pub explorer_input_mean: f64,
    pub explorer_output_mean: f64,
    pub synthesizer_input_mean: f64,
    pub synthesizer_output_mean: f64,
    pub explorer_cost: String,
    pub synthesizer_cost: String,
    pub total_cost: String,
    pub cost_per_1k: String,
    pub estimated_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metrics: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub costs: Option<Vec<CostRow>>,
}

fn configuration(m: &RunManifest) -> String {
    match &m.synthesizer_model {
        Some(s) => format!("{} {}->{}", m.strategy, m.explorer_model, s),
        None => format!("{} {}", m.strategy, m.explorer_model),
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn query_row(query_id: &str, outcomes: &[&A2ROutcome], n: usize, has_synthesis: bool) -> Result<QueryRow, HarnessError> {
    let gold = &outcomes[0].gold_answer;
    let mut pooled_verdicts = Vec::new();
    let mut pooled_answers = Vec::new();
    let mut cons_hits = 0.0;
    let mut unique = true;
    for o in outcomes {
        let set = SampleSet::new(query_id, o.path_verdicts(), o.path_answers())?;
        // paired Cons@N: the same paths the synthesizer saw in this run
        cons_hits += cons_at_n(&set, set.len(), gold, DEFAULT_CONS_TRIALS, 0)?;
        unique &= crate::answer::classify_votes(&set.answers)
            .map(|c| c.has_unique_majority())
            .unwrap_or(false);
        pooled_verdicts.extend(set.verdicts);
        pooled_answers.extend(set.answers);
    }
    let pooled = SampleSet::new(query_id, pooled_verdicts, pooled_answers)?;
    let runs = outcomes.len();
    let hits = outcomes.iter().filter(|o| o.verdict).count() as f64;
    Ok(QueryRow {
        query_id: query_id.to_string(),
        runs,
        pass1: 100.0 * pass_at_1(&pooled),
        cons_n: 100.0 * (cons_hits / runs as f64),
        pass_n: 100.0 * pass_at_k(&pooled, n.min(pooled.len()))?,
        a2r: has_synthesis.then(|| 100.0 * (hits / runs as f64)),
        unique_majority: unique,
    })
}

fn metric_row(data: &RunData) -> Result<MetricRow, HarnessError> {
    let m = &data.manifest;
    let mut by_query: BTreeMap<&str, Vec<&A2ROutcome>> = BTreeMap::new();
    for o in &data.outcomes {
        by_query.entry(o.query_id.as_str()).or_default().push(o);
    }
    let has_synthesis = data.outcomes.iter().any(|o| o.synthesis.is_some());
    let per_query = by_query
        .iter()
        .map(|(id, os)| query_row(id, os, m.n_paths, has_synthesis))
        .collect::<Result<Vec<_>, _>>()?;

    let runs = by_query.values().map(Vec::len).min().unwrap_or(0);
    let a2r = if has_synthesis {
        let verdicts: BTreeMap<String, Vec<bool>> = by_query
            .iter()
            .map(|(id, os)| (id.to_string(), os.iter().map(|o| o.verdict).collect()))
            .collect();
        Some(a2r_score(&verdicts, runs)?)
    } else {
        None
    };
    Ok(MetricRow {
        benchmark: m.dataset.clone(),
        configuration: configuration(m),
        n: m.n_paths,
        runs,
        queries: per_query.len(),
        pass1: mean(per_query.iter().map(|r| r.pass1)),
        cons_n: mean(per_query.iter().map(|r| r.cons_n)),
        pass_n: mean(per_query.iter().map(|r| r.pass_n)),
        a2r,
        per_query,
    })
}

fn cost_row(data: &RunData, sheet: &PricingSheet, include_estimated: bool) -> Result<CostRow, HarnessError> {
    let m = &data.manifest;
    let mut ledger = UsageLedger::new();
    for o in &data.outcomes {
        for p in o.paths.iter().filter(|p| !p.is_failed()) {
            ledger.record(Stage::Explorer, &p.usage);
        }
        if let Some(u) = &o.stage_usage.synthesizer {
            ledger.record(Stage::Synthesizer, u);
        }
    }
    let explorer = ledger.stage(Stage::Explorer, include_estimated);
    let synthesizer = ledger.stage(Stage::Synthesizer, include_estimated);
    let invocations = data.outcomes.len() as u64;
    let breakdown = total_cost(
        &explorer,
        &m.explorer_model,
        m.synthesizer_model.as_deref().map(|model| (&synthesizer, model)),
        sheet,
        invocations,
    )?;
    Ok(CostRow {
        configuration: configuration(m),
        n: m.n_paths,
        invocations,
        explorer_input_mean: explorer.mean_input(),
        explorer_output_mean: explorer.mean_output(),
        synthesizer_input_mean: synthesizer.mean_input(),
        synthesizer_output_mean: synthesizer.mean_output(),
        explorer_cost: breakdown.explorer_cost.to_decimal_string(MONEY_PLACES),
        synthesizer_cost: breakdown.synthesizer_cost.to_decimal_string(MONEY_PLACES),
        total_cost: breakdown.total_cost.to_decimal_string(MONEY_PLACES),
        cost_per_1k: breakdown.per_1k.to_decimal_string(MONEY_PLACES),
        estimated_calls: ledger.estimated_calls(),
    })
}

/// Builds the report from loaded runs. Runs with pending pairs are refused
/// unless `allow_partial` is set.
pub fn build_report(
    runs: &[RunData],
    sheet: Option<&PricingSheet>,
    allow_partial: bool,
    include_estimated: bool,
) -> Result<Report, HarnessError> {
    if !allow_partial {
        for r in runs {
            let done = r.outcomes.len();
            let total: usize = r.manifest.status.values().map(Vec::len).sum();
            if done < total {
                return Err(HarnessError::PartialRun {
                    dir: r.dir.clone(),
                    pending: total - done,
                });
            }
        }
    }
    let metrics = runs.iter().map(metric_row).collect::<Result<Vec<_>, _>>()?;
    let costs = match sheet {
        Some(s) => Some(
            runs.iter()
                .map(|r| cost_row(r, s, include_estimated))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        None => None,
    };
    Ok(Report { metrics, costs })
}

pub fn cmd_report(opts: &ReportOptions) -> Result<Report, HarnessError> {
    if opts.cost && opts.pricing.is_none() {
        return Err(HarnessError::MissingPricing);
    }
    if opts.run_dirs.is_empty() {
        return Err(HarnessError::InvalidOption("no run directories given".into()));
    }
    let sheet = opts
        .pricing
        .as_deref()
        .map(PricingSheet::from_json_file)
        .transpose()?;
    let runs = opts
        .run_dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>, _>>()?;
    build_report(&runs, sheet.as_ref(), opts.allow_partial, !opts.exclude_estimated)
}

fn render_table(header: &[&str], rows: &[Vec<String>], left_cols: usize) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i < left_cols {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "{cell:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

impl Report {
    pub fn render_text(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .metrics
            .iter()
            .map(|r| {
                vec![
                    r.benchmark.clone(),
                    r.configuration.clone(),
                    r.n.to_string(),
                    pct(r.pass1),
                    pct(r.cons_n),
                    pct(r.pass_n),
                    r.a2r.map_or_else(|| "-".to_string(), pct),
                ]
            })
            .collect();
        let mut out = render_table(
            &["Benchmark", "Configuration", "N", "Pass@1", "Cons@N", "Pass@N", "A2R"],
            &rows,
            2,
        );
        if let Some(costs) = &self.costs {
            let rows: Vec<Vec<String>> = costs
                .iter()
                .map(|c| {
                    vec![
                        c.configuration.clone(),
                        c.n.to_string(),
                        format!("{:.1}", c.explorer_input_mean),
                        format!("{:.1}", c.explorer_output_mean),
                        format!("{:.1}", c.synthesizer_input_mean),
                        format!("{:.1}", c.synthesizer_output_mean),
                        c.total_cost.clone(),
                        c.cost_per_1k.clone(),
                    ]
                })
                .collect();
            out.push('\n');
            out.push_str(&render_table(
                &[
                    "Configuration",
                    "N",
                    "Explorer in",
                    "Explorer out",
                    "Synth in",
                    "Synth out",
                    "Cost",
                    "Cost/1K",
                ],
                &rows,
                1,
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
