//! Token accounting and inference cost.
//!
//! Explorer cost is `N × (T_in × P_in + T_out × P_out)` with per-call mean
//! token counts, synthesizer cost is one call at its own counts, and the
//! total is their sum. Amounts are integer picocurrency (1e-12 units) so
//! sums are exact; prices are quoted per million tokens with at most six
//! decimal places.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Stage, TokenUsage};

/// Picocurrency units per currency unit.
pub const UNITS_PER_CURRENCY: u128 = 1_000_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("model '{0}' is not in the pricing sheet")]
    UnknownModel(String),
    #[error("invalid price for '{model}': {reason}")]
    InvalidPrice { model: String, reason: String },
    #[error("pricing sheet: {0}")]
    Parse(String),
    #[error("query count must be positive")]
    NoQueries,
}

/// Non-negative amount in picocurrency.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub u128);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn units(self) -> u128 {
        self.0
    }

    pub fn to_f64(self) -> f64 {
        let whole = (self.0 / UNITS_PER_CURRENCY) as f64;
        let frac = (self.0 % UNITS_PER_CURRENCY) as f64 / UNITS_PER_CURRENCY as f64;
        whole + frac
    }

    /// Decimal string with `places` fractional digits, rounded half up.
    pub fn to_decimal_string(self, places: u32) -> String {
        let places = places.min(12);
        let step = 10u128.pow(12 - places);
        let rounded = (self.0 + step / 2) / step;
        let scale = 10u128.pow(places);
        if places == 0 {
            return rounded.to_string();
        }
        format!(
            "{}.{:0width$}",
            rounded / scale,
            rounded % scale,
            width = places as usize
        )
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal_string(12))
    }
}

/// Prices for one model, quoted per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub input_per_mtok: f64,
    pub output_per_mtok: f64,
}

/// Per-token prices in picocurrency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPrice {
    pub input: u128,
    pub output: u128,
}

fn per_token_units(model: &str, per_mtok: f64) -> Result<u128, CostError> {
    let invalid = |reason: &str| CostError::InvalidPrice {
        model: model.to_string(),
        reason: reason.to_string(),
    };
    if !per_mtok.is_finite() || per_mtok < 0.0 {
        return Err(invalid("price must be finite and non-negative"));
    }
    // per-Mtok price × 1e12 units / 1e6 tokens
    let units = per_mtok * 1e6;
    let rounded = units.round();
    if (units - rounded).abs() > 1e-6 * rounded.max(1.0) {
        return Err(invalid("more than six decimal places"));
    }
    Ok(rounded as u128)
}

/// Model name → prices. File format: `{"model": {"input_per_mtok": .., "output_per_mtok": ..}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingSheet {
    pub models: BTreeMap<String, ModelPrice>,
}

impl PricingSheet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_model(mut self, model: &str, input_per_mtok: f64, output_per_mtok: f64) -> Self {
        self.models.insert(
            model.to_string(),
            ModelPrice {
                input_per_mtok,
                output_per_mtok,
            },
        );
        self
    }

    pub fn from_json_str(text: &str) -> Result<Self, CostError> {
        let sheet: Self = serde_json::from_str(text).map_err(|e| CostError::Parse(e.to_string()))?;
        for model in sheet.models.keys() {
            sheet.price(model)?;
        }
        Ok(sheet)
    }

    pub fn from_json_file(path: &Path) -> Result<Self, CostError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CostError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn price(&self, model: &str) -> Result<TokenPrice, CostError> {
        let p = self
            .models
            .get(model)
            .ok_or_else(|| CostError::UnknownModel(model.to_string()))?;
        Ok(TokenPrice {
            input: per_token_units(model, p.input_per_mtok)?,
            output: per_token_units(model, p.output_per_mtok)?,
        })
    }
}

/// Token totals for one stage.
///
/// `input_tokens` and `output_tokens` are totals over all `n_calls`; the
/// per-call means of the cost formula are `total / n_calls`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub stage: Stage,
    pub n_calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl StageUsage {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            n_calls: 0,
            input_tokens: 0,
            output_tokens: 0,
        }
    }

    /// `n_calls` calls each averaging `mean_in`/`mean_out` tokens.
    pub fn per_call(stage: Stage, n_calls: u64, mean_in: u64, mean_out: u64) -> Self {
        Self {
            stage,
            n_calls,
            input_tokens: n_calls * mean_in,
            output_tokens: n_calls * mean_out,
        }
    }

    pub fn record(&mut self, usage: &TokenUsage) {
        self.n_calls += 1;
        self.input_tokens += usage.input_tokens;
        self.output_tokens += usage.output_tokens;
    }

    pub fn merge(&mut self, other: &StageUsage) {
        self.n_calls += other.n_calls;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }

    pub fn mean_input(&self) -> f64 {
        if self.n_calls == 0 {
            0.0
        } else {
            self.input_tokens as f64 / self.n_calls as f64
        }
    }

    pub fn mean_output(&self) -> f64 {
        if self.n_calls == 0 {
            0.0
        } else {
            self.output_tokens as f64 / self.n_calls as f64
        }
    }
}

pub fn stage_cost(usage: &StageUsage, sheet: &PricingSheet, model: &str) -> Result<Money, CostError> {
    let price = sheet.price(model)?;
    // n × (mean_in × P_in + mean_out × P_out) == total_in × P_in + total_out × P_out
    Ok(Money(
        u128::from(usage.input_tokens) * price.input + u128::from(usage.output_tokens) * price.output,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub explorer_cost: Money,
    pub synthesizer_cost: Money,
    pub total_cost: Money,
    /// Total cost per 1000 queries, rounded to the nearest unit.
    pub per_1k: Money,
    pub query_count: u64,
}

/// Explorer plus optional synthesizer cost over `query_count` queries.
pub fn total_cost(
    explorer: &StageUsage,
    explorer_model: &str,
    synthesizer: Option<(&StageUsage, &str)>,
    sheet: &PricingSheet,
    query_count: u64,
) -> Result<CostBreakdown, CostError> {
    if query_count == 0 {
        return Err(CostError::NoQueries);
    }
    let explorer_cost = stage_cost(explorer, sheet, explorer_model)?;
    let synthesizer_cost = match synthesizer {
        Some((usage, model)) => stage_cost(usage, sheet, model)?,
        None => Money::ZERO,
    };
    let total = explorer_cost + synthesizer_cost;
    let q = u128::from(query_count);
    Ok(CostBreakdown {
        explorer_cost,
        synthesizer_cost,
        total_cost: total,
        per_1k: Money((total.0 * 1000 + q / 2) / q),
        query_count,
    })
}

/// Per-stage usage, with estimated counts kept apart from measured ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageLedger {
    measured: BTreeMap<Stage, StageUsage>,
    estimated: BTreeMap<Stage, StageUsage>,
}

impl Default for UsageLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl UsageLedger {
    pub fn new() -> Self {
        let both = || {
            [Stage::Explorer, Stage::Synthesizer]
                .into_iter()
                .map(|s| (s, StageUsage::new(s)))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            measured: both(),
            estimated: both(),
        }
    }

    pub fn record(&mut self, stage: Stage, usage: &TokenUsage) {
        let table = if usage.estimated {
            &mut self.estimated
        } else {
            &mut self.measured
        };
        table
            .get_mut(&stage)
            .expect("both stages are always present")
            .record(usage);
    }

    pub fn estimated_calls(&self) -> u64 {
        self.estimated.values().map(|s| s.n_calls).sum()
    }

    /// Usage for `stage`; estimated calls are folded in only when asked.
    pub fn stage(&self, stage: Stage, include_estimated: bool) -> StageUsage {
        let mut usage = self.measured[&stage];
        if include_estimated {
            usage.merge(&self.estimated[&stage]);
        }
        usage
    }
}
