//! Cost arithmetic for self-hosted versus API inference, in exact decimals.

use rust_decimal::prelude::*;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hours in an average month, used to prorate monthly storage prices.
pub const HOURS_PER_MONTH: Decimal = Decimal::from_parts(730, 0, 0, false, 0);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("hosted inference is not cheaper per report (savings {0})")]
    NoSavings(Decimal),
}

/// Prices and throughput. Money is in dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub gpu_rate_per_hour: Decimal,
    pub cpu_rate_per_hour: Decimal,
    pub storage_rate_gb_month: Decimal,
    pub input_token_price_per_million: Decimal,
    pub output_token_price_per_million: Decimal,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            gpu_rate_per_hour: Decimal::new(3, 0),
            cpu_rate_per_hour: Decimal::new(50, 2),
            storage_rate_gb_month: Decimal::new(10, 2),
            input_token_price_per_million: Decimal::new(250, 2),
            output_token_price_per_million: Decimal::new(1000, 2),
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, v) in [
            ("gpu_rate_per_hour", self.gpu_rate_per_hour),
            ("cpu_rate_per_hour", self.cpu_rate_per_hour),
            ("storage_rate_gb_month", self.storage_rate_gb_month),
            ("input_token_price_per_million", self.input_token_price_per_million),
            ("output_token_price_per_million", self.output_token_price_per_million),
        ] {
            if v.is_sign_negative() && !v.is_zero() {
                return Err(CostError::Negative(name));
            }
        }
        Ok(())
    }
}

/// Resources used once, for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedUsage {
    pub gpu_hours: Decimal,
    pub cpu_hours: Decimal,
    pub storage_gb: Decimal,
    pub storage_hours: Decimal,
}

fn non_negative(name: &'static str, v: Decimal) -> Result<Decimal, CostError> {
    if v.is_sign_negative() && !v.is_zero() {
        Err(CostError::Negative(name))
    } else {
        Ok(v)
    }
}

/// GPU and CPU time plus storage prorated from a monthly rate.
pub fn fixed_cost(usage: &FixedUsage, config: &CostConfig) -> Result<Decimal, CostError> {
    config.validate()?;
    let gpu = non_negative("gpu_hours", usage.gpu_hours)?;
    let cpu = non_negative("cpu_hours", usage.cpu_hours)?;
    let gb = non_negative("storage_gb", usage.storage_gb)?;
    let hours = non_negative("storage_hours", usage.storage_hours)?;
    let storage = gb * config.storage_rate_gb_month * hours / HOURS_PER_MONTH;
    Ok(gpu * config.gpu_rate_per_hour + cpu * config.cpu_rate_per_hour + storage)
}

/// GPU cost of processing 100 reports at the given latency.
pub fn variable_cost_per_100(seconds_per_report: Decimal, config: &CostConfig) -> Result<Decimal, CostError> {
    config.validate()?;
    let secs = non_negative("seconds_per_report", seconds_per_report)?;
    Ok(Decimal::ONE_HUNDRED * secs * config.gpu_rate_per_hour / Decimal::from(3600))
}

/// API cost of one request.
pub fn token_cost(input_tokens: u64, output_tokens: u64, config: &CostConfig) -> Decimal {
    let million = Decimal::from(1_000_000);
    Decimal::from(input_tokens) * config.input_token_price_per_million / million
        + Decimal::from(output_tokens) * config.output_token_price_per_million / million
}

/// Reports after which the fixed cost is recovered, rounded up.
pub fn break_even_reports(
    fixed: Decimal,
    open_per_report: Decimal,
    closed_per_report: Decimal,
) -> Result<u64, CostError> {
    let fixed = non_negative("fixed cost", fixed)?;
    if fixed.is_zero() {
        return Ok(0);
    }
    let savings = closed_per_report - open_per_report;
    if savings <= Decimal::ZERO {
        return Err(CostError::NoSavings(savings));
    }
    (fixed / savings).ceil().to_u64().ok_or(CostError::NoSavings(savings))
}

/// How a model is paid for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pricing {
    /// Self-hosted: billed by GPU time.
    Open,
    /// Hosted API: billed by tokens. Token counts are per-report averages.
    Closed {
        input_tokens_per_report: Decimal,
        output_tokens_per_report: Decimal,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUsage {
    pub name: String,
    pub seconds_per_report: Decimal,
    #[serde(flatten)]
    pub pricing: Pricing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub open: bool,
    pub seconds_per_report: Decimal,
    pub cost_per_100: Decimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub open: String,
    pub closed: String,
    /// `None` when the open model is not cheaper per report.
    pub reports: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTable {
    pub fixed_cost: Decimal,
    pub rows: Vec<CostRow>,
    /// Every open model against every closed one.
    pub break_even: Vec<BreakEven>,
}

/// Per-model cost and latency, with break-even counts for each open and
/// closed pair. Only open models carry the fixed cost.
pub fn cost_table(models: &[ModelUsage], usage: &FixedUsage, config: &CostConfig) -> Result<CostTable, CostError> {
    let fixed = fixed_cost(usage, config)?;
    let million = Decimal::from(1_000_000);
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        let cost_per_100 = match &model.pricing {
            Pricing::Open => variable_cost_per_100(model.seconds_per_report, config)?,
            Pricing::Closed {
                input_tokens_per_report,
                output_tokens_per_report,
            } => {
                let input = non_negative("input_tokens_per_report", *input_tokens_per_report)?;
                let output = non_negative("output_tokens_per_report", *output_tokens_per_report)?;
                non_negative("seconds_per_report", model.seconds_per_report)?;
                Decimal::ONE_HUNDRED
                    * (input * config.input_token_price_per_million + output * config.output_token_price_per_million)
                    / million
            }
        };
        rows.push(CostRow {
            name: model.name.clone(),
            open: model.pricing == Pricing::Open,
            seconds_per_report: model.seconds_per_report,
            cost_per_100,
        });
    }
    let mut break_even = Vec::new();
    for open in rows.iter().filter(|r| r.open) {
        for closed in rows.iter().filter(|r| !r.open) {
            break_even.push(BreakEven {
                open: open.name.clone(),
                closed: closed.name.clone(),
                reports: break_even_reports(
                    fixed,
                    open.cost_per_100 / Decimal::ONE_HUNDRED,
                    closed.cost_per_100 / Decimal::ONE_HUNDRED,
                )
                .ok(),
            });
        }
    }
    Ok(CostTable {
        fixed_cost: fixed,
        rows,
        break_even,
    })
}
