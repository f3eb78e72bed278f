//! Deterministic re-computation of the fields a model is asked to calculate,
//! and an audit that compares them against what the model returned.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grounding::ErrorCategory;
use crate::schema::{GrowthDirection, PclFeatureRecord};

/// Growth at or above this rate (mm/year) counts as an increase.
pub const GROWTH_RATE_THRESHOLD_MM_PER_YEAR: f64 = 2.5;

/// Main duct calibers above this size (mm) are dilated unless the report says otherwise.
pub const DUCT_DILATION_THRESHOLD_MM: f64 = 4.0;

// 30.44 days per month, as the exact ratio 3044/100 = 761/25.
const MONTH_NUMERATOR: i64 = 25;
const MONTH_DENOMINATOR: i64 = 761;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeriveError {
    #[error("prior study {prior} is after current study {current}")]
    PriorAfterCurrent { prior: NaiveDate, current: NaiveDate },
    #[error("time interval is zero months; growth rate is undefined")]
    ZeroInterval,
    #[error("year {0} is outside the supported range")]
    ImplausibleYear(i32),
    #[error("unrecognized date {0:?}; expected YYYY-MM-DD or M/D/YYYY")]
    BadDate(String),
    #[error("growth value {0} is not finite")]
    NonFiniteGrowth(f64),
}

/// Current study (report signature date) and the prior study it is compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDatePair {
    pub current_date: NaiveDate,
    pub prior_date: NaiveDate,
}

impl StudyDatePair {
    pub fn new(current_date: NaiveDate, prior_date: NaiveDate) -> Self {
        StudyDatePair {
            current_date,
            prior_date,
        }
    }

    /// Calendar-day gap between the two studies.
    pub fn days_between(&self) -> Result<i64, DeriveError> {
        let days = (self.current_date - self.prior_date).num_days();
        if days < 0 {
            Err(DeriveError::PriorAfterCurrent {
                prior: self.prior_date,
                current: self.current_date,
            })
        } else {
            Ok(days)
        }
    }
}

/// Full months between two studies: `floor(days / 30.44)`.
pub fn time_interval_months(dates: &StudyDatePair) -> Result<u32, DeriveError> {
    Ok(months_from_days(dates.days_between()?))
}

/// `floor(days / 30.44)` in exact integer arithmetic.
pub fn months_from_days(days: i64) -> u32 {
    debug_assert!(days >= 0);
    (days * MONTH_NUMERATOR / MONTH_DENOMINATOR) as u32
}

/// Prior study date to assume when only the year is known.
pub fn year_only_prior_date(year: i32) -> Result<NaiveDate, DeriveError> {
    if !(1900..=2200).contains(&year) {
        return Err(DeriveError::ImplausibleYear(year));
    }
    NaiveDate::from_ymd_opt(year, 12, 30).ok_or(DeriveError::ImplausibleYear(year))
}

/// Parses `YYYY-MM-DD` or US-style `M/D/YYYY`.
pub fn parse_study_date(text: &str) -> Result<NaiveDate, DeriveError> {
    let text = text.trim();
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(text, "%m/%d/%Y"))
        .ok()
        .filter(|d| d.year() >= 1000)
        .ok_or_else(|| DeriveError::BadDate(text.to_owned()))
}

/// Annualized growth in mm/year.
pub fn growth_rate_mm_per_year(growth_value_mm: f64, time_interval_months: u32) -> Result<f64, DeriveError> {
    if !growth_value_mm.is_finite() {
        return Err(DeriveError::NonFiniteGrowth(growth_value_mm));
    }
    if time_interval_months == 0 {
        return Err(DeriveError::ZeroInterval);
    }
    Ok(growth_value_mm * 12.0 / f64::from(time_interval_months))
}

/// Classifies growth: any shrinkage is a decrease, a rate of at least
/// 2.5 mm/year is an increase, everything else is stable.
pub fn growth_direction(growth_value_mm: f64, time_interval_months: u32) -> Result<GrowthDirection, DeriveError> {
    let rate = growth_rate_mm_per_year(growth_value_mm, time_interval_months)?;
    Ok(if growth_value_mm < 0.0 {
        GrowthDirection::Decrease
    } else if rate >= GROWTH_RATE_THRESHOLD_MM_PER_YEAR {
        GrowthDirection::Increase
    } else {
        GrowthDirection::Stable
    })
}

/// Dilation flag when the report gives a caliber. An explicit statement
/// ("dilated", "normal caliber") takes precedence over the size rule.
pub fn duct_dilated_default(caliber_mm: Option<f64>, explicit_mention: Option<bool>) -> bool {
    match (explicit_mention, caliber_mm) {
        (Some(explicit), _) => explicit,
        (None, Some(size)) => size > DUCT_DILATION_THRESHOLD_MM,
        (None, None) => false,
    }
}

pub fn cm_to_mm(value_cm: f64) -> f64 {
    value_cm * 10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    /// Plausibly correct; the report may contain an explicit override.
    Warning,
    /// Cannot be decided automatically.
    NeedsReview,
    /// Contradicts deterministic re-computation.
    Error,
}

/// Disagreement between a model-computed field and its re-computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub field: String,
    pub category: ErrorCategory,
    pub severity: Severity,
    /// Re-computed value, JSON-encoded; `None` when nothing can be computed.
    pub expected: Option<String>,
    /// Value found in the record, JSON-encoded.
    pub found: Option<String>,
    pub message: String,
}

fn json_opt<T: ToString>(value: Option<T>) -> Option<String> {
    value.map(|v| v.to_string())
}

/// Compares the computed fields of `record` with their re-computation.
/// `dates` is the current/prior study pair when known.
pub fn audit_record(record: &PclFeatureRecord, dates: Option<&StudyDatePair>) -> Vec<AuditFinding> {
    let mut findings = Vec::new();
    // The interval is only expected when the record speaks of growth.
    let growth_discussed =
        record.time_interval_months.is_some() || record.growth_value_mm.is_some() || record.growth_direction.is_some();

    if let Some(dates) = dates.filter(|_| growth_discussed) {
        match time_interval_months(dates) {
            Err(err) => findings.push(AuditFinding {
                field: "time_interval_months".into(),
                category: ErrorCategory::TemporalMisalignment,
                severity: Severity::Error,
                expected: None,
                found: json_opt(record.time_interval_months),
                message: err.to_string(),
            }),
            Ok(expected) if record.time_interval_months != Some(expected) => {
                let days = dates.days_between().unwrap_or_default();
                let (category, severity) = match record.time_interval_months {
                    Some(_) => (ErrorCategory::Calculation, Severity::Error),
                    None => (ErrorCategory::UnderExtraction, Severity::Warning),
                };
                findings.push(AuditFinding {
                    field: "time_interval_months".into(),
                    category,
                    severity,
                    expected: Some(expected.to_string()),
                    found: json_opt(record.time_interval_months),
                    message: format!(
                        "{} to {} is {days} days, which is {expected} full months",
                        dates.prior_date, dates.current_date
                    ),
                })
            }
            Ok(_) => {}
        }
    }

    if let (Some(growth), Some(interval)) = (record.growth_value_mm, record.time_interval_months) {
        let found = record.growth_direction.map(|d| format!("\"{d}\""));
        match growth_direction(growth, interval) {
            Ok(expected) if record.growth_direction != Some(expected) => {
                let rate = growth * 12.0 / f64::from(interval);
                findings.push(AuditFinding {
                    field: "growth_direction".into(),
                    category: ErrorCategory::Calculation,
                    severity: Severity::Error,
                    expected: Some(format!("\"{expected}\"")),
                    found,
                    message: format!("{growth} mm over {interval} months is {rate:.2} mm/year"),
                });
            }
            Ok(_) => {}
            Err(err) => findings.push(AuditFinding {
                field: "growth_direction".into(),
                category: ErrorCategory::Calculation,
                severity: Severity::NeedsReview,
                expected: None,
                found,
                message: err.to_string(),
            }),
        }
    }

    if let Some(size) = record.main_duct_caliber_size_mm {
        let expected = duct_dilated_default(Some(size), None);
        if record.main_duct_caliber_dilated != expected {
            findings.push(AuditFinding {
                field: "main_duct_caliber_dilated".into(),
                category: ErrorCategory::Calculation,
                severity: Severity::Warning,
                expected: Some(expected.to_string()),
                found: Some(record.main_duct_caliber_dilated.to_string()),
                message: format!(
                    "caliber {size} mm against the {DUCT_DILATION_THRESHOLD_MM} mm default; \
                     check the report for an explicit description"
                ),
            });
        }
    }

    findings
}
