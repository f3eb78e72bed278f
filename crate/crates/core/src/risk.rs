//! Guideline risk categories for a validated feature record.
//!
//! High-risk stigmata take precedence over worrisome features, which take
//! precedence over the special categories and the low-risk default.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::derive::{growth_rate_mm_per_year, GROWTH_RATE_THRESHOLD_MM_PER_YEAR};
use crate::schema::{DifferentialDiagnosis, GrowthDirection, PclFeatureRecord};

pub const LARGE_CYST_MM: f64 = 30.0;
pub const DUCT_WORRISOME_MM: f64 = 5.0;
pub const DUCT_HIGH_RISK_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskCategory {
    NoCystCharacterized,
    MainDuctIpmnSuspected,
    #[serde(rename = "category_1_low_risk")]
    Category1LowRisk,
    #[serde(rename = "category_2_worrisome")]
    Category2Worrisome,
    #[serde(rename = "category_3_high_risk")]
    Category3HighRisk,
}

impl RiskCategory {
    pub const ALL: [RiskCategory; 5] = [
        RiskCategory::NoCystCharacterized,
        RiskCategory::MainDuctIpmnSuspected,
        RiskCategory::Category1LowRisk,
        RiskCategory::Category2Worrisome,
        RiskCategory::Category3HighRisk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskCategory::NoCystCharacterized => "no_cyst_characterized",
            RiskCategory::MainDuctIpmnSuspected => "main_duct_ipmn_suspected",
            RiskCategory::Category1LowRisk => "category_1_low_risk",
            RiskCategory::Category2Worrisome => "category_2_worrisome",
            RiskCategory::Category3HighRisk => "category_3_high_risk",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        RiskCategory::ALL.into_iter().find(|c| c.as_str() == text)
    }

    /// Severity order of the numbered categories (1, 2, 3); `None` for the
    /// special categories.
    pub fn numbered_rank(self) -> Option<u8> {
        match self {
            RiskCategory::Category1LowRisk => Some(1),
            RiskCategory::Category2Worrisome => Some(2),
            RiskCategory::Category3HighRisk => Some(3),
            _ => None,
        }
    }
}

impl fmt::Display for RiskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    EnhancingSolidComponent,
    MainDuctAtLeast10Mm,
    CystAtLeast30Mm,
    ThickenedWallOrSeptation,
    NonEnhancingMuralNodule,
    MainDuct5To10Mm,
    GrowthAtLeast2_5MmPerYear,
    MainDuctIpmnDifferential,
    NoCystDescribed,
}

impl Criterion {
    pub fn is_high_risk(self) -> bool {
        matches!(
            self,
            Criterion::EnhancingSolidComponent | Criterion::MainDuctAtLeast10Mm
        )
    }

    pub fn is_worrisome(self) -> bool {
        matches!(
            self,
            Criterion::CystAtLeast30Mm
                | Criterion::ThickenedWallOrSeptation
                | Criterion::NonEnhancingMuralNodule
                | Criterion::MainDuct5To10Mm
                | Criterion::GrowthAtLeast2_5MmPerYear
        )
    }
}

/// One criterion that fired, with the field values that fired it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggeredCriterion {
    pub criterion: Criterion,
    /// `(field, JSON value)` pairs.
    pub evidence: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskRationale {
    pub triggered: Vec<TriggeredCriterion>,
    /// Findings that did not affect the category, such as a pseudocyst.
    pub context: Vec<String>,
    pub warnings: Vec<String>,
}

impl RiskRationale {
    pub fn fired(&self, criterion: Criterion) -> bool {
        self.triggered.iter().any(|t| t.criterion == criterion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub category: RiskCategory,
    pub rationale: RiskRationale,
}

fn ev(field: &str, value: impl ToString) -> (String, String) {
    (field.to_owned(), value.to_string())
}

fn high_risk(record: &PclFeatureRecord) -> Vec<TriggeredCriterion> {
    let mut out = Vec::new();
    if record.enhancing_mural_nodule {
        out.push(TriggeredCriterion {
            criterion: Criterion::EnhancingSolidComponent,
            evidence: vec![ev("enhancing_mural_nodule", true)],
        });
    }
    if let Some(duct) = record.main_duct_caliber_size_mm {
        if duct >= DUCT_HIGH_RISK_MM {
            out.push(TriggeredCriterion {
                criterion: Criterion::MainDuctAtLeast10Mm,
                evidence: vec![ev("main_duct_caliber_size_mm", duct)],
            });
        }
    }
    out
}

fn worrisome(record: &PclFeatureRecord, warnings: &mut Vec<String>) -> Vec<TriggeredCriterion> {
    let mut out = Vec::new();
    if let Some(size) = record.size_mm {
        if size >= LARGE_CYST_MM {
            out.push(TriggeredCriterion {
                criterion: Criterion::CystAtLeast30Mm,
                evidence: vec![ev("size_mm", size)],
            });
        }
    }
    if record.thickened_wall || record.thickened_septation {
        let mut evidence = Vec::new();
        if record.thickened_wall {
            evidence.push(ev("thickened_wall", true));
        }
        if record.thickened_septation {
            evidence.push(ev("thickened_septation", true));
        }
        out.push(TriggeredCriterion {
            criterion: Criterion::ThickenedWallOrSeptation,
            evidence,
        });
    }
    if record.non_enhancing_mural_nodule {
        out.push(TriggeredCriterion {
            criterion: Criterion::NonEnhancingMuralNodule,
            evidence: vec![ev("non_enhancing_mural_nodule", true)],
        });
    }
    match record.main_duct_caliber_size_mm {
        Some(duct) if (DUCT_WORRISOME_MM..DUCT_HIGH_RISK_MM).contains(&duct) => out.push(TriggeredCriterion {
            criterion: Criterion::MainDuct5To10Mm,
            evidence: vec![ev("main_duct_caliber_size_mm", duct)],
        }),
        None if record.main_duct_caliber_dilated => {
            warnings.push("main duct marked dilated without a caliber; duct criterion not applied".to_owned())
        }
        _ => {}
    }

    let mut growth_evidence = Vec::new();
    if let (Some(growth), Some(months)) = (record.growth_value_mm, record.time_interval_months) {
        match growth_rate_mm_per_year(growth, months) {
            Ok(rate) if rate >= GROWTH_RATE_THRESHOLD_MM_PER_YEAR => {
                growth_evidence.push(ev("growth_value_mm", growth));
                growth_evidence.push(ev("time_interval_months", months));
            }
            Ok(_) => {}
            Err(err) => warnings.push(format!("growth rate not computed: {err}")),
        }
    }
    if record.growth_direction == Some(GrowthDirection::Increase) {
        growth_evidence.push(ev("growth_direction", "\"increase\""));
    }
    if !growth_evidence.is_empty() {
        out.push(TriggeredCriterion {
            criterion: Criterion::GrowthAtLeast2_5MmPerYear,
            evidence: growth_evidence,
        });
    }
    out
}

fn no_cyst(record: &PclFeatureRecord) -> bool {
    record.cyst_mentions.is_none() && record.size_mm.is_none() && matches!(record.num_cysts_measured, None | Some(0))
}

/// Assigns a risk category and explains why.
pub fn categorize(record: &PclFeatureRecord) -> RiskAssessment {
    let mut rationale = RiskRationale::default();
    if record.pseudocyst {
        rationale.context.push("pseudocyst".to_owned());
    }
    if record.serous_cystadenoma {
        rationale.context.push("serous_cystadenoma".to_owned());
    }

    let hrs = high_risk(record);
    let wf = worrisome(record, &mut rationale.warnings);
    let category = if !hrs.is_empty() {
        rationale.triggered = hrs;
        rationale.triggered.extend(wf);
        RiskCategory::Category3HighRisk
    } else if !wf.is_empty() {
        rationale.triggered = wf;
        RiskCategory::Category2Worrisome
    } else if let Some(dd) = record.differential_diagnosis.as_ref().filter(|dd| {
        dd.iter().any(|d| {
            matches!(
                d,
                DifferentialDiagnosis::MainDuctIpmn | DifferentialDiagnosis::MixedTypeIpmn
            )
        })
    }) {
        let listed: Vec<&str> = dd.iter().map(|d| d.as_str()).collect();
        rationale.triggered.push(TriggeredCriterion {
            criterion: Criterion::MainDuctIpmnDifferential,
            evidence: vec![ev("differential_diagnosis", format!("{listed:?}"))],
        });
        RiskCategory::MainDuctIpmnSuspected
    } else if no_cyst(record) {
        rationale.triggered.push(TriggeredCriterion {
            criterion: Criterion::NoCystDescribed,
            evidence: vec![
                ev("cyst_mentions", "null"),
                ev("size_mm", "null"),
                ev(
                    "num_cysts_measured",
                    record.num_cysts_measured.map_or("null".to_owned(), |n| n.to_string()),
                ),
            ],
        });
        RiskCategory::NoCystCharacterized
    } else {
        RiskCategory::Category1LowRisk
    };
    RiskAssessment { category, rationale }
}

pub fn categorize_batch(records: &[PclFeatureRecord]) -> Vec<RiskAssessment> {
    records.iter().map(categorize).collect()
}

/// Synthetic records spanning every category, each internally consistent
/// (they pass [`crate::derive::audit_record`] without findings).
pub fn fixture_records() -> Vec<(PclFeatureRecord, RiskCategory)> {
    use crate::schema::*;
    let low = PclFeatureRecord {
        cyst_mentions: Some(CystMentions::Single),
        num_cysts_measured: Some(1),
        size_mm: Some(15.0),
        morphology_type: Some(Morphology::Unilocular),
        location: Some(vec![PancreasRegion::Tail]),
        growth_value_mm: Some(1.0),
        time_interval_months: Some(12),
        growth_direction: Some(GrowthDirection::Stable),
        main_duct_communication: Some(DuctCommunication::No),
        main_duct_caliber_size_mm: Some(3.0),
        differential_diagnosis: Some(vec![DifferentialDiagnosis::SideBranchIpmn]),
        ..Default::default()
    };
    let growing = PclFeatureRecord {
        size_mm: Some(22.0),
        growth_value_mm: Some(2.0),
        time_interval_months: Some(9),
        growth_direction: Some(GrowthDirection::Increase),
        ..low.clone()
    };
    let large = PclFeatureRecord {
        cyst_mentions: Some(CystMentions::Multiple),
        num_cysts_measured: Some(2),
        size_mm: Some(31.0),
        location: Some(vec![PancreasRegion::Head, PancreasRegion::Body]),
        morphology_type: Some(Morphology::Septated),
        thickened_septation: true,
        growth_value_mm: None,
        time_interval_months: None,
        growth_direction: None,
        ..low.clone()
    };
    let high = PclFeatureRecord {
        size_mm: Some(8.0),
        enhancing_mural_nodule: true,
        main_duct_caliber_size_mm: Some(10.0),
        main_duct_caliber_dilated: true,
        main_duct_communication: Some(DuctCommunication::Yes),
        ..low.clone()
    };
    let main_duct = PclFeatureRecord {
        cyst_mentions: Some(CystMentions::Single),
        num_cysts_measured: Some(0),
        size_mm: None,
        location: Some(vec![PancreasRegion::Neck]),
        growth_value_mm: None,
        time_interval_months: None,
        growth_direction: None,
        main_duct_caliber_size_mm: Some(4.0),
        main_duct_communication: Some(DuctCommunication::Uncertain),
        differential_diagnosis: Some(vec![DifferentialDiagnosis::MainDuctIpmn]),
        ..low.clone()
    };
    let nothing = PclFeatureRecord {
        main_duct_caliber_size_mm: Some(2.0),
        pancreatitis: true,
        ..Default::default()
    };
    vec![
        (low, RiskCategory::Category1LowRisk),
        (growing, RiskCategory::Category2Worrisome),
        (large, RiskCategory::Category2Worrisome),
        (high, RiskCategory::Category3HighRisk),
        (main_duct, RiskCategory::MainDuctIpmnSuspected),
        (nothing, RiskCategory::NoCystCharacterized),
    ]
}
