//! Agreement between readers and each model source, laid out as one row per
//! reader and one column group per model.

use std::collections::{BTreeMap, HashMap};

use cystscribe_core::evalstats::{
    adjust_family, cohen_kappa, fleiss_exchangeability_test, fleiss_kappa, percent_agreement, ExchangeScheme,
    KappaBand, Permutation, StatsError, TestResult,
};
use cystscribe_core::risk::RiskCategory;
use serde::{Deserialize, Serialize};

use crate::log::ReaderAnnotation;
use crate::study::Study;

/// A statistic, or why it could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: Option<f64>,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band: Option<KappaBand>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Cell {
    fn of(result: Result<f64, StatsError>, n: usize) -> Self {
        match result {
            Ok(value) => Cell {
                value: Some(value),
                n,
                band: None,
                error: None,
            },
            Err(e) => Cell {
                value: None,
                n,
                band: None,
                error: Some(e.to_string()),
            },
        }
    }

    fn kappa(result: Result<f64, StatsError>, n: usize) -> Self {
        let mut cell = Cell::of(result, n);
        cell.band = cell.value.map(KappaBand::of);
        cell
    }

    fn missing(n: usize, why: &str) -> Self {
        Cell {
            value: None,
            n,
            band: None,
            error: Some(why.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderVsModel {
    pub reader_id: String,
    /// Share of cases where the reader's category equals the model's, in percent.
    pub percent_agreement: Cell,
    pub cohen_kappa: Cell,
    /// Share of cases the reader marked as agreeing with the model, in percent.
    pub marked_agree: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceAgreement {
    pub model_source: String,
    pub readers: Vec<ReaderVsModel>,
    /// Cases of this source answered by every reader.
    pub complete_cases: usize,
    pub fleiss_readers: Cell,
    pub fleiss_with_model: Cell,
    /// Holm-adjusted across model sources.
    pub exchangeability: Option<TestResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exchangeability_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub readers: Vec<String>,
    pub annotations: usize,
    /// Readers alone, over every case-and-source pair all of them answered.
    pub fleiss_readers: Cell,
    pub sources: Vec<SourceAgreement>,
}

pub fn summarize(study: &Study, annotations: &[ReaderAnnotation]) -> AgreementSummary {
    let model: HashMap<(&str, &str), RiskCategory> = study
        .items
        .iter()
        .map(|i| ((i.case_id.as_str(), i.model_source.as_str()), i.model_category))
        .collect();
    let readers: Vec<String> = study.reader_ids().map(str::to_string).collect();
    // (source, case) -> reader -> category
    let mut grid: BTreeMap<(&str, &str), HashMap<&str, RiskCategory>> = BTreeMap::new();
    for a in annotations {
        grid.entry((a.model_source.as_str(), a.case_id.as_str()))
            .or_default()
            .insert(a.reader_id.as_str(), a.reader_category);
    }
    let complete_row = |answers: &HashMap<&str, RiskCategory>| -> Option<Vec<RiskCategory>> {
        readers.iter().map(|r| answers.get(r.as_str()).copied()).collect()
    };
    let enough_readers = readers.len() >= 2;

    let all_rows: Vec<Vec<RiskCategory>> = grid.values().filter_map(complete_row).collect();
    let fleiss_overall = if enough_readers {
        Cell::kappa(fleiss_kappa(&all_rows), all_rows.len())
    } else {
        Cell::missing(all_rows.len(), "at least two readers are required")
    };

    let perm = Permutation {
        n_perm: study.config.n_perm,
        seed: study.config.seed,
    };
    let mut sources = Vec::new();
    for source in study.model_sources() {
        let mut per_reader = Vec::new();
        for reader in &readers {
            let mine: Vec<&ReaderAnnotation> = annotations
                .iter()
                .filter(|a| &a.model_source == source && &a.reader_id == reader)
                .collect();
            let theirs: Vec<RiskCategory> = mine.iter().map(|a| a.reader_category).collect();
            let models: Vec<RiskCategory> = mine
                .iter()
                .map(|a| model[&(a.case_id.as_str(), a.model_source.as_str())])
                .collect();
            let flags: Vec<bool> = mine.iter().map(|a| a.agrees_with_model).collect();
            let n = mine.len();
            per_reader.push(ReaderVsModel {
                reader_id: reader.clone(),
                percent_agreement: Cell::of(percent_agreement(&theirs, &models).map(|p| 100.0 * p), n),
                cohen_kappa: Cell::kappa(cohen_kappa(&theirs, &models), n),
                marked_agree: Cell::of(percent_agreement(&flags, &vec![true; n]).map(|p| 100.0 * p), n),
            });
        }

        let mut rows = Vec::new();
        let mut model_column = Vec::new();
        for ((s, case), answers) in &grid {
            if s != source {
                continue;
            }
            if let Some(row) = complete_row(answers) {
                rows.push(row);
                model_column.push(model[&(*case, *s)]);
            }
        }
        let n = rows.len();
        let (fleiss_readers, fleiss_with_model, exchangeability, exchangeability_error) = if !enough_readers {
            let why = "at least two readers are required";
            (
                Cell::missing(n, why),
                Cell::missing(n, why),
                None,
                Some(why.to_string()),
            )
        } else {
            match fleiss_exchangeability_test(&rows, &model_column, ExchangeScheme::PerItemSwap, &perm) {
                Ok(r) => (
                    Cell::kappa(Ok(r.kappa_readers), n),
                    Cell::kappa(Ok(r.kappa_with_model), n),
                    Some(r.test),
                    None,
                ),
                Err(e) => (
                    Cell::kappa(fleiss_kappa(&rows), n),
                    Cell::missing(n, &e.to_string()),
                    None,
                    Some(e.to_string()),
                ),
            }
        };
        sources.push(SourceAgreement {
            model_source: source.clone(),
            readers: per_reader,
            complete_cases: n,
            fleiss_readers,
            fleiss_with_model,
            exchangeability,
            exchangeability_error,
        });
    }

    let mut tests: Vec<TestResult> = sources.iter().filter_map(|s| s.exchangeability.clone()).collect();
    if !tests.is_empty() && adjust_family(&mut tests, study.config.alpha).is_ok() {
        let mut adjusted = tests.into_iter();
        for s in sources.iter_mut().filter(|s| s.exchangeability.is_some()) {
            s.exchangeability = adjusted.next();
        }
    }

    AgreementSummary {
        readers,
        annotations: annotations.len(),
        fleiss_readers: fleiss_overall,
        sources,
    }
}
