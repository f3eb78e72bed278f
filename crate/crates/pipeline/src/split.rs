use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ReportDocument;
use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, PipelineError> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PipelineError::Fractions(format!("{name} = {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Fractions(format!("fractions sum to {sum}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<ReportDocument>,
    pub val: Vec<ReportDocument>,
    pub test: Vec<ReportDocument>,
}

impl PatientSplit {
    pub fn patient_counts(&self) -> [usize; 3] {
        let count = |docs: &[ReportDocument]| {
            docs.iter()
                .map(|d| d.patient_id.as_str())
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        };
        [count(&self.train), count(&self.val), count(&self.test)]
    }
}

fn patient_key(seed: u64, patient_id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(patient_id.as_bytes());
    hasher.finalize().into()
}

/// Partitions reports by patient. Patients are ordered by a seeded hash and
/// cut at `round(f * patients)`, so subset sizes sit within one patient of
/// their expectation. Report order within each subset follows the input.
pub fn patient_level_split(
    corpus: &[ReportDocument],
    fractions: SplitFractions,
    seed: u64,
) -> Result<PatientSplit, PipelineError> {
    fractions.validate()?;
    let mut patients: BTreeMap<&str, [u8; 32]> = BTreeMap::new();
    for doc in corpus {
        patients
            .entry(doc.patient_id.as_str())
            .or_insert_with(|| patient_key(seed, &doc.patient_id));
    }
    let mut order: Vec<(&[u8; 32], &str)> = patients.iter().map(|(p, k)| (k, *p)).collect();
    order.sort();
    let n = order.len() as f64;
    let train_end = (fractions.train * n).round() as usize;
    let val_end = (((fractions.train + fractions.val) * n).round() as usize).max(train_end);
    let subset: HashMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            (
                *p,
                if i < train_end {
                    0
                } else if i < val_end {
                    1
                } else {
                    2
                },
            )
        })
        .collect();

    let mut split = PatientSplit::default();
    for doc in corpus {
        match subset[doc.patient_id.as_str()] {
            0 => split.train.push(doc.clone()),
            1 => split.val.push(doc.clone()),
            _ => split.test.push(doc.clone()),
        }
    }
    Ok(split)
}
