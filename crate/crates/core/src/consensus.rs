//! Self-consistency aggregation: independent majority vote on every key
//! across sampled records.
//!
//! Votes are cast on canonical field fragments, so list order never splits a
//! vote. Ties go to a present value over `null`, then to the lexicographically
//! smallest fragment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{canonical_field_json, parse_record, FeatureKey, PclFeatureRecord, ValidationFailure};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("no samples to aggregate")]
    Empty,
    #[error("all {0} samples failed validation")]
    AllInvalid(usize),
    #[error("aggregated record failed validation: {0}")]
    Rebuild(#[from] ValidationFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteTally {
    /// Canonical fragment → number of samples voting for it.
    pub counts: BTreeMap<String, usize>,
    pub winner: String,
    /// Winner's count minus the runner-up's (the full count when unanimous).
    pub margin: usize,
    /// True when another value had the same count as the winner.
    pub tie: bool,
    pub total: usize,
}

impl VoteTally {
    pub fn winner_count(&self) -> usize {
        self.counts[&self.winner]
    }

    /// Fraction of samples that voted for the winner.
    pub fn stability(&self) -> f64 {
        self.winner_count() as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub record: PclFeatureRecord,
    pub tallies: BTreeMap<FeatureKey, VoteTally>,
    /// Samples excluded because they failed validation.
    pub dropped: usize,
}

/// Tie-break order: higher count first, then present before null, then the
/// smaller fragment.
fn better(a: (&str, usize), b: (&str, usize)) -> bool {
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    let (a_null, b_null) = (a.0 == "null", b.0 == "null");
    if a_null != b_null {
        return b_null;
    }
    a.0 < b.0
}

/// Tallies one key's votes.
pub fn tally(fragments: &[String]) -> Option<VoteTally> {
    if fragments.is_empty() {
        return None;
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for f in fragments {
        *counts.entry(f.clone()).or_default() += 1;
    }
    let mut winner: Option<(&str, usize)> = None;
    for (value, &count) in &counts {
        if winner.is_none_or(|w| better((value, count), w)) {
            winner = Some((value, count));
        }
    }
    let (winner, top) = winner?;
    let runner_up = counts
        .iter()
        .filter(|(v, _)| v.as_str() != winner)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    Some(VoteTally {
        winner: winner.to_owned(),
        margin: top - runner_up,
        tie: runner_up == top,
        total: fragments.len(),
        counts,
    })
}

/// Aggregates validated samples key by key.
pub fn aggregate(samples: &[PclFeatureRecord]) -> Result<Aggregate, ConsensusError> {
    if samples.is_empty() {
        return Err(ConsensusError::Empty);
    }
    let mut tallies = BTreeMap::new();
    let mut body = Vec::with_capacity(FeatureKey::ALL.len());
    for key in FeatureKey::ALL {
        let fragments: Vec<String> = samples.iter().map(|s| canonical_field_json(s, key)).collect();
        let t = tally(&fragments).ok_or(ConsensusError::Empty)?;
        body.push(format!("\"{}\":{}", key.as_str(), t.winner));
        tallies.insert(key, t);
    }
    let record = parse_record(&format!("{{{}}}", body.join(",")))?.record;
    Ok(Aggregate {
        record,
        tallies,
        dropped: 0,
    })
}

/// Validates raw completion texts, drops the invalid ones and aggregates the rest.
pub fn aggregate_texts<S: AsRef<str>>(texts: &[S]) -> Result<Aggregate, ConsensusError> {
    if texts.is_empty() {
        return Err(ConsensusError::Empty);
    }
    let valid: Vec<PclFeatureRecord> = texts
        .iter()
        .filter_map(|t| parse_record(t.as_ref()).ok().map(|p| p.record))
        .collect();
    if valid.is_empty() {
        return Err(ConsensusError::AllInvalid(texts.len()));
    }
    let mut agg = aggregate(&valid)?;
    agg.dropped = texts.len() - valid.len();
    Ok(agg)
}

/// Per-key fraction of samples equal to the winner.
pub fn stability(samples: &[PclFeatureRecord]) -> Result<BTreeMap<FeatureKey, f64>, ConsensusError> {
    Ok(aggregate(samples)?
        .tallies
        .into_iter()
        .map(|(k, t)| (k, t.stability()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tests::{arb_record, sample_record};
    use crate::schema::{canonical_serialize, PancreasRegion};
    use proptest::prelude::*;

    fn with_size(size: f64) -> PclFeatureRecord {
        PclFeatureRecord {
            size_mm: Some(size),
            ..sample_record()
        }
    }

    #[test]
    fn unanimity() {
        let samples = vec![sample_record(); 40];
        let agg = aggregate(&samples).unwrap();
        assert_eq!(agg.record, sample_record());
        for t in agg.tallies.values() {
            assert_eq!(t.margin, 40);
            assert!(!t.tie);
            assert_eq!(t.stability(), 1.0);
        }
    }

    #[test]
    fn strict_majority_and_tie() {
        let mut samples = vec![with_size(12.0); 25];
        samples.extend(vec![with_size(15.0); 15]);
        let agg = aggregate(&samples).unwrap();
        assert_eq!(agg.record.size_mm, Some(12.0));
        assert_eq!(agg.tallies[&FeatureKey::SizeMm].margin, 10);

        let mut samples = vec![with_size(15.0); 20];
        samples.extend(vec![with_size(12.0); 20]);
        let agg = aggregate(&samples).unwrap();
        let t = &agg.tallies[&FeatureKey::SizeMm];
        assert!(t.tie);
        assert_eq!(t.margin, 0);
        assert_eq!(agg.record.size_mm, Some(12.0));
        assert_eq!(t.stability(), 0.5);
    }

    #[test]
    fn absent_loses_ties() {
        let mut samples = vec![
            PclFeatureRecord {
                size_mm: None,
                ..sample_record()
            };
            2
        ];
        samples.extend(vec![with_size(99.0); 2]);
        assert_eq!(aggregate(&samples).unwrap().record.size_mm, Some(99.0));
    }

    #[test]
    fn list_order_pools() {
        let a = sample_record();
        let b = PclFeatureRecord {
            location: Some(vec![PancreasRegion::Neck, PancreasRegion::Head]),
            ..sample_record()
        };
        let agg = aggregate(&[a, b]).unwrap();
        assert_eq!(agg.tallies[&FeatureKey::Location].counts.len(), 1);
    }

    #[test]
    fn stability_ratio() {
        let mut samples = vec![with_size(12.0); 30];
        samples.extend(vec![with_size(15.0); 10]);
        assert_eq!(stability(&samples).unwrap()[&FeatureKey::SizeMm], 0.75);
    }

    #[test]
    fn invalid_texts_are_dropped() {
        let good = canonical_serialize(&sample_record());
        let texts = vec![good.clone(), "not json".to_owned(), good];
        let agg = aggregate_texts(&texts).unwrap();
        assert_eq!(agg.dropped, 1);
        assert_eq!(agg.tallies[&FeatureKey::SizeMm].total, 2);
        assert_eq!(aggregate_texts(&["x"]), Err(ConsensusError::AllInvalid(1)));
        assert_eq!(aggregate(&[]), Err(ConsensusError::Empty));
    }

    // Counts every distinct fragment against every sample, then applies the
    // tie-break by sorting candidates.
    fn brute_force_mode(fragments: &[String]) -> String {
        let mut candidates: Vec<(usize, bool, String)> = fragments
            .iter()
            .map(|f| {
                let count = fragments.iter().filter(|g| *g == f).count();
                (count, f != "null", f.clone())
            })
            .collect();
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
        candidates[0].2.clone()
    }

    proptest! {
        #[test]
        fn matches_brute_force_mode(samples in prop::collection::vec(arb_record(), 1..12)) {
            let agg = aggregate(&samples).unwrap();
            for key in FeatureKey::ALL {
                let fragments: Vec<String> = samples.iter().map(|s| canonical_field_json(s, key)).collect();
                prop_assert_eq!(&agg.tallies[&key].winner, &brute_force_mode(&fragments));
                prop_assert_eq!(canonical_field_json(&agg.record, key), brute_force_mode(&fragments));
            }
        }

        #[test]
        fn permutation_invariant(samples in prop::collection::vec(arb_record(), 1..10), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = samples.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate(&samples).unwrap(), aggregate(&shuffled).unwrap());
        }

        #[test]
        fn majority_dominates(winner in arb_record(), others in prop::collection::vec(arb_record(), 0..10)) {
            let mut samples = vec![winner.clone(); others.len() + 1];
            samples.extend(others);
            let agg = aggregate(&samples).unwrap();
            prop_assert_eq!(canonical_serialize(&agg.record), canonical_serialize(&winner));
        }
    }
}
