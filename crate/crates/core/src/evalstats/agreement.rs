use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_one_p, Alternative, Permutation, StatsError, TestResult};

pub fn percent_agreement<L: PartialEq>(a: &[L], b: &[L]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Cohen's kappa with chance agreement from the product of marginals.
/// Returns 1.0 when both raters use one identical label throughout.
pub fn cohen_kappa<L: Ord>(a: &[L], b: &[L]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(StatsError::Empty);
    }
    let n = a.len() as i128;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as i128;
    let mut marg: BTreeMap<&L, (i128, i128)> = BTreeMap::new();
    for x in a {
        marg.entry(x).or_default().0 += 1;
    }
    for y in b {
        marg.entry(y).or_default().1 += 1;
    }
    let chance: i128 = marg.values().map(|(x, y)| x * y).sum();
    // (p_o - p_e) / (1 - p_e) with both scaled by n^2.
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((n * agree - chance) as f64 / denom as f64)
}

/// Fleiss' kappa for an items × raters matrix of labels.
/// Returns 1.0 when every rating in the matrix is the same label.
pub fn fleiss_kappa<L: Ord>(ratings: &[Vec<L>]) -> Result<f64, StatsError> {
    let first = ratings.first().ok_or(StatsError::Empty)?;
    let raters = first.len();
    if raters < 2 {
        return Err(StatsError::TooFewRaters);
    }
    let mut totals: BTreeMap<&L, i128> = BTreeMap::new();
    let mut sum_sq: i128 = 0;
    for (item, row) in ratings.iter().enumerate() {
        if row.len() != raters {
            return Err(StatsError::Ragged {
                item,
                expected: raters,
                found: row.len(),
            });
        }
        let mut counts: BTreeMap<&L, i128> = BTreeMap::new();
        for label in row {
            *counts.entry(label).or_default() += 1;
            *totals.entry(label).or_default() += 1;
        }
        sum_sq += counts.values().map(|c| c * c).sum::<i128>();
    }
    let items = ratings.len() as i128;
    let n = raters as i128;
    // P_bar = a / b and P_e = c / d, kept as integer ratios.
    let a = sum_sq - items * n;
    let b = items * n * (n - 1);
    let c: i128 = totals.values().map(|t| t * t).sum();
    let d = (items * n) * (items * n);
    if c == d {
        return Ok(1.0);
    }
    Ok((a * d - c * b) as f64 / (b * (d - c)) as f64)
}

/// Conventional verbal bands for kappa values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaBand {
    Poor,
    Slight,
    Fair,
    Moderate,
    Substantial,
    AlmostPerfect,
}

impl KappaBand {
    /// Bands close on the right: 0.20 is slight, 0.80 substantial, and
    /// anything above 0.80 almost perfect.
    pub fn of(kappa: f64) -> KappaBand {
        if kappa < 0.0 {
            KappaBand::Poor
        } else if kappa <= 0.20 {
            KappaBand::Slight
        } else if kappa <= 0.40 {
            KappaBand::Fair
        } else if kappa <= 0.60 {
            KappaBand::Moderate
        } else if kappa <= 0.80 {
            KappaBand::Substantial
        } else {
            KappaBand::AlmostPerfect
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KappaBand::Poor => "poor",
            KappaBand::Slight => "slight",
            KappaBand::Fair => "fair",
            KappaBand::Moderate => "moderate",
            KappaBand::Substantial => "substantial",
            KappaBand::AlmostPerfect => "almost perfect",
        }
    }
}

impl fmt::Display for KappaBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How null replicates are drawn when testing whether an extra rater is
/// exchangeable with the existing ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeScheme {
    /// Per item, swap the extra rater's label with a uniformly chosen reader's.
    #[default]
    PerItemSwap,
    /// Per replicate, treat one uniformly chosen rater (possibly the extra
    /// one) as the outsider for every item.
    RaterSubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeabilityResult {
    pub kappa_readers: f64,
    pub kappa_with_model: f64,
    pub test: TestResult,
}

/// Two-sided test of `|kappa(readers + model) - kappa(readers)|` under the
/// null that the model is exchangeable with a reader.
pub fn fleiss_exchangeability_test<L: Ord + Clone>(
    readers: &[Vec<L>],
    model: &[L],
    scheme: ExchangeScheme,
    perm: &Permutation,
) -> Result<ExchangeabilityResult, StatsError> {
    if readers.len() != model.len() {
        return Err(StatsError::LengthMismatch {
            left: readers.len(),
            right: model.len(),
        });
    }
    let kappa_readers = fleiss_kappa(readers)?;
    let combined: Vec<Vec<L>> = readers
        .iter()
        .zip(model)
        .map(|(row, m)| {
            let mut row = row.clone();
            row.push(m.clone());
            row
        })
        .collect();
    let kappa_with_model = fleiss_kappa(&combined)?;
    let observed = (kappa_with_model - kappa_readers).abs();

    let r = readers[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(perm.seed);
    let mut subset: Vec<Vec<L>> = readers.to_vec();
    let mut extreme = 0usize;
    for _ in 0..perm.n_perm {
        match scheme {
            ExchangeScheme::PerItemSwap => {
                for (row, full) in subset.iter_mut().zip(&combined) {
                    let j = rng.random_range(0..r);
                    row.clone_from_slice(&full[..r]);
                    row[j] = full[r].clone();
                }
            }
            ExchangeScheme::RaterSubset => {
                let outsider = rng.random_range(0..=r);
                for (row, full) in subset.iter_mut().zip(&combined) {
                    row.clear();
                    row.extend(
                        full.iter()
                            .enumerate()
                            .filter(|(k, _)| *k != outsider)
                            .map(|(_, l)| l.clone()),
                    );
                }
            }
        }
        // The four-rater kappa does not change under either scheme.
        let stat = (kappa_with_model - fleiss_kappa(&subset)?).abs();
        if stat >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok(ExchangeabilityResult {
        kappa_readers,
        kappa_with_model,
        test: TestResult::new(
            "fleiss_exchangeability",
            observed,
            add_one_p(extreme, perm.n_perm),
            Alternative::TwoSided,
            readers.len(),
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    // Direct floating-point evaluation of the published formula.
    fn fleiss_oracle(ratings: &[Vec<u8>]) -> f64 {
        let n = ratings[0].len() as f64;
        let items = ratings.len() as f64;
        let cats: Vec<u8> = (0..10).collect();
        let mut p_bar = 0.0;
        let mut p_j = vec![0.0; cats.len()];
        for row in ratings {
            let mut s = 0.0;
            for &c in &cats {
                let nij = row.iter().filter(|&&x| x == c).count() as f64;
                s += nij * (nij - 1.0);
                p_j[c as usize] += nij / (items * n);
            }
            p_bar += s / (n * (n - 1.0)) / items;
        }
        let p_e: f64 = p_j.iter().map(|p| p * p).sum();
        (p_bar - p_e) / (1.0 - p_e)
    }

    fn cohen_oracle(a: &[u8], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let po = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
        let pe: f64 = (0..10u8)
            .map(|c| {
                let ca = a.iter().filter(|&&x| x == c).count() as f64 / n;
                let cb = b.iter().filter(|&&x| x == c).count() as f64 / n;
                ca * cb
            })
            .sum();
        (po - pe) / (1.0 - pe)
    }

    #[test]
    fn cohen_examples() {
        assert_eq!(cohen_kappa(&[1, 2, 1, 2], &[1, 2, 1, 2]).unwrap(), 1.0);
        // p_o = 0.5, p_e = 0.5 -> 0.
        assert_eq!(cohen_kappa(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&[3, 3], &[3, 3]).unwrap(), 1.0);
        assert!(cohen_kappa::<u8>(&[], &[]).is_err());
        assert!(cohen_kappa(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn cohen_is_near_zero_for_independent_raters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<u8> = (0..20_000).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<u8> = (0..20_000).map(|_| rng.random_range(0..4)).collect();
        // Standard error is about 0.008 at this size.
        assert!(cohen_kappa(&a, &b).unwrap().abs() < 0.03);
    }

    #[test]
    fn fleiss_examples() {
        let all_agree = vec![vec![1u8, 1, 1], vec![2, 2, 2], vec![3, 3, 3]];
        assert_eq!(fleiss_kappa(&all_agree).unwrap(), 1.0);
        let toy = vec![vec![1u8, 1, 2], vec![2, 2, 2], vec![1, 3, 3], vec![1, 1, 1]];
        assert!((fleiss_kappa(&toy).unwrap() - fleiss_oracle(&toy)).abs() < 1e-12);
        assert_eq!(fleiss_kappa(&[vec![4u8, 4], vec![4, 4]]).unwrap(), 1.0);
        assert!(matches!(
            fleiss_kappa(&[vec![1u8, 1], vec![1]]),
            Err(StatsError::Ragged { item: 1, .. })
        ));
        assert_eq!(fleiss_kappa(&[vec![1u8]]), Err(StatsError::TooFewRaters));
    }

    #[test]
    fn bands() {
        assert_eq!(KappaBand::of(0.888), KappaBand::AlmostPerfect);
        assert_eq!(KappaBand::of(0.893), KappaBand::AlmostPerfect);
        assert_eq!(KappaBand::of(0.897), KappaBand::AlmostPerfect);
        assert_eq!(KappaBand::of(0.80), KappaBand::Substantial);
        assert_eq!(KappaBand::of(0.5), KappaBand::Moderate);
        assert_eq!(KappaBand::of(0.3), KappaBand::Fair);
        assert_eq!(KappaBand::of(0.0), KappaBand::Slight);
        assert_eq!(KappaBand::of(-0.1), KappaBand::Poor);
    }

    #[test]
    fn exchangeability_examples() {
        let perm = Permutation { n_perm: 2000, seed: 1 };
        let readers = vec![vec![1u8, 1, 1], vec![2, 2, 2], vec![3, 3, 3], vec![1, 1, 1]];
        let model = vec![1u8, 2, 3, 1];
        let r = fleiss_exchangeability_test(&readers, &model, ExchangeScheme::PerItemSwap, &perm).unwrap();
        assert_eq!(r.test.statistic, 0.0);
        assert_eq!(r.test.p_value, 1.0);

        let readers = vec![
            vec![1u8, 1, 2],
            vec![2, 2, 2],
            vec![1, 3, 3],
            vec![1, 1, 1],
            vec![3, 3, 2],
            vec![2, 1, 2],
        ];
        let model: Vec<u8> = readers.iter().map(|r| r[0]).collect();
        let r = fleiss_exchangeability_test(&readers, &model, ExchangeScheme::PerItemSwap, &perm).unwrap();
        let combined: Vec<Vec<u8>> = readers.iter().map(|r| vec![r[0], r[1], r[2], r[0]]).collect();
        let gap = (fleiss_oracle(&combined) - fleiss_oracle(&readers)).abs();
        assert!((r.test.statistic - gap).abs() < 1e-12);
        assert!(r.test.p_value > 0.2, "{}", r.test.p_value);
        let alt = fleiss_exchangeability_test(&readers, &model, ExchangeScheme::RaterSubset, &perm).unwrap();
        assert_eq!(alt.test.statistic, r.test.statistic);
    }

    proptest! {
        #[test]
        fn fleiss_matches_oracle_and_is_rater_order_invariant(
            rows in prop::collection::vec(prop::collection::vec(0u8..4, 3), 2..15),
            rotate in 0usize..3,
        ) {
            let k = fleiss_kappa(&rows).unwrap();
            let oracle = fleiss_oracle(&rows);
            if oracle.is_finite() {
                prop_assert!((k - oracle).abs() < 1e-12, "{} vs {}", k, oracle);
            }
            prop_assert!((-1.0..=1.0).contains(&k));
            let rotated: Vec<Vec<u8>> = rows.iter().map(|r| { let mut r = r.clone(); r.rotate_left(rotate); r }).collect();
            prop_assert_eq!(fleiss_kappa(&rotated).unwrap(), k);
        }

        #[test]
        fn cohen_matches_oracle(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40)) {
            let (a, b): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let k = cohen_kappa(&a, &b).unwrap();
            let oracle = cohen_oracle(&a, &b);
            if oracle.is_finite() {
                prop_assert!((k - oracle).abs() < 1e-12);
            }
            prop_assert!((-1.0..=1.0).contains(&k));
            prop_assert_eq!(k, cohen_kappa(&b, &a).unwrap());
        }
    }
}
