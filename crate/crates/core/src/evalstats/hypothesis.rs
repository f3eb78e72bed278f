use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use super::{add_one_p, Alternative, Permutation, StatsError, TestResult};

/// Minimum non-zero pairs for the signed-rank test.
pub const WILCOXON_MIN_PAIRS: usize = 5;
/// Largest sample for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 25;

// Differences closer than this are treated as tied; accuracies computed
// through different float paths otherwise break ties by one ulp.
const TIE_EPS: f64 = 1e-12;

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && (values[order[j]] - values[order[i]]).abs() <= TIE_EPS {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired samples. Zero differences are
/// dropped; the statistic is the sum of ranks of positive differences.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| d.abs() > TIE_EPS)
        .collect();
    let n = diffs.len();
    if n < WILCOXON_MIN_PAIRS {
        return Err(StatsError::TooFewPairs {
            nonzero: n,
            required: WILCOXON_MIN_PAIRS,
        });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let (upper, lower, method) = if n <= WILCOXON_EXACT_MAX {
        let (u, l) = exact_tails(&ranks, w_plus);
        (u, l, "wilcoxon_exact")
    } else {
        let (u, l) = normal_tails(&ranks, w_plus);
        (u, l, "wilcoxon_normal")
    };
    let p = match alternative {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    };
    Ok(TestResult::new(method, w_plus, p, alternative, n))
}

/// P(W+ >= w) and P(W+ <= w) under the sign-flip null, by dynamic
/// programming over doubled (integer) ranks.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let w = (w_plus * 2.0).round() as usize;
    let all = (1u64 << ranks.len()) as f64;
    let upper: u64 = ways[w..].iter().sum();
    let lower: u64 = ways[..=w].iter().sum();
    (upper as f64 / all, lower as f64 / all)
}

/// Normal approximation with tie correction and a 0.5 continuity correction.
fn normal_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let sd = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let upper = 1.0 - normal.cdf((w_plus - mean - 0.5) / sd);
    let lower = normal.cdf((w_plus - mean + 0.5) / sd);
    (upper.min(1.0), lower.min(1.0))
}

/// Paired permutation test on per-case correctness. The statistic is
/// accuracy(a) − accuracy(b); the null flips each case's difference sign.
pub fn permutation_test_paired(
    correct_a: &[bool],
    correct_b: &[bool],
    alternative: Alternative,
    perm: &Permutation,
) -> Result<TestResult, StatsError> {
    if correct_a.len() != correct_b.len() {
        return Err(StatsError::LengthMismatch {
            left: correct_a.len(),
            right: correct_b.len(),
        });
    }
    if correct_a.is_empty() {
        return Err(StatsError::Empty);
    }
    let diffs: Vec<i64> = correct_a
        .iter()
        .zip(correct_b)
        .map(|(&a, &b)| i64::from(a) - i64::from(b))
        .filter(|&d| d != 0)
        .collect();
    let observed: i64 = diffs.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(perm.seed);
    let mut extreme = 0usize;
    for _ in 0..perm.n_perm {
        let s: i64 = diffs.iter().map(|&d| if rng.random::<bool>() { d } else { -d }).sum();
        let hit = match alternative {
            Alternative::Greater => s >= observed,
            Alternative::Less => s <= observed,
            Alternative::TwoSided => s.abs() >= observed.abs(),
        };
        extreme += usize::from(hit);
    }
    Ok(TestResult::new(
        "permutation_paired",
        observed as f64 / correct_a.len() as f64,
        add_one_p(extreme, perm.n_perm),
        alternative,
        correct_a.len(),
    ))
}

struct MacroF1 {
    truth: Vec<usize>,
    support: Vec<usize>,
}

impl MacroF1 {
    /// Macro F1 over labels with support; `pred` holds label indices, with
    /// `usize::MAX` for labels that never occur in truth.
    fn eval(&self, pred: &[usize]) -> f64 {
        let k = self.support.len();
        let mut tp = vec![0usize; k];
        let mut predicted = vec![0usize; k];
        for (&p, &t) in pred.iter().zip(&self.truth) {
            if p < k {
                predicted[p] += 1;
                if p == t {
                    tp[p] += 1;
                }
            }
        }
        let mut sum = 0.0;
        for j in 0..k {
            let precision = if predicted[j] == 0 {
                0.0
            } else {
                tp[j] as f64 / predicted[j] as f64
            };
            let recall = tp[j] as f64 / self.support[j] as f64;
            if precision + recall > 0.0 {
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        sum / k as f64
    }
}

/// Two-sided permutation test on |macroF1(a) − macroF1(b)|; the null swaps
/// the two models' predictions case by case.
pub fn permutation_test_f1<L: Ord + Clone>(
    pred_a: &[L],
    pred_b: &[L],
    truth: &[L],
    perm: &Permutation,
) -> Result<TestResult, StatsError> {
    for other in [pred_a.len(), pred_b.len()] {
        if other != truth.len() {
            return Err(StatsError::LengthMismatch {
                left: other,
                right: truth.len(),
            });
        }
    }
    if truth.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut labels: Vec<L> = truth.to_vec();
    labels.sort();
    labels.dedup();
    let index = |l: &L| labels.binary_search(l).unwrap_or(usize::MAX);
    let a: Vec<usize> = pred_a.iter().map(index).collect();
    let b: Vec<usize> = pred_b.iter().map(index).collect();
    let t: Vec<usize> = truth.iter().map(index).collect();
    let mut support = vec![0usize; labels.len()];
    for &j in &t {
        support[j] += 1;
    }
    let scorer = MacroF1 { truth: t, support };
    let observed = (scorer.eval(&a) - scorer.eval(&b)).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(perm.seed);
    let mut xa = a.clone();
    let mut xb = b.clone();
    let mut extreme = 0usize;
    for _ in 0..perm.n_perm {
        for i in 0..a.len() {
            if rng.random::<bool>() {
                xa[i] = b[i];
                xb[i] = a[i];
            } else {
                xa[i] = a[i];
                xb[i] = b[i];
            }
        }
        let stat = (scorer.eval(&xa) - scorer.eval(&xb)).abs();
        extreme += usize::from(stat >= observed - 1e-12);
    }
    Ok(TestResult::new(
        "permutation_macro_f1",
        observed,
        add_one_p(extreme, perm.n_perm),
        Alternative::TwoSided,
        truth.len(),
    ))
}
