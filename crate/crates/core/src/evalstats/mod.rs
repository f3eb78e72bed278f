//! Evaluation metrics and hypothesis tests.
//!
//! Every randomized procedure takes an explicit seed and is reproducible.

mod agreement;
mod hypothesis;
mod metrics;

pub use agreement::*;
pub use hypothesis::*;
pub use metrics::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("no data")]
    Empty,
    #[error("{nonzero} non-zero differences; at least {required} are needed")]
    TooFewPairs { nonzero: usize, required: usize },
    #[error("item {item} has {found} ratings, expected {expected}")]
    Ragged { item: usize, expected: usize, found: usize },
    #[error("at least two raters are required")]
    TooFewRaters,
    #[error("p-value {0} is outside [0, 1]")]
    InvalidProbability(f64),
    #[error("alpha {0} is outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("confidence level {0} is outside (0, 1)")]
    InvalidLevel(f64),
    #[error("at least one resample is required")]
    NoResamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// First sample larger.
    Greater,
    /// First sample smaller.
    Less,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub method: String,
    /// Observations that entered the test (after dropping zero differences).
    pub n: usize,
    pub adjusted_p: Option<f64>,
    pub rejected: Option<bool>,
}

impl TestResult {
    fn new(method: &str, statistic: f64, p_value: f64, alternative: Alternative, n: usize) -> Self {
        TestResult {
            statistic,
            p_value: p_value.clamp(0.0, 1.0),
            alternative,
            method: method.to_owned(),
            n,
            adjusted_p: None,
            rejected: None,
        }
    }
}

/// Holm step-down adjustment. Returns `(adjusted_p, rejected)` in input order.
pub fn holm_bonferroni(p_values: &[f64], alpha: f64) -> Result<Vec<(f64, bool)>, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    if let Some(&bad) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatsError::InvalidProbability(bad));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut out = vec![(0.0, false); m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p_values[i]).min(1.0);
        running = running.max(scaled);
        out[i] = (running, running <= alpha);
    }
    Ok(out)
}

/// Applies [`holm_bonferroni`] to a family of test results in place.
pub fn adjust_family(results: &mut [TestResult], alpha: f64) -> Result<(), StatsError> {
    let raw: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    for (r, (adj, rej)) in results.iter_mut().zip(holm_bonferroni(&raw, alpha)?) {
        r.adjusted_p = Some(adj);
        r.rejected = Some(rej);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

/// Case-level percentile bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bootstrap {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Bootstrap {
            n_boot: 10_000,
            level: 0.95,
            seed: 0,
        }
    }
}

impl Bootstrap {
    fn check(&self, n: usize) -> Result<(), StatsError> {
        if n == 0 {
            return Err(StatsError::Empty);
        }
        if self.n_boot == 0 {
            return Err(StatsError::NoResamples);
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(StatsError::InvalidLevel(self.level));
        }
        Ok(())
    }

    /// Percentile intervals for several statistics computed on the same
    /// resamples. `stat` receives the resampled case indices and returns one
    /// value per statistic; `NaN` values are left out of that statistic's
    /// interval (and the interval is `None` if every replicate was `NaN`).
    pub fn intervals<F>(&self, n: usize, k: usize, mut stat: F) -> Result<Vec<Option<Interval>>, StatsError>
    where
        F: FnMut(&[usize]) -> Vec<f64>,
    {
        self.check(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut indices = vec![0usize; n];
        let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(self.n_boot); k];
        for _ in 0..self.n_boot {
            for slot in indices.iter_mut() {
                *slot = rng.random_range(0..n);
            }
            for (series, value) in draws.iter_mut().zip(stat(&indices)) {
                if !value.is_nan() {
                    series.push(value);
                }
            }
        }
        let tail = (1.0 - self.level) / 2.0;
        Ok(draws
            .into_iter()
            .map(|mut series| {
                if series.is_empty() {
                    return None;
                }
                series.sort_by(f64::total_cmp);
                Some(Interval {
                    low: percentile(&series, tail),
                    high: percentile(&series, 1.0 - tail),
                })
            })
            .collect())
    }

    /// Percentile interval for one statistic.
    pub fn interval<F>(&self, n: usize, mut stat: F) -> Result<Interval, StatsError>
    where
        F: FnMut(&[usize]) -> f64,
    {
        let mut out = self.intervals(n, 1, |idx| vec![stat(idx)])?;
        out.pop().flatten().ok_or(StatsError::Empty)
    }

    /// Interval for the mean of `values`.
    pub fn mean_interval(&self, values: &[f64]) -> Result<Interval, StatsError> {
        self.interval(values.len(), |idx| {
            idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
        })
    }
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Settings shared by the permutation tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Permutation {
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for Permutation {
    fn default() -> Self {
        Permutation {
            n_perm: 10_000,
            seed: 0,
        }
    }
}

/// Add-one Monte Carlo p-value.
fn add_one_p(extreme: usize, n_perm: usize) -> f64 {
    (1 + extreme) as f64 / (1 + n_perm) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holm_examples() {
        let out = holm_bonferroni(&[0.01, 0.02, 0.04], 0.05).unwrap();
        let adj: Vec<f64> = out.iter().map(|o| o.0).collect();
        assert!((adj[0] - 0.03).abs() < 1e-15);
        assert!((adj[1] - 0.04).abs() < 1e-15);
        assert!((adj[2] - 0.04).abs() < 1e-15);
        assert!(out.iter().all(|o| o.1));
        assert_eq!(holm_bonferroni(&[0.2], 0.05).unwrap(), vec![(0.2, false)]);
        assert!(holm_bonferroni(&[1.0, 1.0], 0.05)
            .unwrap()
            .iter()
            .all(|o| !o.1 && o.0 == 1.0));
        assert!(holm_bonferroni(&[1.2], 0.05).is_err());
        assert!(holm_bonferroni(&[0.1], 1.0).is_err());
    }

    #[test]
    fn holm_is_order_preserving_and_never_below_raw() {
        let p = [0.3, 0.001, 0.04, 0.02, 0.9, 0.04];
        let out = holm_bonferroni(&p, 0.05).unwrap();
        for i in 0..p.len() {
            assert!(out[i].0 >= p[i]);
            for j in 0..p.len() {
                if p[i] < p[j] {
                    assert!(out[i].0 <= out[j].0);
                }
            }
        }
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let b = Bootstrap {
            n_boot: 500,
            ..Default::default()
        };
        let ci = b.mean_interval(&[4.0; 12]).unwrap();
        assert_eq!((ci.low, ci.high), (4.0, 4.0));
        let ones = b.mean_interval(&[1.0; 30]).unwrap();
        assert_eq!((ones.low, ones.high), (1.0, 1.0));
        let data: Vec<f64> = (0..40).map(f64::from).collect();
        assert_eq!(b.mean_interval(&data).unwrap(), b.mean_interval(&data).unwrap());
        assert_eq!(b.mean_interval(&[]), Err(StatsError::Empty));
        let bad = Bootstrap { level: 1.0, ..b };
        assert!(bad.mean_interval(&data).is_err());
    }

    #[test]
    fn bootstrap_covers_normal_mean() {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(5.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps = 200;
        let mut covered = 0;
        for rep in 0..reps {
            let sample: Vec<f64> = (0..200).map(|_| normal.sample(&mut rng)).collect();
            let b = Bootstrap {
                n_boot: 400,
                level: 0.95,
                seed: rep,
            };
            let ci = b.mean_interval(&sample).unwrap();
            if ci.low <= 5.0 && 5.0 <= ci.high {
                covered += 1;
            }
        }
        // 95% nominal; binomial sd over 200 reps is about 1.5%.
        let rate = covered as f64 / reps as f64;
        assert!((0.89..=0.99).contains(&rate), "coverage {rate}");
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert!((percentile(&v, 0.5) - 2.5).abs() < 1e-15);
    }
}
