//! Wald–Wolfowitz runs test on median-binarized sequences.
//!
//! A run is a maximal block of identical symbols. Under the null hypothesis
//! that every arrangement of `t0` zeros and `t1` ones is equally likely, the
//! run count `U` has an exact combinatorial distribution and is
//! approximately normal with
//! `mu = 1 + 2 t0 t1 / T` and `sigma^2 = 2 t0 t1 (2 t0 t1 - T) / (T^2 (T - 1))`.
//! Too few runs indicate a trend, too many indicate alternation.

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySequence {
    bits: Vec<bool>,
    zeros: usize,
    ones: usize,
}

impl BinarySequence {
    pub fn new(bits: Vec<bool>) -> Self {
        let ones = bits.iter().filter(|&&b| b).count();
        Self {
            zeros: bits.len() - ones,
            ones,
            bits,
        }
    }

    /// From `0`/`1` values; anything non-zero counts as one.
    pub fn from_digits(digits: &[u8]) -> Self {
        Self::new(digits.iter().map(|&d| d != 0).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn zeros(&self) -> usize {
        self.zeros
    }

    pub fn ones(&self) -> usize {
        self.ones
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Swaps the roles of zero and one.
    pub fn complement(&self) -> Self {
        Self::new(self.bits.iter().map(|b| !b).collect())
    }
}

/// Standard sample median: middle order statistic, or the mean of the two
/// middle ones for even length.
pub fn median(values: &[f64]) -> f64 {
    let sorted = sorted_copy(values);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
}

/// Maps each value to 1 if it is `>= median(values)`, else 0.
pub fn binarize_by_median(values: &[f64]) -> Result<BinarySequence> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot binarize an empty sequence".into(),
        ));
    }
    // No sample lies strictly between the two middle order statistics, so
    // `v >= median` is the same as `v >= upper middle`. Comparing against
    // the order statistic keeps the bits a function of ranks alone.
    let sorted = sorted_copy(values);
    let cut = sorted[sorted.len() / 2];
    Ok(BinarySequence::new(
        values.iter().map(|&v| v >= cut).collect(),
    ))
}

pub fn count_runs(e: &BinarySequence) -> usize {
    if e.is_empty() {
        return 0;
    }
    1 + e.bits.windows(2).filter(|w| w[0] != w[1]).count()
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// `C(n, k)` with `C(n, -1) = 0`, written for the run-count formulas.
fn binom_signed(n: usize, k: isize) -> BigUint {
    if k < 0 {
        BigUint::zero()
    } else {
        binomial(n, k as usize)
    }
}

/// Exact null distribution of the run count for fixed symbol counts.
#[derive(Debug, Clone, PartialEq)]
pub struct RunsDistribution {
    t0: usize,
    t1: usize,
    /// `counts[u]` arrangements have exactly `u` runs.
    counts: Vec<BigUint>,
    total: BigUint,
}

impl RunsDistribution {
    pub fn t0(&self) -> usize {
        self.t0
    }

    pub fn t1(&self) -> usize {
        self.t1
    }

    pub fn len(&self) -> usize {
        self.t0 + self.t1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of arrangements with `u` runs.
    pub fn count(&self, u: usize) -> BigUint {
        self.counts.get(u).cloned().unwrap_or_default()
    }

    /// `C(T, t0)`, the number of distinct arrangements.
    pub fn total(&self) -> &BigUint {
        &self.total
    }

    pub fn probability_exact(&self, u: usize) -> BigRational {
        BigRational::new(
            BigInt::from(self.count(u)),
            BigInt::from(self.total.clone()),
        )
    }

    pub fn probability(&self, u: usize) -> f64 {
        ratio_to_f64(&self.count(u), &self.total)
    }

    /// `P(U = u)` for `u = 0..=T`.
    pub fn probabilities(&self) -> Vec<f64> {
        (0..=self.len()).map(|u| self.probability(u)).collect()
    }

    /// `P(U <= u)`.
    pub fn lower_tail(&self, u: usize) -> f64 {
        let num: BigUint = self.counts.iter().take(u + 1).sum();
        ratio_to_f64(&num, &self.total)
    }

    /// `P(U >= u)`.
    pub fn upper_tail(&self, u: usize) -> f64 {
        let num: BigUint = self.counts.iter().skip(u).sum();
        ratio_to_f64(&num, &self.total)
    }

    pub fn mean(&self) -> f64 {
        let num: BigUint = self
            .counts
            .iter()
            .enumerate()
            .map(|(u, c)| c * BigUint::from(u))
            .sum();
        ratio_to_f64(&num, &self.total)
    }

    pub fn variance(&self) -> f64 {
        let mean = BigRational::new(
            BigInt::from(
                self.counts
                    .iter()
                    .enumerate()
                    .map(|(u, c)| c * BigUint::from(u))
                    .sum::<BigUint>(),
            ),
            BigInt::from(self.total.clone()),
        );
        let mut acc = BigRational::zero();
        for (u, c) in self.counts.iter().enumerate() {
            let dev = BigRational::from_integer(BigInt::from(u)) - &mean;
            acc += &dev * &dev * BigRational::from_integer(BigInt::from(c.clone()));
        }
        (acc / BigRational::from_integer(BigInt::from(self.total.clone())))
            .to_f64()
            .unwrap_or(f64::NAN)
    }
}

fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    BigRational::new(BigInt::from(num.clone()), BigInt::from(den.clone()))
        .to_f64()
        .unwrap_or(f64::NAN)
}

/// Exact distribution of `U` given `t0` zeros and `t1` ones:
///
/// `P(U = 2k)   = 2 C(t0-1, k-1) C(t1-1, k-1) / C(T, t0)`
/// `P(U = 2k+1) = [C(t0-1, k) C(t1-1, k-1) + C(t0-1, k-1) C(t1-1, k)] / C(T, t0)`
pub fn exact_runs_distribution(t0: usize, t1: usize) -> Result<RunsDistribution> {
    if t0 == 0 || t1 == 0 {
        return Err(Error::InvalidArgument(format!(
            "runs distribution needs both symbols (t0 = {t0}, t1 = {t1})"
        )));
    }
    let n = t0 + t1;
    let mut counts = vec![BigUint::zero(); n + 1];
    for (u, slot) in counts.iter_mut().enumerate().skip(2) {
        let k = (u / 2) as isize;
        *slot = if u % 2 == 0 {
            BigUint::from(2u8) * binom_signed(t0 - 1, k - 1) * binom_signed(t1 - 1, k - 1)
        } else {
            binom_signed(t0 - 1, k) * binom_signed(t1 - 1, k - 1)
                + binom_signed(t0 - 1, k - 1) * binom_signed(t1 - 1, k)
        };
    }
    Ok(RunsDistribution {
        t0,
        t1,
        counts,
        total: binomial(n, t0),
    })
}

/// Mean and variance of the run count under the null hypothesis.
pub fn runs_moments(t0: usize, t1: usize) -> Result<(f64, f64)> {
    let n = t0 + t1;
    if t0 == 0 || t1 == 0 || n < 3 {
        return Err(Error::InvalidArgument(format!(
            "runs moments need t0, t1 >= 1 and T >= 3 (t0 = {t0}, t1 = {t1})"
        )));
    }
    let (t0, t1, n) = (t0 as f64, t1 as f64, n as f64);
    let mu = 1.0 + 2.0 * t0 * t1 / n;
    let sigma2 = 2.0 * t0 * t1 * (2.0 * t0 * t1 - n) / (n * n * (n - 1.0));
    Ok((mu, sigma2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    #[default]
    Two,
    /// Rejects only for too few runs.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunsTestReport {
    pub u: usize,
    pub t0: usize,
    pub t1: usize,
    pub mu: f64,
    pub sigma2: f64,
    pub z: f64,
    pub p_value: f64,
    pub reject_randomness: bool,
    pub mode: TestMode,
    pub sided: Sidedness,
    /// Only one symbol occurs; randomness is rejected outright.
    pub degenerate: bool,
}

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// p-value of observing `u` runs with the given symbol counts.
pub fn runs_p_value(
    u: usize,
    t0: usize,
    t1: usize,
    mode: TestMode,
    sided: Sidedness,
) -> Result<f64> {
    let p = match mode {
        TestMode::Exact => {
            let dist = exact_runs_distribution(t0, t1)?;
            match sided {
                Sidedness::Lower => dist.lower_tail(u),
                Sidedness::Two => 2.0 * dist.lower_tail(u).min(dist.upper_tail(u)),
            }
        }
        TestMode::Normal => {
            let (mu, sigma2) = runs_moments(t0, t1)?;
            if sigma2 <= 0.0 {
                return Err(Error::InvalidArgument("runs variance is zero".into()));
            }
            let z = (u as f64 - mu) / sigma2.sqrt();
            match sided {
                Sidedness::Lower => standard_normal_cdf(z),
                Sidedness::Two => erfc(z.abs() / std::f64::consts::SQRT_2),
            }
        }
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Smallest p-value any arrangement of `t0` zeros and `t1` ones can reach
/// on the low-run side (two runs).
pub fn min_attainable_p_value(
    t0: usize,
    t1: usize,
    mode: TestMode,
    sided: Sidedness,
) -> Result<f64> {
    runs_p_value(2, t0, t1, mode, sided)
}

pub fn runs_test(
    e: &BinarySequence,
    alpha: f64,
    mode: TestMode,
    sided: Sidedness,
) -> Result<RunsTestReport> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} not in (0, 0.5)"
        )));
    }
    if e.is_empty() {
        return Err(Error::InvalidArgument(
            "runs test on an empty sequence".into(),
        ));
    }
    let u = count_runs(e);
    let (t0, t1) = (e.zeros(), e.ones());
    if t0 == 0 || t1 == 0 {
        return Ok(RunsTestReport {
            u,
            t0,
            t1,
            mu: 1.0,
            sigma2: 0.0,
            z: 0.0,
            p_value: 0.0,
            reject_randomness: true,
            mode,
            sided,
            degenerate: true,
        });
    }
    let (mu, sigma2) = match runs_moments(t0, t1) {
        Ok(m) => m,
        Err(_) if mode == TestMode::Exact => (1.0 + 2.0 * (t0 * t1) as f64 / (t0 + t1) as f64, 0.0),
        Err(err) => return Err(err),
    };
    let z = if sigma2 > 0.0 {
        (u as f64 - mu) / sigma2.sqrt()
    } else {
        0.0
    };
    let p_value = runs_p_value(u, t0, t1, mode, sided)?;
    Ok(RunsTestReport {
        u,
        t0,
        t1,
        mu,
        sigma2,
        z,
        p_value,
        reject_randomness: p_value < alpha,
        mode,
        sided,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binarize_examples() {
        let e = binarize_by_median(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(e.bits(), &[true, false, true]);
        let flat = binarize_by_median(&[0.7; 6]).unwrap();
        assert!(flat.bits().iter().all(|&b| b));
        let r = [0.4, -2.0, 3.3, 1.0, 0.0, 5.0];
        let shifted: Vec<f64> = r.iter().map(|v| v + 17.5).collect();
        assert_eq!(
            binarize_by_median(&r).unwrap(),
            binarize_by_median(&shifted).unwrap()
        );
        assert!(binarize_by_median(&[]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        // Bits agree with the mean-of-middle-two rule.
        let r = [4.0, 1.0, 3.0, 2.0];
        let m = median(&r);
        let expected: Vec<bool> = r.iter().map(|&v| v >= m).collect();
        assert_eq!(binarize_by_median(&r).unwrap().bits(), expected.as_slice());
    }

    #[test]
    fn run_counts() {
        assert_eq!(
            count_runs(&BinarySequence::from_digits(&[0, 0, 1, 1, 1, 0])),
            3
        );
        assert_eq!(count_runs(&BinarySequence::from_digits(&[1; 7])), 1);
        let alt: Vec<u8> = (0..9).map(|i| (i % 2) as u8).collect();
        assert_eq!(count_runs(&BinarySequence::from_digits(&alt)), 9);
    }

    #[test]
    fn exact_small_cases() {
        let d = exact_runs_distribution(2, 2).unwrap();
        for u in 2..=4 {
            assert_abs_diff_eq!(d.probability(u), 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = exact_runs_distribution(1, 2).unwrap();
        assert_abs_diff_eq!(d.probability(2), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probability(3), 1.0 / 3.0, epsilon = 1e-15);
        assert!(exact_runs_distribution(0, 3).is_err());
    }

    #[test]
    fn moments_values() {
        let (mu, s2) = runs_moments(2, 2).unwrap();
        assert_abs_diff_eq!(mu, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s2, 2.0 / 3.0, epsilon = 1e-15);
        let (mu, s2) = runs_moments(5, 5).unwrap();
        assert_abs_diff_eq!(mu, 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s2, 20.0 / 9.0, epsilon = 1e-14);
        assert!(runs_moments(1, 1).is_err());
        assert!(runs_moments(0, 4).is_err());
    }

    #[test]
    fn exact_mean_and_variance_match_formulas() {
        for t0 in 1..=10 {
            for t1 in 1..=10 {
                if t0 + t1 < 3 {
                    continue;
                }
                let d = exact_runs_distribution(t0, t1).unwrap();
                let (mu, s2) = runs_moments(t0, t1).unwrap();
                assert_abs_diff_eq!(d.mean(), mu, epsilon = 1e-12);
                // The displayed variance turns out to be the exact one.
                assert_abs_diff_eq!(d.variance(), s2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn alternating_sequence_report() {
        let e = BinarySequence::from_digits(&[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let rep = runs_test(&e, 0.05, TestMode::Normal, Sidedness::Two).unwrap();
        assert_eq!(rep.u, 10);
        assert_abs_diff_eq!(rep.mu, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.sigma2.sqrt(), 1.49071, epsilon = 1e-5);
        assert_abs_diff_eq!(rep.z, 2.6833, epsilon = 1e-4);
    }

    #[test]
    fn trend_sequence_report() {
        let e = BinarySequence::from_digits(&[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let rep = runs_test(&e, 0.01, TestMode::Normal, Sidedness::Two).unwrap();
        assert_eq!(rep.u, 2);
        assert_abs_diff_eq!(rep.z, -2.6833, epsilon = 1e-4);
        assert_abs_diff_eq!(rep.p_value, 0.0073, epsilon = 1e-4);
        assert!(rep.reject_randomness);
        let rep = runs_test(&e, 0.001, TestMode::Normal, Sidedness::Two).unwrap();
        assert!(!rep.reject_randomness);
        let lower = runs_test(&e, 0.01, TestMode::Normal, Sidedness::Lower).unwrap();
        assert_abs_diff_eq!(lower.p_value, rep.p_value / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_mode_small_sample() {
        let e = BinarySequence::from_digits(&[0, 0, 1, 1]);
        let rep = runs_test(&e, 0.3, TestMode::Exact, Sidedness::Lower).unwrap();
        assert_eq!(rep.u, 2);
        assert_abs_diff_eq!(rep.p_value, 1.0 / 3.0, epsilon = 1e-15);
        assert!(!rep.reject_randomness);
        let two = runs_test(&e, 0.3, TestMode::Exact, Sidedness::Two).unwrap();
        assert_abs_diff_eq!(two.p_value, 2.0 / 3.0, epsilon = 1e-15);
        // Two runs out of two symbols: the doubled tail is capped at 1.
        let tiny = runs_test(
            &BinarySequence::from_digits(&[0, 1]),
            0.1,
            TestMode::Exact,
            Sidedness::Two,
        )
        .unwrap();
        assert_eq!(tiny.p_value, 1.0);
        assert!(runs_test(
            &BinarySequence::from_digits(&[0, 1]),
            0.1,
            TestMode::Normal,
            Sidedness::Two
        )
        .is_err());
    }

    #[test]
    fn degenerate_sequence_rejects() {
        let rep = runs_test(
            &BinarySequence::from_digits(&[1, 1, 1, 1]),
            0.001,
            TestMode::Exact,
            Sidedness::Two,
        )
        .unwrap();
        assert!(rep.degenerate);
        assert!(rep.reject_randomness);
        assert_eq!(rep.u, 1);
    }

    #[test]
    fn alpha_must_be_valid() {
        let e = BinarySequence::from_digits(&[0, 1, 1, 0]);
        assert!(runs_test(&e, 0.0, TestMode::Exact, Sidedness::Two).is_err());
        assert!(runs_test(&e, 0.5, TestMode::Exact, Sidedness::Two).is_err());
    }

    #[test]
    fn min_attainable_exact_two_sided() {
        // 2 * P(U = 2) = 4 / C(T, t0).
        let p = min_attainable_p_value(7, 7, TestMode::Exact, Sidedness::Two).unwrap();
        assert_abs_diff_eq!(p, 4.0 / 3432.0, epsilon = 1e-15);
        let p = min_attainable_p_value(7, 8, TestMode::Exact, Sidedness::Two).unwrap();
        assert_abs_diff_eq!(p, 4.0 / 6435.0, epsilon = 1e-15);
    }

    #[test]
    fn large_binomials_stay_exact() {
        let d = exact_runs_distribution(40, 45).unwrap();
        let total: f64 = d.probabilities().iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        assert_eq!(d.total(), &binomial(85, 40));
    }
}
