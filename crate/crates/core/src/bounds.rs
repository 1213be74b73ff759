//! Generalization-gap quantities.
//!
//! The gap between the expected risks of two posteriors sharing a prior is
//! bounded deterministically by their KL divergence plus a Jensen-gap
//! constant `C(a, b) = 2 log((e^a + e^b) / 2) - a - b` that depends only on
//! the loss range `[a, b]`. For GP posteriors one labeled point apart the
//! KL divergence has a closed form in the predictive mean and variance at
//! the new input ([`sequential_kl`]); [`gaussian_kl`] computes the same
//! quantity from the joint posteriors and is kept as its oracle.
//!
//! The conventional PAC-Bayes bound for bounded regression losses
//! ([`alquier_bound`]) and the test-set estimate of the posterior expected
//! loss ([`empirical_expected_risk`]) live here as well.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, GpPosterior};

/// Interval `[a, b]` the loss is assumed to take values in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRange {
    pub a: f64,
    pub b: f64,
}

impl LossRange {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0 && a <= b && b.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss range [{a}, {b}] must satisfy 0 <= a <= b < inf"
            )));
        }
        Ok(Self { a, b })
    }

    /// `[0, max(y) - min(y)]`.
    pub fn from_targets(ds: &LabeledDataset) -> Self {
        Self {
            a: 0.0,
            b: ds.target_span(),
        }
    }

    pub fn width(&self) -> f64 {
        self.b - self.a
    }
}

/// `KL + C`, the upper bound on the drop in expected risk for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub kl: f64,
    pub c: f64,
    pub r: f64,
}

impl GapBound {
    pub fn new(kl: f64, c: f64) -> Self {
        Self { kl, c, r: kl + c }
    }
}

/// `2 log((e^a + e^b) / 2) - a - b`, evaluated without overflow.
pub fn jensen_gap_constant(range: LossRange) -> f64 {
    let LossRange { a, b } = range;
    let m = a.max(b);
    let lse = m + (((a - m).exp() + (b - m).exp()) / 2.0).ln();
    (2.0 * lse - a - b).max(0.0)
}

/// Closed-form KL between GP posteriors before and after observing `y` at a
/// point with predictive variance `sigma` and residual `y - mu`.
pub fn sequential_kl_from_moments(beta: f64, sigma: f64, residual: f64) -> f64 {
    let bs = beta * sigma.max(0.0);
    let variance_part = 0.5 * (bs - bs.ln_1p());
    let mean_part = 0.5 * bs / (sigma.max(0.0) + beta.recip()) * residual * residual;
    (variance_part + mean_part).max(0.0)
}

/// `KL(q(f | S_t) || q(f | S_t + (x_new, y_new)))`.
pub fn sequential_kl(post: &GpPosterior, x_new: &[f64], y_new: f64) -> f64 {
    let (mu, sigma) = post.mean_and_variance(x_new);
    sequential_kl_from_moments(post.params().beta, sigma, y_new - mu)
}

pub fn gap_upper_bound(
    post: &GpPosterior,
    x_new: &[f64],
    y_new: f64,
    range: LossRange,
) -> GapBound {
    GapBound::new(
        sequential_kl(post, x_new, y_new),
        jensen_gap_constant(range),
    )
}

/// `KL(N(mean0, cov0) || N(mean1, cov1))`.
///
/// Both covariances are factorized with the jitter escalation of
/// [`cholesky_with_jitter`].
pub fn gaussian_kl(
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean0.len();
    for (expected, actual) in [
        (d, mean1.len()),
        (d, cov0.nrows()),
        (d, cov0.ncols()),
        (d, cov1.nrows()),
        (d, cov1.ncols()),
    ] {
        if expected != actual {
            return Err(Error::DimensionMismatch { expected, actual });
        }
    }
    if d == 0 {
        return Ok(0.0);
    }
    let (l0, _) = cholesky_with_jitter(cov0)?;
    let (l1, _) = cholesky_with_jitter(cov1)?;

    // tr(cov1^{-1} cov0) = |L1^{-1} L0|_F^2
    let mut a = l0.clone();
    l1.solve_lower_triangular_mut(&mut a);
    let trace = a.norm_squared();

    let mut diff = mean1 - mean0;
    l1.solve_lower_triangular_mut(&mut diff);
    let maha = diff.norm_squared();

    let log_det = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let kl = 0.5 * (trace + maha - d as f64 + log_det(&l1) - log_det(&l0));
    Ok(kl.max(0.0))
}

/// `risk + (KL - log delta) / t + (b - a)^2 / 2`.
pub fn alquier_bound(
    empirical_risk: f64,
    kl_to_prior: f64,
    t: usize,
    delta: f64,
    range: LossRange,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta {delta} not in (0, 1]"
        )));
    }
    if !(kl_to_prior >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "KL {kl_to_prior} must be >= 0"
        )));
    }
    Ok(empirical_risk + (kl_to_prior - delta.ln()) / t as f64 + 0.5 * range.width().powi(2))
}

/// Additive constant of the per-point loss `beta/2 (y - f)^2 + 1/2 log(beta / 2 pi)`.
pub fn loss_constant(beta: f64) -> f64 {
    0.5 * (beta / (2.0 * std::f64::consts::PI)).ln()
}

/// `beta / (2 n) * (sum of squared residuals + trace) + loss_constant(beta)`.
pub fn expected_risk_from_moments(beta: f64, residual_sq_sum: f64, trace: f64, n: usize) -> f64 {
    beta / (2.0 * n as f64) * (residual_sq_sum + trace) + loss_constant(beta)
}

/// Posterior expected loss averaged over `data`.
///
/// The trace of the joint predictive covariance only needs its diagonal,
/// so pointwise variances are used.
pub fn empirical_expected_risk(post: &GpPosterior, data: &LabeledDataset) -> f64 {
    let pred = post.predict(data.inputs(), false);
    let residual_sq_sum: f64 = pred
        .mean
        .iter()
        .zip(data.targets())
        .map(|(m, y)| (y - m).powi(2))
        .sum();
    expected_risk_from_moments(
        post.params().beta,
        residual_sq_sum,
        pred.covariance.trace(),
        data.len(),
    )
}

/// Per-point expected losses `E_q[l(f, x_i, y_i)]`.
pub fn pointwise_expected_loss(post: &GpPosterior, data: &LabeledDataset) -> Vec<f64> {
    let beta = post.params().beta;
    let pred = post.predict(data.inputs(), false);
    let var = pred.covariance.diagonal();
    pred.mean
        .iter()
        .zip(data.targets())
        .zip(var.iter())
        .map(|((m, y), v)| 0.5 * beta * ((y - m).powi(2) + v) + loss_constant(beta))
        .collect()
}
