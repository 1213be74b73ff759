//! Exact Gaussian-process regression with a squared-exponential kernel.
//!
//! The prior is `f ~ GP(0, k)` with `k(x, x') = exp(-|x - x'|^2 / (2 h^2))`
//! and observations `y = f(x) + eps`, `eps ~ N(0, 1 / beta)`. The posterior
//! keeps a lower Cholesky factor of `K + I / beta`, which grows by one row
//! per labeled point in [`GpPosterior::update`].

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter levels tried in order when a Gram matrix will not factor.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// Length scale `h` and noise precision `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub h: f64,
    pub beta: f64,
}

impl KernelParams {
    pub fn new(h: f64, beta: f64) -> Result<Self> {
        let p = Self { h, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "length scale {} must be > 0",
                self.h
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise precision {} must be > 0",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn noise_variance(&self) -> f64 {
        self.beta.recip()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * self.h * self.h)).exp()
    }

    /// Prior variance `k(x, x)`; constant for a stationary kernel.
    pub fn prior_variance(&self) -> f64 {
        1.0
    }

    pub fn gram(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let n = xs.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = self.kernel(&xs[i], &xs[i]);
            for j in 0..i {
                let v = self.kernel(&xs[i], &xs[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    /// `K(a, b)` with rows indexed by `a`.
    pub fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |i, j| self.kernel(&a[i], &b[j]))
    }
}

/// Cholesky factor of a symmetric matrix, retrying with diagonal jitter of
/// `1e-10 * mean(diag)` escalated tenfold up to `1e-4 * mean(diag)`.
///
/// Returns the lower factor and the absolute jitter that was added.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c.unpack(), 0.0));
    }
    let n = m.nrows().max(1);
    let scale =
        (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    let mut rel = JITTER_START;
    let mut last = 0.0;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut shifted = m.clone();
        for i in 0..m.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c.unpack(), jitter));
        }
        last = jitter;
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

/// Pointwise or joint predictive covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl Covariance {
    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Covariance::Diagonal(d) => d.clone(),
            Covariance::Full(m) => m.diagonal(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Covariance::Diagonal(d) => d.sum(),
            Covariance::Full(m) => m.trace(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub covariance: Covariance,
}

/// Exact GP posterior given a training set. Immutable: updates return a new
/// value.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    params: KernelParams,
    train_inputs: Vec<Vec<f64>>,
    train_targets: Vec<f64>,
    /// Lower factor of `K + I / beta + jitter I`.
    factor: DMatrix<f64>,
    /// `(K + I / beta)^{-1} y`.
    alpha: DVector<f64>,
    jitter: f64,
}

impl GpPosterior {
    /// The prior, i.e. the posterior given no data.
    pub fn prior(params: KernelParams) -> Self {
        Self {
            params,
            train_inputs: Vec::new(),
            train_targets: Vec::new(),
            factor: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter: 0.0,
        }
    }

    /// Posterior given arbitrary (possibly empty) training points.
    pub fn from_points(
        params: KernelParams,
        inputs: Vec<Vec<f64>>,
        targets: Vec<f64>,
    ) -> Result<Self> {
        params.validate()?;
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        if inputs.is_empty() {
            return Ok(Self::prior(params));
        }
        let mut gram = params.gram(&inputs);
        for i in 0..inputs.len() {
            gram[(i, i)] += params.noise_variance();
        }
        let (factor, jitter) = cholesky_with_jitter(&gram)?;
        let y = DVector::from_column_slice(&targets);
        let alpha = solve_with_factor(&factor, &y);
        Ok(Self {
            params,
            train_inputs: inputs,
            train_targets: targets,
            factor,
            alpha,
            jitter,
        })
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn train_inputs(&self) -> &[Vec<f64>] {
        &self.train_inputs
    }

    pub fn train_targets(&self) -> &[f64] {
        &self.train_targets
    }

    pub fn len(&self) -> usize {
        self.train_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_targets.is_empty()
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.train_inputs.iter().map(|xi| self.params.kernel(xi, x)),
        )
    }

    /// Posterior mean and (clamped) variance at a single input.
    pub fn mean_and_variance(&self, x: &[f64]) -> (f64, f64) {
        let prior = self.params.kernel(x, x);
        if self.is_empty() {
            return (0.0, prior);
        }
        let k = self.kernel_vector(x);
        let mean = k.dot(&self.alpha);
        let v = forward_solve(&self.factor, &k);
        (mean, (prior - v.norm_squared()).max(0.0))
    }

    pub fn variance(&self, x: &[f64]) -> f64 {
        self.mean_and_variance(x).1
    }

    /// Predictive mean and covariance at `queries`; `joint` selects the full
    /// covariance matrix instead of pointwise variances.
    pub fn predict(&self, queries: &[Vec<f64>], joint: bool) -> Prediction {
        let m = queries.len();
        let cross = self.params.cross(&self.train_inputs, queries);
        let mean = if self.is_empty() {
            DVector::zeros(m)
        } else {
            cross.tr_mul(&self.alpha)
        };
        let v = if self.is_empty() {
            DMatrix::zeros(0, m)
        } else {
            forward_solve_matrix(&self.factor, &cross)
        };
        let covariance = if joint {
            let mut cov = self.params.gram(queries) - v.tr_mul(&v);
            for i in 0..m {
                for j in 0..i {
                    let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                    cov[(i, j)] = s;
                    cov[(j, i)] = s;
                }
                cov[(i, i)] = cov[(i, i)].max(0.0);
            }
            Covariance::Full(cov)
        } else {
            Covariance::Diagonal(DVector::from_iterator(
                m,
                (0..m).map(|j| {
                    let prior = self.params.kernel(&queries[j], &queries[j]);
                    (prior - v.column(j).norm_squared()).max(0.0)
                }),
            ))
        };
        Prediction { mean, covariance }
    }

    /// Adds one labeled point by extending the Cholesky factor with a new
    /// row. Falls back to a full refit if the extension breaks down.
    pub fn update(&self, x_new: &[f64], y_new: f64) -> Result<GpPosterior> {
        if let Some(first) = self.train_inputs.first() {
            if first.len() != x_new.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    actual: x_new.len(),
                });
            }
        }
        let t = self.len();
        let k = self.kernel_vector(x_new);
        let diag = self.params.kernel(x_new, x_new) + self.params.noise_variance() + self.jitter;
        let l = forward_solve(&self.factor, &k);
        let d2 = diag - l.norm_squared();

        let mut inputs = self.train_inputs.clone();
        inputs.push(x_new.to_vec());
        let mut targets = self.train_targets.clone();
        targets.push(y_new);

        if !(d2 > 1e-12 * diag) {
            return GpPosterior::from_points(self.params, inputs, targets);
        }
        let mut factor = self.factor.clone().resize(t + 1, t + 1, 0.0);
        for j in 0..t {
            factor[(t, j)] = l[j];
        }
        factor[(t, t)] = d2.sqrt();
        let y = DVector::from_column_slice(&targets);
        let alpha = solve_with_factor(&factor, &y);
        Ok(GpPosterior {
            params: self.params,
            train_inputs: inputs,
            train_targets: targets,
            factor,
            alpha,
            jitter: self.jitter,
        })
    }

    /// `log N(y | 0, K + I / beta)` from the stored factor.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let t = self.len() as f64;
        let y = DVector::from_column_slice(&self.train_targets);
        let log_det: f64 = 2.0 * self.factor.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * y.dot(&self.alpha) - 0.5 * log_det - 0.5 * t * LN_2PI
    }
}

fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    x
}

fn forward_solve_matrix(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    x
}

/// Solves `L L^T x = b`.
fn solve_with_factor(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    l.solve_lower_triangular_mut(&mut x);
    l.tr_solve_lower_triangular_mut(&mut x);
    x
}

pub fn fit_posterior(train: &LabeledDataset, params: KernelParams) -> Result<GpPosterior> {
    GpPosterior::from_points(params, train.inputs().to_vec(), train.targets().to_vec())
}

pub fn update_posterior(post: &GpPosterior, x_new: &[f64], y_new: f64) -> Result<GpPosterior> {
    post.update(x_new, y_new)
}

pub fn log_marginal_likelihood(train: &LabeledDataset, params: KernelParams) -> Result<f64> {
    Ok(fit_posterior(train, params)?.log_marginal_likelihood())
}

/// `count` log-spaced values from `min` to `max` inclusive.
pub fn log_grid(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![min],
        _ => {
            let (a, b) = (min.ln(), max.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Grid point maximizing the log marginal likelihood. Ties go to the
/// smallest `h`, then the smallest `beta`.
pub fn optimize_hyperparameters(
    train: &LabeledDataset,
    h_grid: &[f64],
    beta_grid: &[f64],
) -> Result<KernelParams> {
    if h_grid.is_empty() || beta_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "hyperparameter grids must be non-empty".into(),
        ));
    }
    let mut candidates = Vec::with_capacity(h_grid.len() * beta_grid.len());
    for &h in h_grid {
        for &beta in beta_grid {
            candidates.push(KernelParams::new(h, beta)?);
        }
    }
    candidates.sort_by(|a, b| a.h.total_cmp(&b.h).then(a.beta.total_cmp(&b.beta)));
    let scores: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|&p| {
            log_marginal_likelihood(train, p)
                .ok()
                .filter(|v| v.is_finite())
        })
        .collect();
    let mut best: Option<(KernelParams, f64)> = None;
    for (p, score) in candidates.into_iter().zip(scores) {
        if let Some(s) = score {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
    }
    best.map(|(p, _)| p).ok_or(Error::GridExhausted)
}
