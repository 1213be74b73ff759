//! Pool-based active learning with maximum-variance acquisition and
//! pluggable stopping criteria.
//!
//! Every criterion is evaluated at every step and reduces to a per-step
//! statistic plus a firing rule, so a single trace can score several
//! criteria (and several thresholds) at once. The loop itself only stops
//! early when the criterion named by [`AlOptions::primary`] fires.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    alquier_bound, empirical_expected_risk, gap_upper_bound, gaussian_kl, LossRange,
};
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::gp::{fit_posterior, optimize_hyperparameters, GpPosterior, KernelParams};
use crate::rng::{derive_seed, seeded_rng};
use crate::runstest::{
    binarize_by_median, min_attainable_p_value, runs_test, RunsTestReport, Sidedness, TestMode,
};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_MIN_SEQUENCE_LENGTH: usize = 10;
pub const DEFAULT_EXACT_MAX_LEN: usize = 30;
pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_KAPPA: f64 = 0.01;
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Proposed,
    PacBayes,
    CrossValidation,
    MaxVariance,
    GroundTruth,
}

impl CriterionKind {
    pub fn name(self) -> &'static str {
        match self {
            CriterionKind::Proposed => "proposed",
            CriterionKind::PacBayes => "pac_bayes",
            CriterionKind::CrossValidation => "cross_validation",
            CriterionKind::MaxVariance => "max_variance",
            CriterionKind::GroundTruth => "ground_truth",
        }
    }

    /// Whether a recorded statistic fires at `threshold`. The proposed
    /// criterion records a p-value and `threshold` is its alpha.
    pub fn fires(self, statistic: f64, threshold: f64) -> bool {
        match self {
            CriterionKind::Proposed => statistic >= threshold,
            CriterionKind::PacBayes
            | CriterionKind::CrossValidation
            | CriterionKind::MaxVariance => statistic < threshold,
            CriterionKind::GroundTruth => statistic > threshold,
        }
    }
}

impl std::fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "proposed" => CriterionKind::Proposed,
            "pac_bayes" | "pac-bayes" => CriterionKind::PacBayes,
            "cross_validation" | "cross-validation" | "cv" => CriterionKind::CrossValidation,
            "max_variance" | "max-variance" => CriterionKind::MaxVariance,
            "ground_truth" | "ground-truth" => CriterionKind::GroundTruth,
            other => return Err(Error::Config(format!("unknown criterion {other:?}"))),
        })
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_min_len() -> usize {
    DEFAULT_MIN_SEQUENCE_LENGTH
}
fn default_exact_max_len() -> usize {
    DEFAULT_EXACT_MAX_LEN
}
fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}
fn default_folds() -> usize {
    DEFAULT_FOLDS
}

/// A stopping criterion and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionConfig {
    /// Runs test on the median-binarized bound sequence; stops when
    /// randomness is not rejected.
    Proposed {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_min_len")]
        min_sequence_length: usize,
        #[serde(default)]
        sided: Sidedness,
        /// Sequences up to this length use the exact distribution.
        #[serde(default = "default_exact_max_len")]
        exact_max_len: usize,
    },
    /// Stops when the PAC-Bayes risk bound drops below `threshold`.
    PacBayes {
        threshold: f64,
        #[serde(default = "default_delta")]
        delta: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
        /// Falls back to the run's loss range when absent.
        #[serde(default)]
        loss_range: Option<LossRange>,
    },
    /// Stops when the k-fold cross-validated risk drops below `threshold`.
    CrossValidation {
        threshold: f64,
        #[serde(default = "default_folds")]
        folds: usize,
    },
    /// Stops when every unlabeled pool variance is below `threshold`.
    MaxVariance { threshold: f64 },
    /// Stops when the test-set risk reduction from the prior exceeds
    /// `threshold`.
    GroundTruth { threshold: f64 },
}

impl CriterionConfig {
    pub fn proposed(alpha: f64) -> Self {
        CriterionConfig::Proposed {
            alpha,
            min_sequence_length: DEFAULT_MIN_SEQUENCE_LENGTH,
            sided: Sidedness::Two,
            exact_max_len: DEFAULT_EXACT_MAX_LEN,
        }
    }

    pub fn pac_bayes(threshold: f64) -> Self {
        CriterionConfig::PacBayes {
            threshold,
            delta: DEFAULT_DELTA,
            kappa: DEFAULT_KAPPA,
            loss_range: None,
        }
    }

    pub fn cross_validation(threshold: f64) -> Self {
        CriterionConfig::CrossValidation {
            threshold,
            folds: DEFAULT_FOLDS,
        }
    }

    pub fn kind(&self) -> CriterionKind {
        match self {
            CriterionConfig::Proposed { .. } => CriterionKind::Proposed,
            CriterionConfig::PacBayes { .. } => CriterionKind::PacBayes,
            CriterionConfig::CrossValidation { .. } => CriterionKind::CrossValidation,
            CriterionConfig::MaxVariance { .. } => CriterionKind::MaxVariance,
            CriterionConfig::GroundTruth { .. } => CriterionKind::GroundTruth,
        }
    }

    /// Threshold for threshold criteria, alpha for the proposed one.
    pub fn threshold(&self) -> f64 {
        match *self {
            CriterionConfig::Proposed { alpha, .. } => alpha,
            CriterionConfig::PacBayes { threshold, .. }
            | CriterionConfig::CrossValidation { threshold, .. }
            | CriterionConfig::MaxVariance { threshold }
            | CriterionConfig::GroundTruth { threshold } => threshold,
        }
    }

    pub fn with_threshold(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            CriterionConfig::Proposed { alpha, .. } => *alpha = value,
            CriterionConfig::PacBayes { threshold, .. }
            | CriterionConfig::CrossValidation { threshold, .. }
            | CriterionConfig::MaxVariance { threshold }
            | CriterionConfig::GroundTruth { threshold } => *threshold = value,
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CriterionConfig::Proposed {
                alpha,
                min_sequence_length,
                ..
            } => {
                if !(alpha > 0.0 && alpha < 0.5) {
                    return Err(Error::Config(format!("alpha {alpha} not in (0, 0.5)")));
                }
                if min_sequence_length < 2 {
                    return Err(Error::Config("min_sequence_length must be >= 2".into()));
                }
            }
            CriterionConfig::PacBayes { delta, kappa, .. } => {
                if !(delta > 0.0 && delta <= 1.0) {
                    return Err(Error::Config(format!("delta {delta} not in (0, 1]")));
                }
                if !(kappa >= 0.0) {
                    return Err(Error::Config(format!("kappa {kappa} must be >= 0")));
                }
            }
            CriterionConfig::CrossValidation { folds, .. } => {
                if folds < 2 {
                    return Err(Error::Config("cross validation needs >= 2 folds".into()));
                }
            }
            CriterionConfig::MaxVariance { .. } | CriterionConfig::GroundTruth { .. } => {}
        }
        if self.threshold().is_nan() {
            return Err(Error::Config("threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Bound sequence `R` with its KL parts and the runs-test report computed
/// after each append.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundTrace {
    pub r_values: Vec<f64>,
    pub kl_values: Vec<f64>,
    pub decisions: Vec<Option<RunsTestReport>>,
    /// Labeled-set size at which the proposed criterion first fired.
    pub stop_step: Option<usize>,
}

/// Runs-test controller state for the current bound sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposedDecision {
    pub report: Option<RunsTestReport>,
    /// Long enough, both symbols present and rejection attainable.
    pub eligible: bool,
    pub stop: bool,
}

/// Evaluates the runs-test controller on `r_values`.
///
/// Non-rejection only counts as convergence when the test could have
/// rejected: the sequence must have `min_sequence_length` entries, contain
/// both symbols after binarization, and the most extreme arrangement (two
/// runs) must reach a p-value below alpha for the current symbol counts.
pub fn proposed_decision(r_values: &[f64], cfg: &CriterionConfig) -> Result<ProposedDecision> {
    let CriterionConfig::Proposed {
        alpha,
        min_sequence_length,
        sided,
        exact_max_len,
    } = *cfg
    else {
        return Err(Error::Config(format!(
            "expected proposed criterion, got {}",
            cfg.kind()
        )));
    };
    if r_values.is_empty() {
        return Ok(ProposedDecision {
            report: None,
            eligible: false,
            stop: false,
        });
    }
    let bits = binarize_by_median(r_values)?;
    let mode = if bits.len() <= exact_max_len {
        TestMode::Exact
    } else {
        TestMode::Normal
    };
    let report = match runs_test(&bits, alpha, mode, sided) {
        Ok(r) => r,
        // Normal mode needs T >= 3; nothing to decide before that.
        Err(_) => {
            return Ok(ProposedDecision {
                report: None,
                eligible: false,
                stop: false,
            })
        }
    };
    let eligible = bits.len() >= min_sequence_length
        && !report.degenerate
        && min_attainable_p_value(bits.zeros(), bits.ones(), mode, sided)? < alpha;
    let stop = eligible && !report.reject_randomness;
    Ok(ProposedDecision {
        report: Some(report),
        eligible,
        stop,
    })
}

pub fn stop_proposed(trace: &BoundTrace, cfg: &CriterionConfig) -> Result<bool> {
    Ok(proposed_decision(&trace.r_values, cfg)?.stop)
}

/// Index of the largest variance among unlabeled entries, lowest index on
/// ties.
pub fn argmax_unlabeled(variances: &[f64], labeled: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &done)) in variances.iter().zip(labeled).enumerate() {
        if done {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Unlabeled pool point with maximal current predictive variance.
pub fn select_next(post: &GpPosterior, pool: &LabeledDataset, labeled: &[bool]) -> Result<usize> {
    let variances: Vec<f64> = pool
        .inputs()
        .iter()
        .zip(labeled)
        .map(|(x, &done)| {
            if done {
                f64::NEG_INFINITY
            } else {
                post.variance(x)
            }
        })
        .collect();
    argmax_unlabeled(&variances, labeled).ok_or(Error::PoolExhausted)
}

/// PAC-Bayes risk bound `a_t` on the labeled set.
///
/// The KL term compares the posterior and prior over the labeled inputs,
/// both with `kappa I` added to their covariances.
pub fn pac_bayes_statistic(
    post: &GpPosterior,
    train: &LabeledDataset,
    delta: f64,
    kappa: f64,
    range: LossRange,
) -> Result<f64> {
    let risk = empirical_expected_risk(post, train);
    let kl = kl_to_prior(post, train.inputs(), kappa)?;
    alquier_bound(risk, kl, train.len(), delta, range)
}

/// `KL(q(f_X | S) || p(f_X))` with `kappa I` added to both covariances.
pub fn kl_to_prior(post: &GpPosterior, inputs: &[Vec<f64>], kappa: f64) -> Result<f64> {
    let pred = post.predict(inputs, true);
    let crate::gp::Covariance::Full(mut post_cov) = pred.covariance else {
        unreachable!("joint prediction returns a full covariance")
    };
    let mut prior_cov = post.params().gram(inputs);
    for i in 0..inputs.len() {
        post_cov[(i, i)] += kappa;
        prior_cov[(i, i)] += kappa;
    }
    let zeros = nalgebra::DVector::zeros(inputs.len());
    gaussian_kl(&pred.mean, &post_cov, &zeros, &prior_cov)
}

pub fn stop_pac_bayes(
    post: &GpPosterior,
    train: &LabeledDataset,
    cfg: &CriterionConfig,
    run_range: LossRange,
) -> Result<bool> {
    let CriterionConfig::PacBayes {
        threshold,
        delta,
        kappa,
        loss_range,
    } = *cfg
    else {
        return Err(Error::Config(format!(
            "expected pac_bayes criterion, got {}",
            cfg.kind()
        )));
    };
    let a_t = pac_bayes_statistic(post, train, delta, kappa, loss_range.unwrap_or(run_range))?;
    Ok(CriterionKind::PacBayes.fires(a_t, threshold))
}

/// Mean held-out expected risk over `folds` folds. Rows are shuffled with
/// `seed` and dealt round-robin into folds.
pub fn cross_validation_risk(
    train: &LabeledDataset,
    params: KernelParams,
    folds: usize,
    seed: u64,
) -> Result<f64> {
    if folds < 2 {
        return Err(Error::InvalidArgument(
            "cross validation needs >= 2 folds".into(),
        ));
    }
    if train.len() < folds {
        return Err(Error::InvalidArgument(format!(
            "{} samples are too few for {folds} folds",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded_rng(seed));
    let mut total = 0.0;
    for f in 0..folds {
        let mut held = Vec::new();
        let mut rest = Vec::new();
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == f {
                held.push(i);
            } else {
                rest.push(i);
            }
        }
        let post = fit_posterior(&train.subset(&rest), params)?;
        total += empirical_expected_risk(&post, &train.subset(&held));
    }
    Ok(total / folds as f64)
}

pub fn stop_cross_validation(
    train: &LabeledDataset,
    params: KernelParams,
    cfg: &CriterionConfig,
    seed: u64,
) -> Result<bool> {
    let CriterionConfig::CrossValidation { threshold, folds } = *cfg else {
        return Err(Error::Config(format!(
            "expected cross_validation criterion, got {}",
            cfg.kind()
        )));
    };
    let risk = cross_validation_risk(train, params, folds, seed)?;
    Ok(CriterionKind::CrossValidation.fires(risk, threshold))
}

/// Largest predictive variance over unlabeled pool points, `None` when the
/// pool is exhausted.
pub fn max_unlabeled_variance(
    post: &GpPosterior,
    pool: &LabeledDataset,
    labeled: &[bool],
) -> Option<f64> {
    pool.inputs()
        .iter()
        .zip(labeled)
        .filter(|(_, &done)| !done)
        .map(|(x, _)| post.variance(x))
        .reduce(f64::max)
}

pub fn stop_max_variance(
    post: &GpPosterior,
    pool: &LabeledDataset,
    labeled: &[bool],
    cfg: &CriterionConfig,
) -> Result<bool> {
    let CriterionConfig::MaxVariance { threshold } = *cfg else {
        return Err(Error::Config(format!(
            "expected max_variance criterion, got {}",
            cfg.kind()
        )));
    };
    Ok(max_unlabeled_variance(post, pool, labeled)
        .is_some_and(|v| CriterionKind::MaxVariance.fires(v, threshold)))
}

/// `R_test(p, q) = prior_risk - risk(q)` on the test set.
pub fn ground_truth_statistic(prior_risk: f64, post: &GpPosterior, test: &LabeledDataset) -> f64 {
    prior_risk - empirical_expected_risk(post, test)
}

pub fn stop_ground_truth(
    prior_risk: f64,
    post: &GpPosterior,
    test: &LabeledDataset,
    cfg: &CriterionConfig,
) -> Result<bool> {
    let CriterionConfig::GroundTruth { threshold } = *cfg else {
        return Err(Error::Config(format!(
            "expected ground_truth criterion, got {}",
            cfg.kind()
        )));
    };
    let stat = ground_truth_statistic(prior_risk, post, test);
    Ok(CriterionKind::GroundTruth.fires(stat, threshold))
}

/// Per-criterion record within an [`AlTrace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionTrace {
    pub config: CriterionConfig,
    /// `statistics[t - 1]` is the statistic with `t` labeled points; `None`
    /// where the criterion cannot be evaluated yet.
    pub statistics: Vec<Option<f64>>,
    /// First labeled-set size at which the criterion fired.
    pub stop_step: Option<usize>,
}

impl CriterionTrace {
    /// First step whose recorded statistic fires at `threshold`.
    pub fn first_firing(&self, threshold: f64) -> Option<usize> {
        let kind = self.config.kind();
        self.statistics
            .iter()
            .position(|s| s.is_some_and(|v| kind.fires(v, threshold)))
            .map(|i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlTrace {
    /// Pool indices in labeling order.
    pub chosen_indices: Vec<usize>,
    /// `test_risk[t - 1]` is the test-set expected risk with `t` labels.
    pub test_risk: Option<Vec<f64>>,
    pub bound_trace: BoundTrace,
    pub criteria: Vec<CriterionTrace>,
    /// Hyperparameters of the final posterior.
    pub params: KernelParams,
}

impl AlTrace {
    /// Number of labeled points at the end of the run.
    pub fn steps(&self) -> usize {
        self.chosen_indices.len()
    }

    pub fn stop_step(&self, kind: CriterionKind) -> Option<usize> {
        self.criteria
            .iter()
            .find(|c| c.config.kind() == kind)
            .and_then(|c| c.stop_step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlOptions {
    /// Maximum labeled-set size; `None` runs until the pool is exhausted.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Index into the criteria list whose firing ends the run.
    pub primary: Option<usize>,
    /// Re-optimize hyperparameters on the labeled set after each step.
    pub refit_grid: Option<(Vec<f64>, Vec<f64>)>,
}

impl AlOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            max_steps: None,
            seed,
            primary: None,
            refit_grid: None,
        }
    }
}

struct StepContext<'a> {
    pool: &'a LabeledDataset,
    test: Option<&'a LabeledDataset>,
    prior_risk: Option<f64>,
    range: LossRange,
    cv_seed: u64,
}

fn criterion_statistic(
    cfg: &CriterionConfig,
    ctx: &StepContext<'_>,
    post: &GpPosterior,
    labeled: &[bool],
    chosen: &[usize],
    bounds: &BoundTrace,
) -> Result<Option<f64>> {
    Ok(match *cfg {
        CriterionConfig::Proposed { .. } => {
            let d = proposed_decision(&bounds.r_values, cfg)?;
            match (d.eligible, d.report) {
                (true, Some(rep)) => Some(rep.p_value),
                _ => None,
            }
        }
        CriterionConfig::PacBayes {
            delta,
            kappa,
            loss_range,
            ..
        } => {
            let train = ctx.pool.subset(chosen);
            Some(pac_bayes_statistic(
                post,
                &train,
                delta,
                kappa,
                loss_range.unwrap_or(ctx.range),
            )?)
        }
        CriterionConfig::CrossValidation { folds, .. } => {
            if chosen.len() < folds {
                None
            } else {
                let train = ctx.pool.subset(chosen);
                Some(cross_validation_risk(
                    &train,
                    post.params(),
                    folds,
                    ctx.cv_seed,
                )?)
            }
        }
        CriterionConfig::MaxVariance { .. } => max_unlabeled_variance(post, ctx.pool, labeled),
        CriterionConfig::GroundTruth { .. } => match (ctx.test, ctx.prior_risk) {
            (Some(test), Some(prior)) => Some(ground_truth_statistic(prior, post, test)),
            _ => None,
        },
    })
}

/// Runs maximum-variance active learning over `pool`.
///
/// Starts from one uniformly drawn pool point, then repeatedly labels the
/// unlabeled point of largest predictive variance, appends the gap bound
/// `r_t = KL(q_t || q_{t+1}) + C(range)` and evaluates every criterion.
pub fn run_active_learning(
    pool: &LabeledDataset,
    test: Option<&LabeledDataset>,
    params: KernelParams,
    criteria: &[CriterionConfig],
    range: LossRange,
    opts: &AlOptions,
) -> Result<AlTrace> {
    if pool.len() < 2 {
        return Err(Error::InvalidArgument(
            "pool needs at least 2 points".into(),
        ));
    }
    let max_steps = opts.max_steps.unwrap_or(pool.len());
    if max_steps == 0 || max_steps > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "max_steps {max_steps} must be in [1, {}]",
            pool.len()
        )));
    }
    for c in criteria {
        c.validate()?;
        if c.kind() == CriterionKind::GroundTruth && test.is_none() {
            return Err(Error::Config(
                "ground_truth criterion needs a test set".into(),
            ));
        }
    }
    if let Some(p) = opts.primary {
        if p >= criteria.len() {
            return Err(Error::Config(format!(
                "primary criterion index {p} out of range"
            )));
        }
    }
    params.validate()?;

    let ctx = StepContext {
        pool,
        test,
        prior_risk: test.map(|t| empirical_expected_risk(&GpPosterior::prior(params), t)),
        range,
        cv_seed: derive_seed(opts.seed, 0xC0FF),
    };

    let first = seeded_rng(opts.seed).random_range(0..pool.len());
    let mut labeled = vec![false; pool.len()];
    labeled[first] = true;
    let mut chosen = vec![first];
    let mut post = fit_posterior(&pool.subset(&chosen), params)?;

    let mut bounds = BoundTrace::default();
    let mut test_risk = test.map(|_| Vec::with_capacity(max_steps));
    let mut traces: Vec<CriterionTrace> = criteria
        .iter()
        .map(|c| CriterionTrace {
            config: c.clone(),
            statistics: Vec::with_capacity(max_steps),
            stop_step: None,
        })
        .collect();

    loop {
        let t = chosen.len();
        if let (Some(risks), Some(test)) = (test_risk.as_mut(), test) {
            risks.push(empirical_expected_risk(&post, test));
        }
        let mut primary_fired = false;
        for (i, tr) in traces.iter_mut().enumerate() {
            let stat = criterion_statistic(&tr.config, &ctx, &post, &labeled, &chosen, &bounds)?;
            tr.statistics.push(stat);
            let fired = stat.is_some_and(|v| tr.config.kind().fires(v, tr.config.threshold()));
            if fired && tr.stop_step.is_none() {
                tr.stop_step = Some(t);
                if tr.config.kind() == CriterionKind::Proposed && bounds.stop_step.is_none() {
                    bounds.stop_step = Some(t);
                }
            }
            primary_fired |= fired && opts.primary == Some(i);
        }
        if primary_fired || t >= max_steps {
            break;
        }

        let next = select_next(&post, pool, &labeled)?;
        let (x, y) = (pool.input(next), pool.target(next));
        let gap = gap_upper_bound(&post, x, y, range);
        post = match &opts.refit_grid {
            None => post.update(x, y)?,
            Some((h_grid, beta_grid)) => {
                let mut idx = chosen.clone();
                idx.push(next);
                let train = pool.subset(&idx);
                fit_posterior(&train, optimize_hyperparameters(&train, h_grid, beta_grid)?)?
            }
        };
        labeled[next] = true;
        chosen.push(next);
        bounds.r_values.push(gap.r);
        bounds.kl_values.push(gap.kl);
        let decision = criteria
            .iter()
            .find(|c| c.kind() == CriterionKind::Proposed)
            .map(|c| proposed_decision(&bounds.r_values, c))
            .transpose()?
            .and_then(|d| d.report);
        bounds.decisions.push(decision.or_else(|| {
            let bits = binarize_by_median(&bounds.r_values).ok()?;
            let mode = if bits.len() <= DEFAULT_EXACT_MAX_LEN {
                TestMode::Exact
            } else {
                TestMode::Normal
            };
            runs_test(&bits, DEFAULT_ALPHA, mode, Sidedness::Two).ok()
        }));
    }

    Ok(AlTrace {
        chosen_indices: chosen,
        test_risk,
        bound_trace: bounds,
        criteria: traces,
        params: post.params(),
    })
}
