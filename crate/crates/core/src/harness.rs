//! Replicated stopping-criterion experiments.
//!
//! A replication draws a dataset, splits off a pool, fits hyperparameters
//! on the pool by grid search and runs active learning until the pool is
//! exhausted. Every configured criterion is scored passively on that shared
//! trace: its stopping step is the first step its statistic fires. The
//! optimal stopping step `t_opt` is the first labeled-set size whose test
//! risk falls to the calibrated level `eta`, and each criterion is scored
//! by `e_stop = |stop - t_opt|`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloop::{
    run_active_learning, AlOptions, AlTrace, CriterionConfig, CriterionKind, DEFAULT_ALPHA,
    DEFAULT_DELTA, DEFAULT_EXACT_MAX_LEN, DEFAULT_FOLDS, DEFAULT_KAPPA,
    DEFAULT_MIN_SEQUENCE_LENGTH,
};
use crate::bounds::{empirical_expected_risk, LossRange};
use crate::dataset::{
    generate_artificial, generate_sign_wave, load_table, split_pool, LabeledDataset, TargetColumn,
};
use crate::error::{Error, Result};
use crate::gp::{fit_posterior, log_grid, optimize_hyperparameters, GpPosterior, KernelParams};
use crate::rng::{derive_seed, seeded_rng};
use crate::runstest::Sidedness;

// Seed streams.
const STREAM_ETA: u64 = 1;
const STREAM_REFERENCE: u64 = 2;
const STREAM_REPLICATION: u64 = 3;
const STREAM_BOOTSTRAP: u64 = 4;

/// Where replication data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    /// One-dimensional benchmark with Gaussian noise.
    Artificial {
        #[serde(default = "default_artificial_n")]
        n: usize,
        #[serde(default = "default_noise_precision")]
        noise_precision: f64,
        #[serde(default = "default_x_range")]
        x_range: (f64, f64),
    },
    SignWave {
        #[serde(default = "default_artificial_n")]
        n: usize,
    },
    File {
        path: PathBuf,
        target_column: TargetColumn,
    },
}

fn default_artificial_n() -> usize {
    1000
}
fn default_noise_precision() -> f64 {
    100.0
}
fn default_x_range() -> (f64, f64) {
    (-5.0, 15.0)
}

impl DatasetSource {
    pub fn artificial() -> Self {
        DatasetSource::Artificial {
            n: default_artificial_n(),
            noise_precision: default_noise_precision(),
            x_range: default_x_range(),
        }
    }

    /// A dataset different from `self` for threshold calibration: the sign
    /// wave, or the artificial benchmark when `self` is the sign wave.
    pub fn default_reference(&self) -> DatasetSource {
        match self {
            DatasetSource::SignWave { .. } => DatasetSource::artificial(),
            _ => DatasetSource::SignWave {
                n: default_artificial_n(),
            },
        }
    }

    pub fn is_generator(&self) -> bool {
        !matches!(self, DatasetSource::File { .. })
    }

    /// Raw (unstandardized) data. Generators draw `n_override` rows when
    /// given, otherwise their configured size; files ignore both arguments.
    pub fn load(&self, n_override: Option<usize>, seed: u64) -> Result<LabeledDataset> {
        match self {
            DatasetSource::Artificial {
                n,
                noise_precision,
                x_range,
            } => generate_artificial(n_override.unwrap_or(*n), *noise_precision, *x_range, seed),
            DatasetSource::SignWave { n } => generate_sign_wave(n_override.unwrap_or(*n), seed),
            DatasetSource::File {
                path,
                target_column,
            } => load_table(path, target_column),
        }
    }
}

/// Log-spaced hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            min: 1e-2,
            max: 1e2,
            count: 25,
        }
    }
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        log_grid(self.min, self.max, self.count)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite() && self.count >= 1) {
            return Err(Error::Config(format!("{name} grid {self:?} is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EtaSpec {
    Fixed(f64),
    Calibrate { calibrate: EtaCalibrationSpec },
}

impl Default for EtaSpec {
    fn default() -> Self {
        EtaSpec::Calibrate {
            calibrate: EtaCalibrationSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCalibrationSpec {
    /// Training rows per resample.
    #[serde(default = "default_eta_train")]
    pub train_size: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Rows drawn from a generator source for calibration.
    #[serde(default = "default_eta_dataset_size")]
    pub dataset_size: usize,
}

fn default_eta_train() -> usize {
    50
}
fn default_repeats() -> usize {
    20
}
fn default_eta_dataset_size() -> usize {
    2000
}

impl Default for EtaCalibrationSpec {
    fn default() -> Self {
        Self {
            train_size: default_eta_train(),
            repeats: default_repeats(),
            dataset_size: default_eta_dataset_size(),
        }
    }
}

/// Threshold of a stopping criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThresholdSpec {
    Value(f64),
    /// `"calibrate"` (default range for the kind) or `"bootstrap"`
    /// (ground truth only).
    Named(String),
    Calibrate {
        calibrate: ThresholdRange,
    },
}

/// Equally spaced threshold candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRange {
    pub min: f64,
    pub max: f64,
    #[serde(default = "default_grid_count")]
    pub grid_count: usize,
}

fn default_grid_count() -> usize {
    200
}

impl ThresholdRange {
    /// Candidate ranges for each threshold criterion.
    pub fn default_for(kind: CriterionKind) -> Option<Self> {
        let (min, max) = match kind {
            CriterionKind::PacBayes => (0.01, 100.0),
            CriterionKind::CrossValidation => (0.001, 10.0),
            CriterionKind::MaxVariance => (0.0001, 1.0),
            CriterionKind::Proposed | CriterionKind::GroundTruth => return None,
        };
        Some(Self {
            min,
            max,
            grid_count: default_grid_count(),
        })
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.grid_count;
        (0..n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

/// Resolved threshold strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
enum ThresholdPlan {
    Fixed(f64),
    Calibrate(ThresholdRange),
    Bootstrap,
}

/// One criterion in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_sequence_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sided: Option<Sidedness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_max_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

impl CriterionSpec {
    pub fn new(kind: CriterionKind) -> Self {
        Self {
            kind,
            threshold: None,
            alpha: None,
            min_sequence_length: None,
            sided: None,
            exact_max_len: None,
            delta: None,
            kappa: None,
            folds: None,
        }
    }

    pub fn with_threshold(mut self, t: ThresholdSpec) -> Self {
        self.threshold = Some(t);
        self
    }

    fn plan(&self) -> Result<ThresholdPlan> {
        let kind = self.kind;
        match (&self.threshold, kind) {
            (_, CriterionKind::Proposed) => {
                Ok(ThresholdPlan::Fixed(self.alpha.unwrap_or(DEFAULT_ALPHA)))
            }
            (None, CriterionKind::GroundTruth) => Ok(ThresholdPlan::Bootstrap),
            (None, _) => ThresholdRange::default_for(kind)
                .map(ThresholdPlan::Calibrate)
                .ok_or_else(|| Error::Config(format!("{kind} needs a threshold"))),
            (Some(ThresholdSpec::Value(v)), _) => Ok(ThresholdPlan::Fixed(*v)),
            (Some(ThresholdSpec::Named(n)), CriterionKind::GroundTruth) if n == "bootstrap" => {
                Ok(ThresholdPlan::Bootstrap)
            }
            (Some(ThresholdSpec::Named(n)), _) if n == "calibrate" => {
                ThresholdRange::default_for(kind)
                    .map(ThresholdPlan::Calibrate)
                    .ok_or_else(|| Error::Config(format!("{kind} has no calibration range")))
            }
            (Some(ThresholdSpec::Named(n)), _) => {
                Err(Error::Config(format!("unknown threshold {n:?} for {kind}")))
            }
            (Some(ThresholdSpec::Calibrate { calibrate }), CriterionKind::GroundTruth) => {
                let _ = calibrate;
                Err(Error::Config(
                    "ground_truth thresholds come from the bootstrap".into(),
                ))
            }
            (Some(ThresholdSpec::Calibrate { calibrate }), _) => {
                if !(calibrate.min < calibrate.max) || calibrate.grid_count < 2 {
                    return Err(Error::Config(format!(
                        "calibration range {calibrate:?} needs min < max and >= 2 points"
                    )));
                }
                Ok(ThresholdPlan::Calibrate(*calibrate))
            }
        }
    }

    /// Concrete criterion at `threshold` (alpha for the proposed rule).
    pub fn to_config(&self, threshold: f64) -> CriterionConfig {
        match self.kind {
            CriterionKind::Proposed => CriterionConfig::Proposed {
                alpha: threshold,
                min_sequence_length: self
                    .min_sequence_length
                    .unwrap_or(DEFAULT_MIN_SEQUENCE_LENGTH),
                sided: self.sided.unwrap_or_default(),
                exact_max_len: self.exact_max_len.unwrap_or(DEFAULT_EXACT_MAX_LEN),
            },
            CriterionKind::PacBayes => CriterionConfig::PacBayes {
                threshold,
                delta: self.delta.unwrap_or(DEFAULT_DELTA),
                kappa: self.kappa.unwrap_or(DEFAULT_KAPPA),
                loss_range: None,
            },
            CriterionKind::CrossValidation => CriterionConfig::CrossValidation {
                threshold,
                folds: self.folds.unwrap_or(DEFAULT_FOLDS),
            },
            CriterionKind::MaxVariance => CriterionConfig::MaxVariance { threshold },
            CriterionKind::GroundTruth => CriterionConfig::GroundTruth { threshold },
        }
    }
}

fn default_criteria() -> Vec<CriterionSpec> {
    [
        CriterionKind::GroundTruth,
        CriterionKind::Proposed,
        CriterionKind::PacBayes,
        CriterionKind::CrossValidation,
        CriterionKind::MaxVariance,
    ]
    .into_iter()
    .map(CriterionSpec::new)
    .collect()
}

fn default_pool_size() -> usize {
    50
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    #[serde(default = "default_repeats")]
    pub replications: usize,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<CriterionSpec>,
    #[serde(default)]
    pub h_grid: GridSpec,
    #[serde(default)]
    pub beta_grid: GridSpec,
    #[serde(default)]
    pub eta: EtaSpec,
    /// Dataset used to calibrate thresholds; defaults to
    /// [`DatasetSource::default_reference`].
    #[serde(default)]
    pub reference: Option<DatasetSource>,
    #[serde(default = "default_repeats")]
    pub reference_replications: usize,
    #[serde(default = "default_repeats")]
    pub bootstrap_repeats: usize,
    /// Labeled-set size cap; defaults to the pool size.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Default settings for `dataset`.
    pub fn new(dataset: DatasetSource) -> Self {
        Self {
            dataset,
            pool_size: default_pool_size(),
            replications: default_repeats(),
            criteria: default_criteria(),
            h_grid: GridSpec::default(),
            beta_grid: GridSpec::default(),
            eta: EtaSpec::default(),
            reference: None,
            reference_replications: default_repeats(),
            bootstrap_repeats: default_repeats(),
            max_steps: None,
            standardize: true,
            seed: 0,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.pool_size < 2 {
            return Err(Error::Config("pool_size must be >= 2".into()));
        }
        if let Some(m) = self.max_steps {
            if m == 0 || m > self.pool_size {
                return Err(Error::Config(format!(
                    "max_steps {m} must be in [1, pool_size]"
                )));
            }
        }
        self.h_grid.validate("h")?;
        self.beta_grid.validate("beta")?;
        let mut seen = Vec::new();
        for c in &self.criteria {
            if seen.contains(&c.kind) {
                return Err(Error::Config(format!("criterion {} listed twice", c.kind)));
            }
            seen.push(c.kind);
            let plan = c.plan()?;
            let probe = match plan {
                ThresholdPlan::Fixed(v) => v,
                _ => 0.0,
            };
            c.to_config(probe).validate()?;
            if matches!(plan, ThresholdPlan::Calibrate(_)) && self.reference_replications == 0 {
                return Err(Error::Config("reference_replications must be >= 1".into()));
            }
            if plan == ThresholdPlan::Bootstrap && self.bootstrap_repeats == 0 {
                return Err(Error::Config("bootstrap_repeats must be >= 1".into()));
            }
        }
        match &self.eta {
            EtaSpec::Fixed(v) if v.is_nan() => return Err(Error::Config("eta is NaN".into())),
            EtaSpec::Calibrate { calibrate }
                if calibrate.repeats == 0 || calibrate.train_size == 0 =>
            {
                return Err(Error::Config(
                    "eta calibration needs repeats and train_size >= 1".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    fn prepare(&self, ds: LabeledDataset) -> Result<LabeledDataset> {
        if self.standardize {
            ds.standardize()
        } else {
            Ok(ds)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCalibration {
    pub eta: f64,
    pub mean: f64,
    pub sd: f64,
    pub risks: Vec<f64>,
}

/// Sample mean and sd (`n - 1` denominator; 0 for a single value).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `eta = mean + 2 sd` of test risks over random train/test resamples,
/// with hyperparameters fitted on each training split.
pub fn calibrate_eta(
    dataset: &LabeledDataset,
    train_size: usize,
    repeats: usize,
    h_grid: &[f64],
    beta_grid: &[f64],
    seed: u64,
) -> Result<EtaCalibration> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be >= 1".into()));
    }
    if train_size == 0 || train_size >= dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "dataset of {} rows cannot hold {train_size} training rows and a test set",
            dataset.len()
        )));
    }
    let risks = (0..repeats)
        .into_par_iter()
        .map(|i| {
            let (train, test) = split_pool(dataset, train_size, derive_seed(seed, i as u64))?;
            let params = optimize_hyperparameters(&train, h_grid, beta_grid)?;
            Ok(empirical_expected_risk(
                &fit_posterior(&train, params)?,
                &test,
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, sd) = mean_and_sd(&risks);
    Ok(EtaCalibration {
        eta: mean + 2.0 * sd,
        mean,
        sd,
        risks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimalStop {
    pub t_opt: usize,
    /// False when no step reached `eta`; `t_opt` is then `len + 1`.
    pub reached: bool,
}

/// Smallest labeled-set size whose test risk is `<= eta`.
pub fn find_optimal_stop(per_step_test_risk: &[f64], eta: f64) -> Result<OptimalStop> {
    if per_step_test_risk.is_empty() {
        return Err(Error::InvalidArgument("empty risk curve".into()));
    }
    Ok(match per_step_test_risk.iter().position(|&r| r <= eta) {
        Some(i) => OptimalStop {
            t_opt: i + 1,
            reached: true,
        },
        None => OptimalStop {
            t_opt: per_step_test_risk.len() + 1,
            reached: false,
        },
    })
}

pub fn stopping_error(stop_step: usize, t_opt: usize) -> usize {
    stop_step.abs_diff(t_opt)
}

/// Stop step of a passively scored criterion: its first firing, or the end
/// of the trace if it never fired.
fn scored_stop(first: Option<usize>, trace_len: usize) -> (usize, bool) {
    match first {
        Some(s) => (s, true),
        None => (trace_len, false),
    }
}

/// An active-learning trace with its optimal stop, kept for re-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrace {
    pub trace: AlTrace,
    pub optimal: OptimalStop,
}

impl ScoredTrace {
    /// `e_stop` of criterion `index` if it had used `threshold`.
    pub fn e_stop_at(&self, index: usize, threshold: f64) -> usize {
        let first = self.trace.criteria[index].first_firing(threshold);
        let (stop, _) = scored_stop(first, self.trace.steps());
        stopping_error(stop, self.optimal.t_opt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub kind: CriterionKind,
    pub threshold: f64,
    pub mean_e_stop: f64,
    pub range: ThresholdRange,
}

/// Mean `e_stop` of criterion `index` at each threshold in `grid`.
pub fn scan_thresholds(runs: &[ScoredTrace], index: usize, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&thr| {
            runs.iter()
                .map(|r| r.e_stop_at(index, thr) as f64)
                .sum::<f64>()
                / runs.len() as f64
        })
        .collect()
}

/// Threshold in `range` minimizing the mean `e_stop` over recorded `runs`;
/// ties go to the smaller threshold.
pub fn calibrate_threshold(
    runs: &[ScoredTrace],
    index: usize,
    range: ThresholdRange,
) -> Result<ThresholdCalibration> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no reference runs".into()));
    }
    let kind = runs[0].trace.criteria[index].config.kind();
    if kind == CriterionKind::Proposed {
        return Err(Error::InvalidArgument(
            "the proposed criterion has no threshold".into(),
        ));
    }
    if range.grid_count < 2 || !(range.min < range.max) {
        return Err(Error::InvalidArgument(format!(
            "invalid threshold range {range:?}"
        )));
    }
    let grid = range.values();
    let scores = scan_thresholds(runs, index, &grid);
    let (best, score) =
        grid.iter().zip(&scores).fold(
            (grid[0], scores[0]),
            |acc, (&t, &s)| if s < acc.1 { (t, s) } else { acc },
        );
    Ok(ThresholdCalibration {
        kind,
        threshold: best,
        mean_e_stop: score,
        range,
    })
}

/// Ground-truth threshold: `mean - 2 sd` of `R_test(p, q(f | S_T))` over
/// bootstrap resamples of the pool (training) and test rows.
pub fn bootstrap_ground_truth_threshold(
    pool: &LabeledDataset,
    test: &LabeledDataset,
    params: KernelParams,
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap repeats must be >= 1".into(),
        ));
    }
    let mut rng = seeded_rng(seed);
    let mut values = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let pi: Vec<usize> = (0..pool.len())
            .map(|_| rng.random_range(0..pool.len()))
            .collect();
        let ti: Vec<usize> = (0..test.len())
            .map(|_| rng.random_range(0..test.len()))
            .collect();
        let (train_b, test_b) = (pool.subset(&pi), test.subset(&ti));
        let prior = empirical_expected_risk(&GpPosterior::prior(params), &test_b);
        let post = fit_posterior(&train_b, params)?;
        values.push(prior - empirical_expected_risk(&post, &test_b));
    }
    let (mean, sd) = mean_and_sd(&values);
    Ok(mean - 2.0 * sd)
}

/// One replication: data, hyperparameters and the passive trace.
struct Replication {
    seed: u64,
    params: KernelParams,
    pool: LabeledDataset,
    test: LabeledDataset,
    range: LossRange,
}

fn draw_replication(
    cfg: &ExperimentConfig,
    source: &DatasetSource,
    seed: u64,
) -> Result<Replication> {
    let full = cfg.prepare(source.load(None, seed)?)?;
    let (pool, test) = split_pool(&full, cfg.pool_size, derive_seed(seed, 0))?;
    let params = optimize_hyperparameters(&pool, &cfg.h_grid.values(), &cfg.beta_grid.values())?;
    Ok(Replication {
        seed,
        params,
        range: LossRange::from_targets(&full),
        pool,
        test,
    })
}

fn run_replication(
    cfg: &ExperimentConfig,
    rep: &Replication,
    criteria: &[CriterionConfig],
    eta: f64,
) -> Result<ScoredTrace> {
    let opts = AlOptions {
        max_steps: cfg.max_steps,
        ..AlOptions::new(derive_seed(rep.seed, 1))
    };
    let trace = run_active_learning(
        &rep.pool,
        Some(&rep.test),
        rep.params,
        criteria,
        rep.range,
        &opts,
    )?;
    let risks = trace.test_risk.as_deref().unwrap_or_default();
    let optimal = find_optimal_stop(risks, eta)?;
    Ok(ScoredTrace { trace, optimal })
}

fn resolve_eta(
    cfg: &ExperimentConfig,
    source: &DatasetSource,
    seed: u64,
) -> Result<(f64, Option<EtaCalibration>)> {
    match &cfg.eta {
        EtaSpec::Fixed(v) => Ok((*v, None)),
        EtaSpec::Calibrate { calibrate } => {
            let size = source.is_generator().then_some(calibrate.dataset_size);
            let ds = cfg.prepare(source.load(size, seed)?)?;
            let cal = calibrate_eta(
                &ds,
                calibrate.train_size,
                calibrate.repeats,
                &cfg.h_grid.values(),
                &cfg.beta_grid.values(),
                derive_seed(seed, 1),
            )?;
            Ok((cal.eta, Some(cal)))
        }
    }
}

/// Reference-dataset runs used to calibrate thresholds for `specs`.
pub fn record_reference_runs(
    cfg: &ExperimentConfig,
    specs: &[CriterionSpec],
    seed: u64,
) -> Result<(Vec<ScoredTrace>, f64)> {
    let source = cfg
        .reference
        .clone()
        .unwrap_or_else(|| cfg.dataset.default_reference());
    let source = &source;
    let (eta, _) = resolve_eta(cfg, source, derive_seed(seed, STREAM_ETA))?;
    // Only fixed thresholds matter here; calibrated ones re-scan statistics.
    let criteria: Vec<CriterionConfig> = specs
        .iter()
        .map(|s| {
            Ok(s.to_config(match s.plan()? {
                ThresholdPlan::Fixed(v) => v,
                _ => 0.0,
            }))
        })
        .collect::<Result<_>>()?;
    let runs = (0..cfg.reference_replications)
        .into_par_iter()
        .map(|r| {
            let rep = draw_replication(cfg, source, derive_seed(seed, 100 + r as u64))?;
            run_replication(cfg, &rep, &criteria, eta)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((runs, eta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub kind: CriterionKind,
    pub threshold: f64,
    pub stop_step: usize,
    /// False when the criterion never fired and `stop_step` is the trace end.
    pub fired: bool,
    pub e_stop: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub params: KernelParams,
    pub loss_range: LossRange,
    pub t_opt: usize,
    pub t_opt_reached: bool,
    pub outcomes: Vec<CriterionOutcome>,
    pub trace: AlTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionAggregate {
    pub kind: CriterionKind,
    pub mean_e_stop: f64,
    /// `sd / sqrt(n)` over replications.
    pub stderr: f64,
    pub mean_stop_step: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub eta: f64,
    pub eta_calibration: Option<EtaCalibration>,
    pub calibrations: Vec<ThresholdCalibration>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<ReplicationFailure>,
    pub aggregates: Vec<CriterionAggregate>,
    /// Test risk per labeled-set size averaged over replications.
    pub mean_test_risk: Vec<f64>,
}

impl ExperimentReport {
    pub fn aggregate(&self, kind: CriterionKind) -> Option<&CriterionAggregate> {
        self.aggregates.iter().find(|a| a.kind == kind)
    }
}

/// Aggregates per criterion from per-replication records.
pub fn aggregate_records(
    kinds: &[CriterionKind],
    records: &[ReplicationRecord],
) -> Vec<CriterionAggregate> {
    kinds
        .iter()
        .map(|&kind| {
            let outcomes: Vec<&CriterionOutcome> = records
                .iter()
                .filter_map(|r| r.outcomes.iter().find(|o| o.kind == kind))
                .collect();
            let errors: Vec<f64> = outcomes.iter().map(|o| o.e_stop as f64).collect();
            let stops: Vec<f64> = outcomes.iter().map(|o| o.stop_step as f64).collect();
            let n = errors.len();
            let (mean, sd) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                mean_and_sd(&errors)
            };
            CriterionAggregate {
                kind,
                mean_e_stop: mean,
                stderr: sd / (n as f64).sqrt(),
                mean_stop_step: if n == 0 {
                    f64::NAN
                } else {
                    mean_and_sd(&stops).0
                },
                n,
            }
        })
        .collect()
}

/// The `eta` an experiment would use.
pub fn experiment_eta(cfg: &ExperimentConfig) -> Result<(f64, Option<EtaCalibration>)> {
    cfg.validate()?;
    resolve_eta(cfg, &cfg.dataset, derive_seed(cfg.seed, STREAM_ETA))
}

/// Calibrates the threshold of the configured criterion `kind` over
/// `range`, or over the default range for the kind.
pub fn calibrate_criterion(
    cfg: &ExperimentConfig,
    kind: CriterionKind,
    range: Option<ThresholdRange>,
) -> Result<ThresholdCalibration> {
    cfg.validate()?;
    let spec = cfg
        .criteria
        .iter()
        .find(|c| c.kind == kind)
        .cloned()
        .unwrap_or_else(|| CriterionSpec::new(kind));
    let range = match range.or_else(|| ThresholdRange::default_for(kind)) {
        Some(r) => r,
        None => {
            return Err(Error::Config(format!(
                "{kind} has no calibratable threshold"
            )))
        }
    };
    let (runs, _) = record_reference_runs(cfg, &[spec], derive_seed(cfg.seed, STREAM_REFERENCE))?;
    calibrate_threshold(&runs, 0, range)
}

/// Runs all replications of `cfg` in parallel.
///
/// A failing replication is recorded in `failures` and left out of the
/// aggregates; the experiment only errors when every replication fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let plans: Vec<ThresholdPlan> = cfg
        .criteria
        .iter()
        .map(CriterionSpec::plan)
        .collect::<Result<_>>()?;

    let (eta, eta_calibration) = resolve_eta(cfg, &cfg.dataset, derive_seed(cfg.seed, STREAM_ETA))?;

    // Thresholds calibrated on reference runs.
    let mut thresholds: Vec<Option<f64>> = plans
        .iter()
        .map(|p| match p {
            ThresholdPlan::Fixed(v) => Some(*v),
            _ => None,
        })
        .collect();
    let mut calibrations = Vec::new();
    let to_calibrate: Vec<usize> = plans
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p, ThresholdPlan::Calibrate(_)))
        .map(|(i, _)| i)
        .collect();
    if !to_calibrate.is_empty() {
        let specs: Vec<CriterionSpec> = to_calibrate
            .iter()
            .map(|&i| cfg.criteria[i].clone())
            .collect();
        let (runs, _) =
            record_reference_runs(cfg, &specs, derive_seed(cfg.seed, STREAM_REFERENCE))?;
        for (j, &i) in to_calibrate.iter().enumerate() {
            let ThresholdPlan::Calibrate(range) = plans[i] else {
                unreachable!()
            };
            let cal = calibrate_threshold(&runs, j, range)?;
            thresholds[i] = Some(cal.threshold);
            calibrations.push(cal);
        }
    }

    let outcomes: Vec<Result<ReplicationRecord>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(derive_seed(cfg.seed, STREAM_REPLICATION), r as u64);
            replicate(cfg, &plans, &thresholds, eta, r, seed)
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rec) => records.push(rec),
            Err(e) => {
                failures.push(ReplicationFailure {
                    replication: r,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if records.is_empty() {
        return Err(first_error.expect("at least one replication"));
    }

    let kinds: Vec<CriterionKind> = cfg.criteria.iter().map(|c| c.kind).collect();
    let aggregates = aggregate_records(&kinds, &records);
    let mean_test_risk =
        average_curves(records.iter().filter_map(|r| r.trace.test_risk.as_deref()));
    Ok(ExperimentReport {
        config: cfg.clone(),
        eta,
        eta_calibration,
        calibrations,
        records,
        failures,
        aggregates,
        mean_test_risk,
    })
}

fn replicate(
    cfg: &ExperimentConfig,
    plans: &[ThresholdPlan],
    thresholds: &[Option<f64>],
    eta: f64,
    index: usize,
    seed: u64,
) -> Result<ReplicationRecord> {
    let rep = draw_replication(cfg, &cfg.dataset, seed)?;
    let mut resolved = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        resolved.push(match plan {
            ThresholdPlan::Bootstrap => bootstrap_ground_truth_threshold(
                &rep.pool,
                &rep.test,
                rep.params,
                cfg.bootstrap_repeats,
                derive_seed(seed, STREAM_BOOTSTRAP),
            )?,
            _ => thresholds[i].expect("fixed or calibrated threshold"),
        });
    }
    let criteria: Vec<CriterionConfig> = cfg
        .criteria
        .iter()
        .zip(&resolved)
        .map(|(s, &t)| s.to_config(t))
        .collect();
    let scored = run_replication(cfg, &rep, &criteria, eta)?;
    let steps = scored.trace.steps();
    let outcomes = scored
        .trace
        .criteria
        .iter()
        .map(|c| {
            let (stop_step, fired) = scored_stop(c.stop_step, steps);
            CriterionOutcome {
                kind: c.config.kind(),
                threshold: c.config.threshold(),
                stop_step,
                fired,
                e_stop: stopping_error(stop_step, scored.optimal.t_opt),
            }
        })
        .collect();
    Ok(ReplicationRecord {
        replication: index,
        seed,
        params: rep.params,
        loss_range: rep.range,
        t_opt: scored.optimal.t_opt,
        t_opt_reached: scored.optimal.reached,
        outcomes,
        trace: scored.trace,
    })
}

fn average_curves<'a>(curves: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for c in curves {
        if sums.len() < c.len() {
            sums.resize(c.len(), 0.0);
            counts.resize(c.len(), 0);
        }
        for (i, v) in c.iter().enumerate() {
            sums[i] += v;
            counts[i] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect()
}

/// Formats with six significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..15).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.5e}")
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `criterion,mean_e_stop,stderr`.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("criterion,mean_e_stop,stderr\n");
    for a in &report.aggregates {
        out.push_str(&format!(
            "{},{},{}\n",
            a.kind,
            sig6(a.mean_e_stop),
            sig6(a.stderr)
        ));
    }
    out
}

/// Per-step trace: row `t` holds the bound for the step from `t` to `t + 1`
/// labels, the runs-test z after appending it, the test risk with `t`
/// labels and whether each criterion's statistic fires at `t`.
pub fn trace_csv(record: &ReplicationRecord) -> String {
    let trace = &record.trace;
    let mut out = String::from("step,r_t,kl_t,z,test_risk");
    for c in &trace.criteria {
        out.push_str(&format!(",fired_{}", c.config.kind()));
    }
    out.push('\n');
    let cell = |v: Option<f64>| v.map(sig6).unwrap_or_default();
    for t in 1..=trace.steps() {
        let i = t - 1;
        out.push_str(&format!(
            "{t},{},{},{},{}",
            cell(trace.bound_trace.r_values.get(i).copied()),
            cell(trace.bound_trace.kl_values.get(i).copied()),
            cell(
                trace
                    .bound_trace
                    .decisions
                    .get(i)
                    .and_then(|d| d.as_ref())
                    .map(|d| d.z)
            ),
            cell(trace.test_risk.as_ref().and_then(|r| r.get(i).copied())),
        ));
        for c in &trace.criteria {
            let fired =
                c.statistics[i].is_some_and(|s| c.config.kind().fires(s, c.config.threshold()));
            out.push_str(if fired { ",1" } else { ",0" });
        }
        out.push('\n');
    }
    out
}

/// Writes `report.json`, `summary.csv` and one `trace_<rep>.csv` per
/// replication into `dir`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    let path = dir.join("report.json");
    fs::write(&path, json).map_err(io_err(&path))?;
    let path = dir.join("summary.csv");
    fs::write(&path, summary_csv(report)).map_err(io_err(&path))?;
    for rec in &report.records {
        let path = dir.join(format!("trace_{}.csv", rec.replication));
        fs::write(&path, trace_csv(rec)).map_err(io_err(&path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn optimal_stop_examples() {
        assert_eq!(
            find_optimal_stop(&[3.0, 2.0, 1.0], 2.0).unwrap(),
            OptimalStop {
                t_opt: 2,
                reached: true
            }
        );
        assert_eq!(
            find_optimal_stop(&[3.0, 2.0, 1.0], 0.5).unwrap(),
            OptimalStop {
                t_opt: 4,
                reached: false
            }
        );
        assert_eq!(find_optimal_stop(&[3.0, 2.0, 1.0], 10.0).unwrap().t_opt, 1);
        assert!(find_optimal_stop(&[], 1.0).is_err());
    }

    #[test]
    fn stopping_error_examples() {
        assert_eq!(stopping_error(30, 25), 5);
        assert_eq!(stopping_error(25, 30), 5);
        assert_eq!(stopping_error(17, 17), 0);
    }

    #[test]
    fn mean_sd_conventions() {
        assert_eq!(mean_and_sd(&[4.0]), (4.0, 0.0));
        let (m, s) = mean_and_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s, (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn eta_single_repeat_is_the_risk() {
        let ds = generate_artificial(120, 100.0, (-5.0, 15.0), 4)
            .unwrap()
            .standardize()
            .unwrap();
        let grid = log_grid(0.1, 10.0, 5);
        let cal = calibrate_eta(&ds, 30, 1, &grid, &grid, 9).unwrap();
        assert_eq!(cal.sd, 0.0);
        assert_eq!(cal.eta, cal.risks[0]);
        assert!(calibrate_eta(&ds, 120, 1, &grid, &grid, 9).is_err());
        assert!(calibrate_eta(&ds, 30, 0, &grid, &grid, 9).is_err());
    }

    #[test]
    fn threshold_ranges() {
        let r = ThresholdRange::default_for(CriterionKind::PacBayes).unwrap();
        assert_eq!((r.min, r.max), (0.01, 100.0));
        let r = ThresholdRange::default_for(CriterionKind::CrossValidation).unwrap();
        assert_eq!((r.min, r.max), (0.001, 10.0));
        let r = ThresholdRange::default_for(CriterionKind::MaxVariance).unwrap();
        assert_eq!((r.min, r.max), (0.0001, 1.0));
        assert!(ThresholdRange::default_for(CriterionKind::Proposed).is_none());
        let g = ThresholdRange {
            min: 0.0,
            max: 1.0,
            grid_count: 5,
        }
        .values();
        assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(2.380000), "2.38000");
        assert_eq!(sig6(123456.789), "123457");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(1.5e-9), "1.50000e-9");
        assert_eq!(sig6(0.0), "0");
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"dataset":{"kind":"artificial"}}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::new(DatasetSource::artificial()));
        cfg.validate().unwrap();

        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset":{"kind":"artificial","n":200},
                "eta": 1.5,
                "criteria":[{"kind":"proposed","alpha":0.01},
                            {"kind":"pac_bayes","threshold":"calibrate"},
                            {"kind":"max_variance","threshold":{"calibrate":{"min":0.0,"max":1.0,"grid_count":11}}},
                            {"kind":"cross_validation","threshold":2.0},
                            {"kind":"ground_truth","threshold":"bootstrap"}]}"#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.eta, EtaSpec::Fixed(1.5));

        let mut bad = cfg.clone();
        bad.replications = 0;
        assert!(bad.validate().is_err());
        let mut dup = cfg.clone();
        dup.criteria
            .push(CriterionSpec::new(CriterionKind::Proposed));
        assert!(dup.validate().is_err());
        let mut gt = cfg;
        gt.criteria = vec![CriterionSpec::new(CriterionKind::MaxVariance)
            .with_threshold(ThresholdSpec::Named("bootstrap".into()))];
        assert!(gt.validate().is_err());
    }
}
