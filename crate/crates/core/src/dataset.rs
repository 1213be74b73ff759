//! Labeled regression data: loading, synthetic generators, standardization
//! and pool/test splitting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

/// Rows of (input vector, scalar target) plus the affine maps applied by
/// [`LabeledDataset::standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    feature_means: Vec<f64>,
    feature_sds: Vec<f64>,
    target_mean: f64,
    target_sd: f64,
    standardized: bool,
}

/// Which column of a table holds the regression target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    Index(usize),
    Name(String),
}

impl FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.parse::<usize>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.to_string()),
        })
    }
}

impl fmt::Display for TargetColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetColumn::Index(i) => write!(f, "#{i}"),
            TargetColumn::Name(n) => write!(f, "\"{n}\""),
        }
    }
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Data("dataset must contain at least one row".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} input rows but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(Error::Data("inputs must have at least one feature".into()));
        }
        if let Some(bad) = inputs.iter().find(|row| row.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        Ok(Self {
            inputs,
            targets,
            feature_means: vec![0.0; dim],
            feature_sds: vec![1.0; dim],
            target_mean: 0.0,
            target_sd: 1.0,
            standardized: false,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn feature_means(&self) -> &[f64] {
        &self.feature_means
    }

    pub fn feature_sds(&self) -> &[f64] {
        &self.feature_sds
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn target_sd(&self) -> f64 {
        self.target_sd
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    /// `max(y) - min(y)`, the loss-range width used for bound calibration.
    pub fn target_span(&self) -> f64 {
        let (lo, hi) = self
            .targets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
                (lo.min(y), hi.max(y))
            });
        hi - lo
    }

    /// Rows at `indices`, in that order. Standardization metadata is kept.
    ///
    /// Panics if `indices` is empty or out of range.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        assert!(!indices.is_empty(), "subset must be non-empty");
        LabeledDataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            ..self.clone_metadata()
        }
    }

    fn clone_metadata(&self) -> LabeledDataset {
        LabeledDataset {
            inputs: Vec::new(),
            targets: Vec::new(),
            feature_means: self.feature_means.clone(),
            feature_sds: self.feature_sds.clone(),
            target_mean: self.target_mean,
            target_sd: self.target_sd,
            standardized: self.standardized,
        }
    }

    /// Shifts and scales every feature column and the target to mean 0 and
    /// population sd 1. Constant columns become all zeros (their stored sd
    /// is 0, so de-standardizing still recovers the constant).
    pub fn standardize(&self) -> Result<LabeledDataset> {
        if self.standardized {
            return Err(Error::AlreadyStandardized);
        }
        let dim = self.dim();
        let mut feature_means = Vec::with_capacity(dim);
        let mut feature_sds = Vec::with_capacity(dim);
        let mut columns: Vec<Vec<f64>> = Vec::with_capacity(dim);
        for j in 0..dim {
            let col: Vec<f64> = self.inputs.iter().map(|row| row[j]).collect();
            let (mean, sd, scaled) = standardize_column(&col);
            feature_means.push(mean);
            feature_sds.push(sd);
            columns.push(scaled);
        }
        let inputs = (0..self.len())
            .map(|i| columns.iter().map(|c| c[i]).collect())
            .collect();
        let (target_mean, target_sd, targets) = standardize_column(&self.targets);
        Ok(LabeledDataset {
            inputs,
            targets,
            feature_means,
            feature_sds,
            target_mean,
            target_sd,
            standardized: true,
        })
    }

    /// Maps standardized inputs and targets back to the original units.
    pub fn destandardize(&self) -> LabeledDataset {
        if !self.standardized {
            return self.clone();
        }
        let inputs = self
            .inputs
            .iter()
            .map(|row| {
                row.iter()
                    .zip(self.feature_means.iter().zip(&self.feature_sds))
                    .map(|(&v, (&m, &s))| v * s + m)
                    .collect()
            })
            .collect();
        let targets = self
            .targets
            .iter()
            .map(|&y| y * self.target_sd + self.target_mean)
            .collect();
        LabeledDataset {
            inputs,
            targets,
            feature_means: vec![0.0; self.dim()],
            feature_sds: vec![1.0; self.dim()],
            target_mean: 0.0,
            target_sd: 1.0,
            standardized: false,
        }
    }

    /// Writes `x1,..,xd,y` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header).map_err(io_err)?;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(y.to_string());
            w.write_record(&rec).map_err(io_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Population mean/sd and the standardized column.
fn standardize_column(col: &[f64]) -> (f64, f64, Vec<f64>) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * (1.0 + mean.abs()) {
        return (mean, 0.0, vec![0.0; col.len()]);
    }
    (mean, sd, col.iter().map(|v| (v - mean) / sd).collect())
}

/// Reads a comma-delimited numeric table with one header row.
pub fn load_table(path: &Path, target: &TargetColumn) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let target_idx = match target {
        TargetColumn::Index(i) if *i < header.len() => *i,
        TargetColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingTargetColumn(target.to_string()))?,
        _ => return Err(Error::MissingTargetColumn(target.to_string())),
    };
    if header.len() < 2 {
        return Err(Error::Data(
            "table needs a target and at least one feature".into(),
        ));
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // Line numbers in the file: header is line 1.
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            column: 0,
            message: e.to_string(),
        })?;
        let mut features = Vec::with_capacity(header.len() - 1);
        let mut y = 0.0;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                message: format!("non-numeric value {cell:?}"),
            })?;
            if c == target_idx {
                y = v;
            } else {
                features.push(v);
            }
        }
        inputs.push(features);
        targets.push(y);
    }
    if targets.len() < 2 {
        return Err(Error::Data(format!(
            "table has {} data rows, need at least 2",
            targets.len()
        )));
    }
    LabeledDataset::new(inputs, targets)
}

/// Noise-free regression function of the one-dimensional benchmark.
pub fn artificial_mean(x: f64) -> f64 {
    (-(x - 2.0).powi(2) / 2.0).exp() + (-(x - 6.0).powi(2) / 10.0).exp() + 1.0 / (x * x + 1.0)
}

/// `sgn(sin(2 pi x))` with `sgn(0) = +1`.
pub fn sign_wave_value(x: f64) -> f64 {
    if (2.0 * std::f64::consts::PI * x).sin() < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Draws `n` points `x ~ U(x_range)`, `y = artificial_mean(x) + eps` with
/// `eps ~ N(0, 1 / noise_precision)`.
pub fn generate_artificial(
    n: usize,
    noise_precision: f64,
    x_range: (f64, f64),
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if !(noise_precision > 0.0 && noise_precision.is_finite()) {
        return Err(Error::InvalidArgument(
            "noise precision must be positive".into(),
        ));
    }
    let (lo, hi) = x_range;
    if !(lo < hi) {
        return Err(Error::InvalidArgument(format!(
            "empty x range [{lo}, {hi}]"
        )));
    }
    let mut rng = seeded_rng(seed);
    let noise = Normal::new(0.0, noise_precision.recip().sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(lo..hi);
        inputs.push(vec![x]);
        targets.push(artificial_mean(x) + noise.sample(&mut rng));
    }
    LabeledDataset::new(inputs, targets)
}

/// Draws `n` points `x ~ U[0, 1)` labeled by [`sign_wave_value`].
pub fn generate_sign_wave(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let targets = xs.iter().map(|&x| sign_wave_value(x)).collect();
    LabeledDataset::new(xs.into_iter().map(|x| vec![x]).collect(), targets)
}

/// Uniform random partition into a pool of `pool_size` rows and a test set
/// with the rest. Both parts keep the original row order.
pub fn split_pool(
    ds: &LabeledDataset,
    pool_size: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if pool_size == 0 || pool_size >= ds.len() {
        return Err(Error::InvalidArgument(format!(
            "pool size {pool_size} must be in [1, {})",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seeded_rng(seed));
    let (pool, test) = idx.split_at_mut(pool_size);
    pool.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(pool), ds.subset(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_by_name_and_index() {
        let f = write_tmp("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_table(f.path(), &TargetColumn::Name("y".into())).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.targets(), &[3.0, 6.0, 9.0]);
        assert!(!ds.is_standardized());

        let ds = load_table(f.path(), &TargetColumn::Index(0)).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.targets(), &[1.0, 4.0, 7.0]);
        assert_eq!(ds.input(1), &[5.0, 6.0]);
    }

    #[test]
    fn load_rejects_non_numeric() {
        let f = write_tmp("x1,x2,y\n1,2,3\n4,abc,6\n");
        match load_table(f.path(), &TargetColumn::Name("y".into())) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!((row, column), (3, 2));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_error_paths() {
        let f = write_tmp("x1,y\n1,2\n3,4\n");
        assert!(matches!(
            load_table(f.path(), &TargetColumn::Name("z".into())),
            Err(Error::MissingTargetColumn(_))
        ));
        assert!(matches!(
            load_table(f.path(), &TargetColumn::Index(5)),
            Err(Error::MissingTargetColumn(_))
        ));
        let one_row = write_tmp("x1,y\n1,2\n");
        assert!(matches!(
            load_table(one_row.path(), &TargetColumn::Index(1)),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            load_table(Path::new("/nonexistent/table.csv"), &TargetColumn::Index(0)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn standardize_uses_population_sd() {
        let ds = LabeledDataset::new(vec![vec![1.0], vec![2.0], vec![3.0]], vec![0.0, 1.0, 5.0])
            .unwrap();
        let s = ds.standardize().unwrap();
        let expected = (1.5f64).sqrt();
        assert_abs_diff_eq!(s.input(0)[0], -expected, epsilon = 1e-6);
        assert_abs_diff_eq!(s.input(1)[0], 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.input(2)[0], expected, epsilon = 1e-6);
        assert_abs_diff_eq!(s.input(2)[0], 1.2247, epsilon = 1e-4);
        assert!(s.is_standardized());
        assert!(matches!(s.standardize(), Err(Error::AlreadyStandardized)));
    }

    #[test]
    fn standardize_constant_column_to_zero() {
        let ds = LabeledDataset::new(
            vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 4.0]],
            vec![1.0, 2.0, 3.0],
        )
        .unwrap();
        let s = ds.standardize().unwrap();
        for row in s.inputs() {
            assert_eq!(row[0], 0.0);
        }
        assert_eq!(s.feature_sds()[0], 0.0);
        let back = s.destandardize();
        for row in back.inputs() {
            assert_abs_diff_eq!(row[0], 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn standardize_is_idempotent_on_normalized_values() {
        let ds = LabeledDataset::new(vec![vec![1.0], vec![2.0], vec![3.0]], vec![0.0, 1.0, 5.0])
            .unwrap();
        let once = ds.standardize().unwrap();
        let again = LabeledDataset::new(once.inputs().to_vec(), once.targets().to_vec())
            .unwrap()
            .standardize()
            .unwrap();
        for (a, b) in once.inputs().iter().zip(again.inputs()) {
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn artificial_noiseless_values() {
        // 1 + e^{-1.6} + 1/5 and e^{-2} + e^{-3.6} + 1.
        let at2 = 1.0 + (-1.6f64).exp() + 0.2;
        let at0 = (-2.0f64).exp() + (-3.6f64).exp() + 1.0;
        assert_abs_diff_eq!(artificial_mean(2.0), at2, epsilon = 1e-12);
        assert_abs_diff_eq!(artificial_mean(2.0), 1.4018965, epsilon = 1e-7);
        assert_abs_diff_eq!(artificial_mean(0.0), at0, epsilon = 1e-12);
        assert_abs_diff_eq!(artificial_mean(0.0), 1.1626590, epsilon = 1e-7);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = generate_artificial(50, 100.0, (-5.0, 15.0), 3).unwrap();
        let b = generate_artificial(50, 100.0, (-5.0, 15.0), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.inputs().iter().all(|x| (-5.0..15.0).contains(&x[0])));
        let c = generate_artificial(50, 100.0, (-5.0, 15.0), 4).unwrap();
        assert_ne!(a, c);

        let s = generate_sign_wave(40, 9).unwrap();
        assert_eq!(s, generate_sign_wave(40, 9).unwrap());
        for (x, y) in s.inputs().iter().zip(s.targets()) {
            assert_eq!(*y, sign_wave_value(x[0]));
        }
    }

    #[test]
    fn generator_argument_errors() {
        assert!(generate_artificial(0, 1.0, (0.0, 1.0), 0).is_err());
        assert!(generate_artificial(5, 0.0, (0.0, 1.0), 0).is_err());
        assert!(generate_artificial(5, -1.0, (0.0, 1.0), 0).is_err());
        assert!(generate_sign_wave(0, 0).is_err());
    }

    #[test]
    fn sign_wave_convention() {
        assert_eq!(sign_wave_value(0.25), 1.0);
        assert_eq!(sign_wave_value(0.75), -1.0);
        // sin(pi) evaluates to ~1.2e-16 > 0; sgn(0) maps to +1 either way.
        assert_eq!(sign_wave_value(0.5), 1.0);
        assert_eq!(sign_wave_value(0.0), 1.0);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = generate_artificial(1000, 100.0, (-5.0, 15.0), 1).unwrap();
        let (pool, test) = split_pool(&ds, 50, 2).unwrap();
        assert_eq!((pool.len(), test.len()), (50, 950));
        let (pool2, test2) = split_pool(&ds, 50, 2).unwrap();
        assert_eq!(pool, pool2);
        assert_eq!(test, test2);

        let (_, one) = split_pool(&ds, 999, 2).unwrap();
        assert_eq!(one.len(), 1);
        assert!(split_pool(&ds, 0, 2).is_err());
        assert!(split_pool(&ds, 1000, 2).is_err());
    }
}
