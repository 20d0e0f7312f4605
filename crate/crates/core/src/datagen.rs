//! Synthetic benchmarks with meta-feature matrices, and CSV/JSON storage.
//!
//! On disk a dataset is four files in one directory:
//!
//! * `features.csv`: header of feature names, one row per sample
//! * `labels.csv`: header `label`, one value per sample
//! * `metafeatures.csv`: header `feature,<meta names>`, one row per feature
//! * `splits.json`: `{"train": [...], "val": [...], "test": [...]}`
//!
//! Numbers are written with 17 significant digits so they parse back exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{csv_io, fmt_f64};
use crate::autodiff::{sigmoid, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Row indices of each split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Checks that the splits partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!("split index {i} out of range for {n} rows")));
            }
            if seen[i] {
                return Err(Error::invalid(format!("row {i} appears in more than one split")));
            }
            seen[i] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("row {missing} is not assigned to any split")));
        }
        Ok(())
    }

    /// Random partition into consecutive blocks of the given sizes
    /// (train, second, third); indices inside each split are sorted.
    fn random(rng: &mut Rng, n: usize, train: usize, second: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let mut a = perm[..train].to_vec();
        let mut b = perm[train..train + second].to_vec();
        let mut c = perm[train + second..].to_vec();
        a.sort_unstable();
        b.sort_unstable();
        c.sort_unstable();
        (a, b, c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// n × p
    pub x: Tensor,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub task: TaskKind,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<f64>, feature_names: Vec<String>, task: TaskKind, splits: Splits) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::invalid("features must be a matrix"));
        }
        if x.rows() != y.len() {
            return Err(Error::invalid(format!("{} feature rows but {} labels", x.rows(), y.len())));
        }
        if x.cols() != feature_names.len() {
            return Err(Error::invalid(format!("{} columns but {} feature names", x.cols(), feature_names.len())));
        }
        if task == TaskKind::Classification {
            if let Some(bad) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::invalid(format!("classification label {bad} is not 0 or 1")));
            }
        }
        splits.validate(y.len())?;
        Ok(Self { x, y, feature_names, task, splits })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn x_split(&self, split: Split) -> Tensor {
        self.x.select_rows(self.splits.get(split))
    }

    pub fn y_split(&self, split: Split) -> Vec<f64> {
        self.splits.get(split).iter().map(|&i| self.y[i]).collect()
    }

    /// Same rows, labels and splits with extra constant columns appended to
    /// every sample.
    pub fn with_appended_constants(&self, values: &[f64], names: Vec<String>) -> Result<Dataset> {
        let p = self.p();
        let width = p + values.len();
        let mut data = Vec::with_capacity(self.n() * width);
        for i in 0..self.n() {
            data.extend_from_slice(self.x.row(i));
            data.extend_from_slice(values);
        }
        let mut feature_names = self.feature_names.clone();
        feature_names.extend(names);
        Dataset::new(Tensor::matrix(self.n(), width, data)?, self.y.clone(), feature_names, self.task, self.splits.clone())
    }
}

/// p × k matrix whose row `i` describes feature `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaFeatureMatrix {
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub meta_names: Vec<String>,
}

impl MetaFeatureMatrix {
    pub fn new(values: Tensor, feature_names: Vec<String>, meta_names: Vec<String>) -> Result<Self> {
        if values.rank() != 2 || values.rows() != feature_names.len() || values.cols() != meta_names.len() {
            return Err(Error::invalid(format!(
                "meta-feature matrix {:?} does not match {} features × {} meta-features",
                values.shape(),
                feature_names.len(),
                meta_names.len()
            )));
        }
        if !values.is_finite() {
            return Err(Error::invalid("meta-feature matrix has non-finite entries"));
        }
        Ok(Self { values, feature_names, meta_names })
    }

    pub fn p(&self) -> usize {
        self.values.rows()
    }

    pub fn k(&self) -> usize {
        self.values.cols()
    }

    /// Checks row alignment with a dataset's features.
    pub fn check_aligned(&self, dataset: &Dataset) -> Result<()> {
        if self.feature_names != dataset.feature_names {
            return Err(Error::invalid(format!(
                "meta-features describe {} features, dataset has {} (names must match in order)",
                self.p(),
                dataset.p()
            )));
        }
        Ok(())
    }
}

fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

/// Two nested half circles in `x1, x2` (noise std 0.1) followed by
/// `n_nuisance` standard normal columns.
///
/// Classes differ by at most one sample. Splits are 20% train, 40% test, 40%
/// validation. The meta-features of feature `i` are its training-split mean
/// and sample standard deviation.
pub fn gen_two_moons(n: usize, n_nuisance: usize, seed: u64) -> Result<(Dataset, MetaFeatureMatrix)> {
    if n < 50 {
        return Err(Error::invalid(format!("two moons needs at least 50 samples, got {n}")));
    }
    let p = 2 + n_nuisance;
    let mut rng = rng::seeded(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");

    let mut labels: Vec<f64> = (0..n).map(|i| if i < n.div_ceil(2) { 0.0 } else { 1.0 }).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * p);
    for &label in &labels {
        let t = rng.random_range(0.0..PI);
        let (a, b) = if label == 0.0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        data.push(a + noise.sample(&mut rng));
        data.push(b + noise.sample(&mut rng));
        for _ in 0..n_nuisance {
            data.push(StandardNormal.sample(&mut rng));
        }
    }

    let n_train = n / 5;
    let n_test = (n - n_train) / 2;
    let (train, test, val) = Splits::random(&mut rng, n, n_train, n_test);
    let names = numbered("x", p);
    let dataset = Dataset::new(
        Tensor::matrix(n, p, data)?,
        labels,
        names.clone(),
        TaskKind::Classification,
        Splits { train, val, test },
    )?;

    let train_x = dataset.x_split(Split::Train);
    let mut meta = Vec::with_capacity(p * 2);
    for j in 0..p {
        let col = train_x.column(j);
        meta.push(stats::mean(&col));
        meta.push(stats::sample_std(&col));
    }
    let m = MetaFeatureMatrix::new(Tensor::matrix(p, 2, meta)?, names, vec!["mean".into(), "std".into()])?;
    Ok((dataset, m))
}

/// Linear regression whose coefficients are a nonlinear function of the
/// meta-features.
///
/// `M ~ N(0,1)^{p×k}`; `h(m) = 2·sigmoid(3·m_1)·m_2`; `w` keeps the
/// `⌊p/10⌋` largest `|h|` and zeroes the rest. `X ~ N(0,1)^{n×p}`,
/// `y = Xw + ε` with `ε ~ N(0, noise_std²)`, then standardised with the
/// training split's mean and sample std. Splits are 60/20/20
/// train/val/test. Returns the unstandardised `w`.
pub fn gen_meta_regression(
    n: usize,
    p: usize,
    k: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(Dataset, MetaFeatureMatrix, Vec<f64>)> {
    if n < 5 || p == 0 {
        return Err(Error::invalid(format!("need n ≥ 5 and p ≥ 1, got n={n}, p={p}")));
    }
    if k < 2 {
        return Err(Error::invalid(format!("the importance function uses two meta-features, got k={k}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be finite and non-negative, got {noise_std}")));
    }
    let mut rng = rng::seeded(seed);
    let meta: Vec<f64> = (0..p * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let h: Vec<f64> = (0..p).map(|i| 2.0 * sigmoid(3.0 * meta[i * k]) * meta[i * k + 1]).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| h[b].abs().total_cmp(&h[a].abs()).then(a.cmp(&b)));
    let mut w = vec![0.0; p];
    for &i in order.iter().take(p / 10) {
        w[i] = h[i];
    }

    let x: Vec<f64> = (0..n * p).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut y: Vec<f64> = (0..n)
        .map(|r| {
            let signal: f64 = x[r * p..(r + 1) * p].iter().zip(&w).map(|(a, b)| a * b).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            signal + noise_std * eps
        })
        .collect();

    let n_train = 6 * n / 10;
    let n_val = (n - n_train) / 2;
    let (train, val, test) = Splits::random(&mut rng, n, n_train, n_val);
    let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
    let (mu, sd) = (stats::mean(&ytr), stats::sample_std(&ytr));
    if sd == 0.0 {
        return Err(Error::invalid("training labels are constant; cannot standardise"));
    }
    y.iter_mut().for_each(|v| *v = (*v - mu) / sd);

    let names = numbered("x", p);
    let dataset = Dataset::new(Tensor::matrix(n, p, x)?, y, names.clone(), TaskKind::Regression, Splits { train, val, test })?;
    let m = MetaFeatureMatrix::new(Tensor::matrix(p, k, meta)?, names, numbered("m", k))?;
    Ok((dataset, m, w))
}

/// Meta-features carrying no information: i.i.d. standard normal.
pub fn gen_noise_metafeatures(feature_names: &[String], k: usize, seed: u64) -> Result<MetaFeatureMatrix> {
    let mut rng = rng::seeded(seed);
    let p = feature_names.len();
    let values: Vec<f64> = (0..p * k).map(|_| StandardNormal.sample(&mut rng)).collect();
    MetaFeatureMatrix::new(Tensor::matrix(p, k, values)?, feature_names.to_vec(), numbered("noise", k))
}

/// Paths of the four files making up a stored dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub metafeatures: PathBuf,
    pub splits: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.csv"),
            labels: dir.join("labels.csv"),
            metafeatures: dir.join("metafeatures.csv"),
            splits: dir.join("splits.json"),
        }
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_io(path, e))
}

pub fn save_csv(paths: &DataPaths, dataset: &Dataset, meta: &MetaFeatureMatrix) -> Result<()> {
    let path = &paths.features;
    let mut w = writer(path)?;
    w.write_record(&dataset.feature_names).map_err(|e| csv_io(path, e))?;
    for i in 0..dataset.n() {
        w.write_record(dataset.x.row(i).iter().map(|v| fmt_f64(*v))).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let path = &paths.labels;
    let mut w = writer(path)?;
    w.write_record(["label"]).map_err(|e| csv_io(path, e))?;
    for v in &dataset.y {
        w.write_record([fmt_f64(*v)]).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    save_metafeatures(&paths.metafeatures, meta)?;

    let json = serde_json::to_string(&dataset.splits).expect("splits serialise");
    fs::write(&paths.splits, json + "\n").map_err(|e| Error::io(&paths.splits, e))
}

pub fn save_metafeatures(path: &Path, meta: &MetaFeatureMatrix) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["feature".to_string()];
    header.extend(meta.meta_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (i, name) in meta.feature_names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(meta.values.row(i).iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Reads a headed CSV, rejecting ragged rows. Line numbers are 1-based with
/// the header on line 1.
fn read_table(path: &Path) -> Result<Table> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        Some(rec) => rec.map_err(|e| csv_io(path, e))?.iter().map(str::to_string).collect(),
        None => {
            return Err(Error::Parse { path: path.into(), row: 1, column: 1, message: "missing header row".into() })
        }
    };
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                path: path.into(),
                row: i + 2,
                column: rec.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn parse_cell(path: &Path, row: usize, column: usize, cell: &str) -> Result<f64> {
    let err = |message: String| Error::Parse { path: path.into(), row, column, message };
    let v: f64 = cell.trim().parse().map_err(|_| err(format!("'{cell}' is not a number")))?;
    if !v.is_finite() {
        return Err(err(format!("'{cell}' is not a finite number")));
    }
    Ok(v)
}

pub fn load_metafeatures(path: &Path) -> Result<MetaFeatureMatrix> {
    let table = read_table(path)?;
    if table.header.len() < 2 {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: 1,
            message: "expected a feature-name column and at least one meta-feature".into(),
        });
    }
    let mut names = Vec::with_capacity(table.rows.len());
    let mut values = Vec::new();
    for (r, rec) in table.rows.iter().enumerate() {
        names.push(rec[0].clone());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            values.push(parse_cell(path, r + 2, c + 1, cell)?);
        }
    }
    let k = table.header.len() - 1;
    MetaFeatureMatrix::new(Tensor::matrix(names.len(), k, values)?, names, table.header[1..].to_vec())
}

/// Loads a stored dataset and its meta-features, checking that the
/// meta-feature rows name the dataset's features in the same order.
pub fn load_csv(paths: &DataPaths, task: TaskKind) -> Result<(Dataset, MetaFeatureMatrix)> {
    let path = &paths.features;
    let table = read_table(path)?;
    let p = table.header.len();
    let n = table.rows.len();
    let mut x = Vec::with_capacity(n * p);
    for (r, rec) in table.rows.iter().enumerate() {
        for (c, cell) in rec.iter().enumerate() {
            x.push(parse_cell(path, r + 2, c + 1, cell)?);
        }
    }
    let feature_names = table.header;

    let path = &paths.labels;
    let labels = read_table(path)?;
    if labels.header.len() != 1 {
        return Err(Error::Parse {
            path: path.into(),
            row: 1,
            column: 2,
            message: format!("expected a single column, found {}", labels.header.len()),
        });
    }
    let y = labels
        .rows
        .iter()
        .enumerate()
        .map(|(r, rec)| parse_cell(path, r + 2, 1, &rec[0]))
        .collect::<Result<Vec<_>>>()?;
    if y.len() != n {
        return Err(Error::Alignment {
            path: path.clone(),
            message: format!("{} labels for {n} feature rows", y.len()),
        });
    }

    let meta = load_metafeatures(&paths.metafeatures)?;
    if meta.feature_names != feature_names {
        let detail = if meta.p() != p {
            format!("{} meta-feature rows for {p} features", meta.p())
        } else {
            let i = meta.feature_names.iter().zip(&feature_names).position(|(a, b)| a != b).unwrap_or(0);
            format!("row {} names '{}' but feature {} is '{}'", i + 2, meta.feature_names[i], i + 1, feature_names[i])
        };
        return Err(Error::Alignment { path: paths.metafeatures.clone(), message: detail });
    }

    let text = fs::read_to_string(&paths.splits).map_err(|e| Error::io(&paths.splits, e))?;
    let splits: Splits =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: paths.splits.clone(), source })?;
    let dataset = Dataset::new(Tensor::matrix(n, p, x)?, y, feature_names, task, splits)
        .map_err(|e| Error::Alignment { path: paths.splits.clone(), message: e.to_string() })?;
    Ok((dataset, meta))
}
