//! Trial data, CSV ingestion, winsorized linear basis and fold assignment.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Target scale of every retained linear column (training standard deviation).
pub const LINEAR_TERM_SD: f64 = 0.4;

/// Default winsorizing fraction for the linear terms.
pub const DEFAULT_WINSOR_FRACTION: f64 = 0.025;

/// Column names used to read or write a trial CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
}

/// A two-arm trial: outcome `y`, covariates `x` (n x p) and treatment `z`
/// (1 = target arm, 0 = control).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    y: Array1<f64>,
    x: Array2<f64>,
    z: Array1<u8>,
    names: Vec<String>,
}

impl TrialDataset {
    pub fn new(y: Array1<f64>, x: Array2<f64>, z: Array1<u8>, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if x.nrows() != n || z.len() != n {
            return Err(Error::Dimension(format!(
                "outcome has {n} rows, covariates {}, treatment {}",
                x.nrows(),
                z.len()
            )));
        }
        if names.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if n < 2 {
            return Err(Error::Dimension("a trial needs at least 2 rows".into()));
        }
        if let Some(i) = z.iter().position(|&v| v > 1) {
            return Err(Error::TreatmentDomain {
                row: i + 1,
                value: z[i].to_string(),
            });
        }
        if let Some(v) = y.iter().chain(x.iter()).find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value {v} in trial data")));
        }
        Ok(Self { y, x, z, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn z(&self) -> ArrayView1<'_, u8> {
        self.z.view()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Sizes of the (control, treated) arms.
    pub fn arm_sizes(&self) -> (usize, usize) {
        let treated = self.z.iter().filter(|&&v| v == 1).count();
        (self.n() - treated, treated)
    }

    pub fn require_both_arms(&self) -> Result<()> {
        let (control, treated) = self.arm_sizes();
        if treated == 0 {
            return Err(Error::EmptyArm {
                arm: "treated",
                context: "fitting needs both arms".into(),
            });
        }
        if control == 0 {
            return Err(Error::EmptyArm {
                arm: "control",
                context: "fitting needs both arms".into(),
            });
        }
        Ok(())
    }

    /// Covariates with the treatment indicator appended as the last column.
    pub fn features_with_treatment(&self) -> Array2<f64> {
        let (n, p) = self.x.dim();
        let mut out = Array2::zeros((n, p + 1));
        out.slice_mut(ndarray::s![.., ..p]).assign(&self.x);
        for (i, &z) in self.z.iter().enumerate() {
            out[[i, p]] = f64::from(z);
        }
        out
    }

    /// Rows at the given indices, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.y.select(Axis(0), rows),
            self.x.select(Axis(0), rows),
            self.z.select(Axis(0), rows),
            self.names.clone(),
        )
    }
}

/// Reads a trial from a UTF-8 CSV with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(BufReader::new(file), schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);

    let mut missing = Vec::new();
    let mut locate = |name: &str| {
        let idx = find(name);
        if idx.is_none() {
            missing.push(name.to_string());
        }
        idx.unwrap_or(0)
    };
    let y_col = locate(&schema.outcome);
    let z_col = locate(&schema.treatment);
    let x_cols: Vec<usize> = schema.covariates.iter().map(|c| locate(c)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }

    let p = x_cols.len();
    let mut y = Vec::new();
    let mut z = Vec::new();
    let mut x = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        y.push(parse_cell(&record, y_col, row, &schema.outcome)?);
        let raw_z = record.get(z_col).unwrap_or("").trim();
        let zi = match raw_z.parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                return Err(Error::TreatmentDomain {
                    row,
                    value: raw_z.to_string(),
                })
            }
        };
        z.push(zi);
        for (&c, name) in x_cols.iter().zip(&schema.covariates) {
            x.push(parse_cell(&record, c, row, name)?);
        }
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = y.len();
    let x = Array2::from_shape_vec((n, p), x).map_err(|e| Error::Dimension(e.to_string()))?;
    TrialDataset::new(Array1::from(y), x, Array1::from(z), schema.covariates.clone())
}

/// Reads only the named covariate columns; zero data rows is allowed.
pub fn read_covariates<R: Read>(reader: R, covariates: &[String]) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut missing = Vec::new();
    let cols: Vec<usize> = covariates
        .iter()
        .map(|name| {
            headers.iter().position(|h| h.trim() == name).unwrap_or_else(|| {
                missing.push(name.clone());
                0
            })
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        for (&c, name) in cols.iter().zip(covariates) {
            values.push(parse_cell(&record, c, r + 1, name)?);
        }
        n += 1;
    }
    Array2::from_shape_vec((n, covariates.len()), values).map_err(|e| Error::Dimension(e.to_string()))
}

fn parse_cell(record: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse {
            row,
            column: name.to_string(),
            value: raw.to_string(),
        }),
    }
}

/// Writes outcome, treatment, then covariates. Values use the shortest
/// representation that reads back to the same `f64`.
pub fn write_csv<W: Write>(writer: W, dataset: &TrialDataset, schema: &CsvSchema) -> Result<()> {
    if schema.covariates.len() != dataset.p() {
        return Err(Error::Dimension(format!(
            "schema names {} covariates, dataset has {}",
            schema.covariates.len(),
            dataset.p()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.outcome.clone(), schema.treatment.clone()];
    header.extend(schema.covariates.iter().cloned());
    w.write_record(&header)?;
    for i in 0..dataset.n() {
        let mut rec = Vec::with_capacity(dataset.p() + 2);
        rec.push(dataset.y[i].to_string());
        rec.push(dataset.z[i].to_string());
        rec.extend(dataset.x.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, dataset: &TrialDataset, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_csv(std::io::BufWriter::new(file), dataset, schema)
}

/// Linear-interpolation quantile of an already sorted slice.
fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lower and upper winsorizing bounds: the `q` and `1 - q` quantiles.
pub fn winsor_bounds(column: ArrayView1<'_, f64>, q: f64) -> Result<(f64, f64)> {
    if column.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..0.5).contains(&q) {
        return Err(Error::param("winsor", format!("fraction must lie in [0, 0.5), got {q}")));
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((sorted_quantile(&sorted, q), sorted_quantile(&sorted, 1.0 - q)))
}

/// Winsorizing bounds and scale for one covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub lower: f64,
    pub upper: f64,
    /// 0.4 / sd of the winsorized training column; 0 when not retained.
    pub scale: f64,
    pub retained: bool,
}

impl LinearTerm {
    pub fn winsorize(&self, value: f64) -> f64 {
        value.max(self.lower).min(self.upper)
    }

    pub fn transform(&self, value: f64) -> f64 {
        self.scale * self.winsorize(value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBasis {
    pub terms: Vec<LinearTerm>,
}

impl LinearBasis {
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.terms
            .iter()
            .enumerate()
            .filter(|(_, t)| t.retained)
            .map(|(j, _)| j)
    }

    pub fn n_retained(&self) -> usize {
        self.retained().count()
    }

    /// Transformed column `j` for every row of `x`, using the training bounds.
    pub fn column(&self, x: ArrayView2<'_, f64>, j: usize) -> Vec<f64> {
        let term = &self.terms[j];
        x.column(j).iter().map(|&v| term.transform(v)).collect()
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1.0)).sqrt()
}

/// Builds the winsorized, 0.4-scaled linear term of every covariate.
/// Columns whose winsorized training values are constant are flagged as not
/// retained instead of failing.
pub fn build_linear_basis(dataset: &TrialDataset, q: f64) -> Result<LinearBasis> {
    let mut terms = Vec::with_capacity(dataset.p());
    for col in dataset.x().axis_iter(Axis(1)) {
        let (lower, upper) = winsor_bounds(col, q)?;
        let wins: Vec<f64> = col.iter().map(|&v| v.max(lower).min(upper)).collect();
        let sd = sample_sd(&wins);
        let scale = if sd > 0.0 { LINEAR_TERM_SD / sd } else { 0.0 };
        let retained = sd > 0.0 && scale.is_finite();
        terms.push(LinearTerm {
            lower,
            upper,
            scale: if retained { scale } else { 0.0 },
            retained,
        });
    }
    Ok(LinearBasis { terms })
}

/// Cross-validation fold of every observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Row indices held out in fold `f`, and the rows used for training.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.folds.len()).partition(|&i| self.folds[i] == f)
    }
}

fn check_folds(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::param("folds", format!("need at least 2 folds, got {k}")));
    }
    if k > n {
        return Err(Error::param("folds", format!("{k} folds for {n} observations")));
    }
    Ok(())
}

/// Uniformly shuffled fold assignment with sizes differing by at most one.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_folds(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut folds = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        folds[i] = pos % k;
    }
    Ok(FoldAssignment { folds, k, seed })
}

/// Like [`split_folds`] but deals each arm round-robin so every fold sees
/// both arms whenever each arm has at least `k` members.
pub fn split_folds_stratified(z: ArrayView1<'_, u8>, k: usize, seed: u64) -> Result<FoldAssignment> {
    let n = z.len();
    check_folds(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; n];
    let mut pos = 0;
    for arm in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| z[i] == arm).collect();
        members.shuffle(&mut rng);
        for i in members {
            folds[i] = pos % k;
            pos += 1;
        }
    }
    Ok(FoldAssignment { folds, k, seed })
}
