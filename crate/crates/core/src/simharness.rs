//! Synthetic trials with known treatment effects, accuracy metrics and a
//! replicate runner that writes a CSV ledger.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{save_csv, CsvSchema, TrialDataset};
use crate::error::{Error, Result};
use crate::hte::{estimate_hte, fit_hte, EstimatorConfig, FittedHTEModel};

pub const N_SCENARIOS: usize = 16;
pub const MIN_COVARIATES: usize = 8;
pub const DEFAULT_NOISE_SD: f64 = 0.5;
pub const METHOD_LABEL: &str = "rulefit-hte";

fn sin2(v: f64) -> f64 {
    let s = v.sin();
    s * s
}

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Baseline outcome surface number `k` (1 to 4) at `x` (0-based covariates).
pub fn psi(k: usize, x: &[f64]) -> f64 {
    match k {
        1 => x[0] * x[1],
        2 => x[0] + x[2] - x[4],
        3 => 0.5 * ind(x[0] > -1.0) - 1.4 * ind(x[2] > 0.0),
        4 => 3.0 * sin2(x[3] + x[4]) - 0.2 * x[6].exp(),
        _ => panic!("baseline index {k} out of range"),
    }
}

/// Effect surface number `k` (1 to 4); number 4 is the null effect.
pub fn tau(k: usize, x: &[f64]) -> f64 {
    match k {
        1 => 2.0 * x[1] + x[2] * x[2] + x[4] * x[5] + x[7] * x[7],
        2 => 2.0 + 0.3 * ind(x[3] > -3.0) - 4.0 * ind(x[4] > 0.0) + 0.7 * ind(x[6] < 1.0),
        3 => 3.0 * sin2(x[0] * x[4]) + 5.0 * (x[7] + x[2]).exp(),
        4 => 0.0,
        _ => panic!("effect index {k} out of range"),
    }
}

/// Baseline and effect indices of a scenario id: id = 4 (b - 1) + e.
pub fn scenario_parts(id: usize) -> Result<(usize, usize)> {
    if !(1..=N_SCENARIOS).contains(&id) {
        return Err(Error::Scenario(id));
    }
    Ok(((id - 1) / 4 + 1, (id - 1) % 4 + 1))
}

/// Ids of the scenarios whose effect is identically zero.
pub fn null_scenarios() -> Vec<usize> {
    (1..=N_SCENARIOS).filter(|id| id % 4 == 0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: usize,
    pub n: usize,
    pub p: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(id: usize, n: usize, p: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            id,
            n,
            p,
            noise_sd: DEFAULT_NOISE_SD,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        scenario_parts(self.id)?;
        if self.p < MIN_COVARIATES {
            return Err(Error::param("p", format!("need at least {MIN_COVARIATES} covariates, got {}", self.p)));
        }
        if self.n < 2 {
            return Err(Error::param("n", format!("need at least 2 rows, got {}", self.n)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::param("noise_sd", format!("must be finite and non-negative, got {}", self.noise_sd)));
        }
        Ok(())
    }

    pub fn psi(&self, x: &[f64]) -> f64 {
        psi(scenario_parts(self.id).expect("validated").0, x)
    }

    pub fn tau(&self, x: &[f64]) -> f64 {
        tau(scenario_parts(self.id).expect("validated").1, x)
    }
}

/// Training and test samples drawn independently from one scenario.
#[derive(Debug, Clone)]
pub struct SimulatedTrial {
    pub train: TrialDataset,
    pub test: TrialDataset,
    pub tau_train: Array1<f64>,
    pub tau_test: Array1<f64>,
}

pub fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

fn draw_sample(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<(TrialDataset, Array1<f64>)> {
    let (n, p) = (spec.n, spec.p);
    let x = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let coin = Bernoulli::new(0.5).expect("valid probability");
    let z: Array1<u8> = (0..n).map(|_| u8::from(coin.sample(rng))).collect();
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::param("noise_sd", e.to_string()))?;
    let mut y = Array1::zeros(n);
    let mut t = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let row = row.to_vec();
        t[i] = spec.tau(&row);
        y[i] = spec.psi(&row) + (f64::from(z[i]) - 0.5) * t[i] + noise.sample(rng);
    }
    Ok((TrialDataset::new(y, x, z, covariate_names(p))?, t))
}

/// Draws the training set, then the test set, from one RNG seeded by `spec.seed`.
pub fn gen_scenario(spec: &ScenarioSpec) -> Result<SimulatedTrial> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train, tau_train) = draw_sample(spec, &mut rng)?;
    let (test, tau_test) = draw_sample(spec, &mut rng)?;
    Ok(SimulatedTrial {
        train,
        test,
        tau_train,
        tau_test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    /// Undefined when some true effect is exactly zero.
    pub rbias: Option<f64>,
    /// Undefined when either input is constant.
    pub spearman: Option<f64>,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: ArrayView1<'_, f64>) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

pub fn spearman(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Accuracy of `estimate` against `truth`.
pub fn compute_metrics(truth: ArrayView1<'_, f64>, estimate: ArrayView1<'_, f64>) -> Result<Metrics> {
    if truth.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "{} true effects but {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = truth.len() as f64;
    let mse = truth.iter().zip(estimate).map(|(t, e)| (t - e).powi(2)).sum::<f64>() / n;
    let rbias = truth
        .iter()
        .all(|&t| t != 0.0)
        .then(|| truth.iter().zip(estimate).map(|(t, e)| (e - t) / t).sum::<f64>() / n);
    Ok(Metrics {
        mse,
        rbias,
        spearman: spearman(truth, estimate),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub scenario: usize,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub cells: Vec<GridCell>,
    pub replicates: usize,
    pub seed: u64,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::param("cells", "grid has no cells"));
        }
        if self.replicates == 0 {
            return Err(Error::param("replicates", "must be at least 1"));
        }
        for c in &self.cells {
            ScenarioSpec::new(c.scenario, c.n, c.p, 0)?;
        }
        Ok(())
    }
}

/// Competing estimates read from files, one CSV per replicate holding a
/// `tau` column aligned with the test rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalMethod {
    pub label: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExperimentOptions {
    /// Fill the `seconds` column. Off by default so ledgers are reproducible.
    pub record_time: bool,
    pub external: Vec<ExternalMethod>,
    /// Write each replicate's train and test samples here.
    pub export_dir: Option<PathBuf>,
}

/// One ledger row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: usize,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    pub method: String,
    pub metrics: Option<Metrics>,
    pub seconds: Option<f64>,
    /// Active treatment rules; only known for the built-in method.
    pub active_rules: Option<usize>,
    pub error: Option<String>,
}

/// Per-replicate seed: a splitmix64 mix of the grid seed, cell and replicate.
pub fn replicate_seed(grid_seed: u64, cell: usize, replicate: usize) -> u64 {
    let mut v = grid_seed
        ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (replicate as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    v = v.wrapping_add(0x9E37_79B9_7F4A_7C15);
    v = (v ^ (v >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    v = (v ^ (v >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    v ^ (v >> 31)
}

/// Stem shared by exported samples and external estimate files.
pub fn replicate_stem(cell: &GridCell, seed: u64) -> String {
    format!("scenario{}_n{}_p{}_seed{}", cell.scenario, cell.n, cell.p, seed)
}

fn export_trial(dir: &Path, stem: &str, trial: &SimulatedTrial) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let schema = CsvSchema {
        outcome: "y".into(),
        treatment: "z".into(),
        covariates: trial.train.names().to_vec(),
    };
    save_csv(dir.join(format!("{stem}_train.csv")), &trial.train, &schema)?;
    save_csv(dir.join(format!("{stem}_test.csv")), &trial.test, &schema)?;
    let truth_path = dir.join(format!("{stem}_tau.csv"));
    let mut w = csv::Writer::from_path(&truth_path)?;
    w.write_record(["tau"])?;
    for t in &trial.tau_test {
        w.write_record([t.to_string()])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: truth_path.clone(),
        source,
    })?;
    Ok(())
}

/// Reads the `tau` column of an estimate file.
pub fn read_estimates(path: &Path) -> Result<Array1<f64>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "tau")
        .ok_or_else(|| Error::MissingColumns(vec!["tau".into()]))?;
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(col).unwrap_or("");
        let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
            row: row + 1,
            column: "tau".into(),
            value: cell.to_string(),
        })?;
        out.push(v);
    }
    Ok(Array1::from(out))
}

fn failed(cell: &GridCell, seed: u64, method: &str, err: &Error) -> SimResult {
    SimResult {
        scenario: cell.scenario,
        n: cell.n,
        p: cell.p,
        seed,
        method: method.to_string(),
        metrics: None,
        seconds: None,
        active_rules: None,
        error: Some(err.to_string()),
    }
}

fn run_replicate<F>(
    cell: &GridCell,
    seed: u64,
    config: &EstimatorConfig,
    opts: &ExperimentOptions,
    inspect: &F,
) -> Vec<SimResult>
where
    F: Fn(&GridCell, u64, &FittedHTEModel) + Sync,
{
    let trial = ScenarioSpec::new(cell.scenario, cell.n, cell.p, seed).and_then(|s| gen_scenario(&s));
    let trial = match trial {
        Ok(t) => t,
        Err(e) => return vec![failed(cell, seed, METHOD_LABEL, &e)],
    };
    let stem = replicate_stem(cell, seed);
    let mut out = Vec::with_capacity(1 + opts.external.len());
    if let Some(dir) = &opts.export_dir {
        if let Err(e) = export_trial(dir, &stem, &trial) {
            out.push(failed(cell, seed, METHOD_LABEL, &e));
            return out;
        }
    }

    let start = Instant::now();
    let cfg = EstimatorConfig {
        seed,
        ..config.clone()
    };
    let own = fit_hte(&trial.train, &cfg).and_then(|model| {
        let est = estimate_hte(&model, trial.test.x())?;
        let metrics = compute_metrics(trial.tau_test.view(), est.view())?;
        inspect(cell, seed, &model);
        Ok((metrics, model.active_treatment_rules()))
    });
    let elapsed = start.elapsed().as_secs_f64();
    out.push(match own {
        Ok((metrics, active)) => SimResult {
            scenario: cell.scenario,
            n: cell.n,
            p: cell.p,
            seed,
            method: METHOD_LABEL.to_string(),
            metrics: Some(metrics),
            seconds: opts.record_time.then_some(elapsed),
            active_rules: Some(active),
            error: None,
        },
        Err(e) => failed(cell, seed, METHOD_LABEL, &e),
    });

    for ext in &opts.external {
        let path = ext.dir.join(format!("{stem}.csv"));
        let res = read_estimates(&path).and_then(|est| compute_metrics(trial.tau_test.view(), est.view()));
        out.push(match res {
            Ok(metrics) => SimResult {
                scenario: cell.scenario,
                n: cell.n,
                p: cell.p,
                seed,
                method: ext.label.clone(),
                metrics: Some(metrics),
                seconds: None,
                active_rules: None,
                error: None,
            },
            Err(e) => failed(cell, seed, &ext.label, &e),
        });
    }
    out
}

/// Runs every replicate of every cell in parallel; results come back in
/// grid order (cell, then replicate, then method).
pub fn run_experiment(
    grid: &ExperimentGrid,
    config: &EstimatorConfig,
    opts: &ExperimentOptions,
) -> Result<Vec<SimResult>> {
    run_experiment_with(grid, config, opts, |_, _, _| {})
}

/// Like [`run_experiment`], calling `inspect` on every successfully fitted model.
pub fn run_experiment_with<F>(
    grid: &ExperimentGrid,
    config: &EstimatorConfig,
    opts: &ExperimentOptions,
    inspect: F,
) -> Result<Vec<SimResult>>
where
    F: Fn(&GridCell, u64, &FittedHTEModel) + Sync,
{
    grid.validate()?;
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..grid.cells.len())
        .flat_map(|c| (0..grid.replicates).map(move |r| (c, r)))
        .collect();
    let rows: Vec<Vec<SimResult>> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let seed = replicate_seed(grid.seed, c, r);
            run_replicate(&grid.cells[c], seed, config, opts, &inspect)
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

pub const LEDGER_HEADER: [&str; 9] = ["scenario", "n", "p", "seed", "method", "mse", "rbias", "spearman", "seconds"];

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn ledger_record(r: &SimResult) -> [String; 9] {
    let m = r.metrics.as_ref();
    [
        r.scenario.to_string(),
        r.n.to_string(),
        r.p.to_string(),
        r.seed.to_string(),
        r.method.clone(),
        na(m.map(|m| m.mse)),
        na(m.and_then(|m| m.rbias)),
        na(m.and_then(|m| m.spearman)),
        na(r.seconds),
    ]
}

pub fn write_ledger<W: Write>(writer: W, results: &[SimResult], header: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if header {
        w.write_record(LEDGER_HEADER)?;
    }
    for r in results {
        w.write_record(ledger_record(r))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "ledger".into(),
        source,
    })?;
    Ok(())
}

/// Appends to the ledger at `path`, writing the header only for a new or empty file.
pub fn append_ledger(path: &Path, results: &[SimResult]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    write_ledger(file, results, fresh)
}

/// Medians over the replicates of one (cell, method) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub scenario: usize,
    pub n: usize,
    pub p: usize,
    pub method: String,
    pub replicates: usize,
    pub failures: usize,
    pub median_mse: Option<f64>,
    /// Over replicates where relative bias is defined.
    pub median_rbias: Option<f64>,
    /// An undefined correlation (constant estimate) counts as 0.
    pub median_spearman: Option<f64>,
}

/// Median of the values; the mean of the two middle ones for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

/// Groups results by cell and method in order of first appearance.
pub fn summarize_cells(results: &[SimResult]) -> Vec<CellSummary> {
    let mut keys: Vec<(usize, usize, usize, &str)> = Vec::new();
    for r in results {
        let key = (r.scenario, r.n, r.p, r.method.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(scenario, n, p, method)| {
            let rows: Vec<&SimResult> = results
                .iter()
                .filter(|r| (r.scenario, r.n, r.p, r.method.as_str()) == (scenario, n, p, method))
                .collect();
            let ok: Vec<&Metrics> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let mse: Vec<f64> = ok.iter().map(|m| m.mse).collect();
            let rbias: Vec<f64> = ok.iter().filter_map(|m| m.rbias).collect();
            let rho: Vec<f64> = ok.iter().map(|m| m.spearman.unwrap_or(0.0)).collect();
            CellSummary {
                scenario,
                n,
                p,
                method: method.to_string(),
                replicates: rows.len(),
                failures: rows.len() - ok.len(),
                median_mse: median(&mse),
                median_rbias: median(&rbias),
                median_spearman: median(&rho),
            }
        })
        .collect()
}
