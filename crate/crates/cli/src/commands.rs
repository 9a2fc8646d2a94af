//! The four subcommands as plain functions over paths.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rulefit_hte::dataset::{load_csv, read_covariates, CsvSchema};
use rulefit_hte::hte::{
    above_mean_importance, estimate_hte, fit_hte_full, format_report, predict_mu, subgroup_ate, tertile_diagnostic,
    training_report, Arm, ArmSummary, RuleReportRow,
};
use rulefit_hte::simharness::{run_experiment, summarize_cells, write_ledger, CellSummary, SimResult};
use rulefit_hte::Error;

use crate::config::{GridConfig, RunConfig, SchemaConfig};
use crate::error::CliError;
use crate::model_file::ModelFile;

pub const MODEL_FILE: &str = "model.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const TERTILE_CSV: &str = "tertiles.csv";
pub const FOREST_CSV: &str = "forest.csv";

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::io(path, e))
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), num)
}

/// Characters that would make rule text ambiguous.
const RESERVED: [char; 4] = ['&', '<', '>', '='];

/// Resolves the covariate list, defaulting to every column that is neither
/// outcome nor treatment.
pub fn resolve_schema(schema: &SchemaConfig, data: &Path) -> Result<CsvSchema, CliError> {
    let covariates = match &schema.covariates {
        Some(c) => c.clone(),
        None => {
            let mut rdr = csv::Reader::from_reader(File::open(data).map_err(|e| CliError::io(data, e))?);
            rdr.headers()?
                .iter()
                .map(str::trim)
                .filter(|h| *h != schema.outcome && *h != schema.treatment)
                .map(str::to_string)
                .collect()
        }
    };
    if covariates.is_empty() {
        return Err(CliError::data("no covariate columns"));
    }
    if let Some(bad) = covariates.iter().find(|c| c.is_empty() || c.contains(RESERVED)) {
        return Err(CliError::data(format!(
            "covariate name '{bad}' is empty or contains one of & < > ="
        )));
    }
    Ok(CsvSchema {
        outcome: schema.outcome.clone(),
        treatment: schema.treatment.clone(),
        covariates,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub out_dir: PathBuf,
    pub active_rules: usize,
    pub lambda: f64,
    pub rows: Vec<RuleReportRow>,
}

/// Fits a model and writes the model file, rule report, tertile table and
/// forest-plot table into `out_dir`.
pub fn cmd_fit(config: &Path, data: &Path, out_dir: &Path, sets: &[String]) -> Result<FitOutcome, CliError> {
    let run = RunConfig::from_text(&read_text(config)?, &config.display().to_string(), sets)?;
    let schema = resolve_schema(&run.schema, data)?;
    let dataset = load_csv(data, &schema)?;
    dataset.require_both_arms()?;
    let art = fit_hte_full(&dataset, &run.estimator)?;
    let model = &art.model;

    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    ModelFile::new(model, &schema, Some(art.ensemble.clone())).save(&out_dir.join(MODEL_FILE))?;

    let rows = training_report(model);
    let report_path = out_dir.join(REPORT_TEXT);
    std::fs::write(&report_path, format_report(&rows)).map_err(|e| CliError::io(&report_path, e))?;
    let json_path = out_dir.join(REPORT_JSON);
    let mut json = serde_json::to_string_pretty(&rows)?;
    json.push('\n');
    std::fs::write(&json_path, json).map_err(|e| CliError::io(&json_path, e))?;

    let mut w = csv::Writer::from_writer(create(&out_dir.join(TERTILE_CSV))?);
    w.write_record(["group", "size", "arm", "count", "mean", "se"])?;
    for g in tertile_diagnostic(model, &dataset)? {
        for (arm, s) in [("treated", g.treated), ("control", g.control)] {
            let (count, mean, se) = match s {
                Some(ArmSummary { mean, se, count }) => (count, num(mean), opt(se)),
                None => (0, "NA".to_string(), "NA".to_string()),
            };
            w.write_record([g.label.clone(), g.size.to_string(), arm.into(), count.to_string(), mean, se])?;
        }
    }
    w.flush().map_err(|e| CliError::io(&out_dir.join(TERTILE_CSV), e))?;

    let mut w = csv::Writer::from_writer(create(&out_dir.join(FOREST_CSV))?);
    w.write_record([
        "rank", "index", "rule", "hte", "ate", "ci_low", "ci_high", "n_treated", "n_control",
    ])?;
    for (rank, r) in rows.iter().enumerate() {
        let rule = &model.treatment[r.index].rule;
        let text = rule.display(&model.covariates, Some(2));
        let stats = match subgroup_ate(&dataset, rule) {
            Ok(s) => [num(s.ate), num(s.ci_low), num(s.ci_high), s.n_treated.to_string(), s.n_control.to_string()],
            // an arm missing from the subgroup leaves the interval undefined
            Err(Error::EmptyArm { .. }) => ["NA", "NA", "NA", "NA", "NA"].map(String::from),
            Err(e) => return Err(e.into()),
        };
        let mut rec = vec![(rank + 1).to_string(), r.index.to_string(), text, num(r.hte)];
        rec.extend(stats);
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| CliError::io(&out_dir.join(FOREST_CSV), e))?;

    Ok(FitOutcome {
        out_dir: out_dir.to_path_buf(),
        active_rules: model.active_treatment_rules(),
        lambda: model.summary.lambda,
        rows,
    })
}

/// Writes `id,mu1,mu0,tau` for every row of `data`; `id` counts rows from 1.
pub fn cmd_predict(model_path: &Path, data: &Path, out: &Path) -> Result<usize, CliError> {
    let file = ModelFile::load(model_path)?;
    let model = file.to_model()?;
    let reader = BufReader::new(File::open(data).map_err(|e| CliError::io(data, e))?);
    let x = read_covariates(reader, &model.covariates)?;
    let tau = estimate_hte(&model, x.view())?;
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["id", "mu1", "mu0", "tau"])?;
    for (i, row) in x.outer_iter().enumerate() {
        let mu1 = predict_mu(&model, row, Arm::Treated)?;
        let mu0 = predict_mu(&model, row, Arm::Control)?;
        w.write_record([(i + 1).to_string(), num(mu1), num(mu0), num(tau[i])])?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    Ok(x.nrows())
}

/// Which rules `report` prints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReportFilter {
    All,
    Top(usize),
    AboveMean,
    MinImportance(f64),
}

impl ReportFilter {
    /// `--min-importance` takes `mean` or a raw importance threshold.
    pub fn min_importance(text: &str) -> Result<Self, CliError> {
        if text == "mean" {
            return Ok(ReportFilter::AboveMean);
        }
        text.parse()
            .map(ReportFilter::MinImportance)
            .map_err(|_| CliError::usage(format!("--min-importance takes 'mean' or a number, got '{text}'")))
    }

    pub fn apply(self, rows: &[RuleReportRow]) -> Vec<RuleReportRow> {
        match self {
            ReportFilter::All => rows.to_vec(),
            ReportFilter::Top(k) => rows.iter().take(k).cloned().collect(),
            ReportFilter::AboveMean => above_mean_importance(rows),
            ReportFilter::MinImportance(t) => rows.iter().filter(|r| r.importance >= t).cloned().collect(),
        }
    }
}

/// The rule report of a saved model, filtered.
pub fn cmd_report(model_path: &Path, filter: ReportFilter) -> Result<String, CliError> {
    let model = ModelFile::load(model_path)?.to_model()?;
    Ok(format_report(&filter.apply(&training_report(&model))))
}

/// Runs a simulation grid, writes the ledger and returns the results.
pub fn cmd_simulate(grid: &Path, out: &Path, sets: &[String]) -> Result<Vec<SimResult>, CliError> {
    let cfg = GridConfig::from_text(&read_text(grid)?, &grid.display().to_string(), sets)?;
    let results = run_experiment(&cfg.grid, &cfg.estimator, &cfg.options)?;
    write_ledger(create(out)?, &results, true)?;
    Ok(results)
}

/// Median metrics per cell and method as an aligned table.
pub fn format_summary(cells: &[CellSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>6} {:>5} {:<16} {:>4} {:>6} {:>12} {:>12} {:>12}",
        "scenario", "n", "p", "method", "reps", "failed", "median_mse", "median_rbias", "median_rho"
    );
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    for c in cells {
        let _ = writeln!(
            out,
            "{:>8} {:>6} {:>5} {:<16} {:>4} {:>6} {:>12} {:>12} {:>12}",
            c.scenario,
            c.n,
            c.p,
            c.method,
            c.replicates,
            c.failures,
            f(c.median_mse),
            f(c.median_rbias),
            f(c.median_spearman)
        );
    }
    out
}

pub fn simulate_summary(results: &[SimResult]) -> String {
    format_summary(&summarize_cells(results))
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub fn print(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}
