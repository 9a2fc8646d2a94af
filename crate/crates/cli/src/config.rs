//! Flat `key = value` configuration files with `--set key=value` overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the command reading the file; repeated keys are an error.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rulefit_hte::hte::EstimatorConfig;
use rulefit_hte::simharness::{ExperimentGrid, ExperimentOptions, ExternalMethod, GridCell, N_SCENARIOS};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Keys shared by `fit` and `simulate` that map onto [`EstimatorConfig`].
pub const ESTIMATOR_KEYS: [&str; 12] = [
    "trees",
    "mean_depth",
    "shrinkage",
    "subsample",
    "min_leaf",
    "winsor",
    "folds",
    "lambda_count",
    "lambda_ratio",
    "tolerance",
    "max_sweeps",
    "seed",
];

pub const SCHEMA_KEYS: [&str; 3] = ["outcome", "treatment", "covariates"];

pub const GRID_KEYS: [&str; 7] = ["scenarios", "n", "p", "replicates", "record_time", "export_dir", "external"];

/// Parsed key/value pairs, remembering where each came from for messages.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    values: BTreeMap<String, (String, String)>,
}

impl KeyValues {
    /// Parses file text; `origin` names the file in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut kv = KeyValues::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let place = format!("{origin} line {}", i + 1);
            kv.insert(line, &place, false)?;
        }
        Ok(kv)
    }

    /// Applies `key=value` overrides; these replace file values.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            self.insert(s, "--set", true)?;
        }
        Ok(())
    }

    fn insert(&mut self, line: &str, place: &str, replace: bool) -> Result<(), CliError> {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("{place}: expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::usage(format!("{place}: empty key")));
        }
        if !replace && self.values.contains_key(key) {
            return Err(CliError::usage(format!("{place}: key '{key}' given twice")));
        }
        self.values
            .insert(key.to_string(), (value.trim().to_string(), place.to_string()));
        Ok(())
    }

    /// Rejects any key not in `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), CliError> {
        match self.values.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, (_, place))) => Err(CliError::usage(format!("{place}: unknown config key '{k}'"))),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, place)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::usage(format!("{place}: cannot read '{v}' as a value for '{key}'"))),
        }
    }

    fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key)?
            .ok_or_else(|| CliError::usage(format!("missing required config key '{key}'")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, place)) => split_list(v)
                .map(|item| {
                    item.parse()
                        .map_err(|_| CliError::usage(format!("{place}: cannot read '{item}' in '{key}'")))
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Reads the estimator keys; `trees` and `mean_depth` have no default.
pub fn estimator_config(kv: &KeyValues) -> Result<EstimatorConfig, CliError> {
    let mut c = EstimatorConfig::new(kv.require("trees")?, kv.require("mean_depth")?);
    if let Some(v) = kv.get("shrinkage")? {
        c.shrinkage = v;
    }
    if let Some(v) = kv.get("subsample")? {
        c.subsample = v;
    }
    if let Some(v) = kv.get("min_leaf")? {
        c.min_leaf = v;
    }
    if let Some(v) = kv.get("winsor")? {
        c.winsor = v;
    }
    if let Some(v) = kv.get("folds")? {
        c.folds = v;
    }
    if let Some(v) = kv.get("lambda_count")? {
        c.lambda_count = v;
    }
    if let Some(v) = kv.get("lambda_ratio")? {
        c.lambda_ratio = v;
    }
    if let Some(v) = kv.get("tolerance")? {
        c.tol = v;
    }
    if let Some(v) = kv.get("max_sweeps")? {
        c.max_sweeps = v;
    }
    if let Some(v) = kv.get("seed")? {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

/// Which CSV columns hold the outcome, treatment and covariates. Without a
/// `covariates` key every other column is a covariate, in header order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Option<Vec<String>>,
}

pub fn schema_config(kv: &KeyValues) -> Result<SchemaConfig, CliError> {
    Ok(SchemaConfig {
        outcome: kv.raw("outcome").unwrap_or("y").to_string(),
        treatment: kv.raw("treatment").unwrap_or("z").to_string(),
        covariates: kv.list("covariates")?,
    })
}

/// Settings for `fit`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub estimator: EstimatorConfig,
    pub schema: SchemaConfig,
}

impl RunConfig {
    pub fn from_text(text: &str, origin: &str, sets: &[String]) -> Result<Self, CliError> {
        let mut kv = KeyValues::parse(text, origin)?;
        kv.apply_overrides(sets)?;
        let allowed: Vec<&str> = ESTIMATOR_KEYS.iter().chain(&SCHEMA_KEYS).copied().collect();
        kv.check_known(&allowed)?;
        Ok(RunConfig {
            estimator: estimator_config(&kv)?,
            schema: schema_config(&kv)?,
        })
    }
}

/// Settings for `simulate`: the grid is the product of `scenarios`, `n` and
/// `p`; `seed` seeds the grid and estimator keys configure every fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub grid: ExperimentGrid,
    pub estimator: EstimatorConfig,
    pub options: ExperimentOptions,
}

impl GridConfig {
    pub fn from_text(text: &str, origin: &str, sets: &[String]) -> Result<Self, CliError> {
        let mut kv = KeyValues::parse(text, origin)?;
        kv.apply_overrides(sets)?;
        let allowed: Vec<&str> = ESTIMATOR_KEYS.iter().chain(&GRID_KEYS).copied().collect();
        kv.check_known(&allowed)?;
        let estimator = estimator_config(&kv)?;
        let scenarios: Vec<usize> = match kv.raw("scenarios") {
            Some("all") => (1..=N_SCENARIOS).collect(),
            _ => kv
                .list("scenarios")?
                .ok_or_else(|| CliError::usage("missing required config key 'scenarios'"))?,
        };
        let ns: Vec<usize> = kv.list("n")?.ok_or_else(|| CliError::usage("missing required config key 'n'"))?;
        let ps: Vec<usize> = kv.list("p")?.ok_or_else(|| CliError::usage("missing required config key 'p'"))?;
        let mut cells = Vec::new();
        for &scenario in &scenarios {
            for &n in &ns {
                for &p in &ps {
                    cells.push(GridCell { scenario, n, p });
                }
            }
        }
        let grid = ExperimentGrid {
            cells,
            replicates: kv.require("replicates")?,
            seed: estimator.seed,
        };
        grid.validate()?;
        let external = match kv.raw("external") {
            None => Vec::new(),
            Some(v) => split_list(v)
                .map(|item| {
                    let (label, dir) = item
                        .split_once(':')
                        .ok_or_else(|| CliError::usage(format!("external entry '{item}' must be label:dir")))?;
                    Ok(ExternalMethod {
                        label: label.trim().to_string(),
                        dir: PathBuf::from(dir.trim()),
                    })
                })
                .collect::<Result<_, CliError>>()?,
        };
        let options = ExperimentOptions {
            record_time: kv.get("record_time")?.unwrap_or(false),
            external,
            export_dir: kv.raw("export_dir").map(PathBuf::from),
        };
        Ok(GridConfig {
            grid,
            estimator,
            options,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ExitKind;

    #[test]
    fn reads_values_comments_and_defaults() {
        let text = "# five-style run\ntrees = 400\nmean_depth = 2\n\nsubsample = 0.25\ncovariates = age, wtkg ,cd40\n";
        let c = RunConfig::from_text(text, "cfg", &[]).unwrap();
        assert_eq!(c.estimator.n_trees, 400);
        assert_eq!(c.estimator.mean_depth, 2.0);
        assert_eq!(c.estimator.subsample, 0.25);
        assert_eq!(c.estimator.shrinkage, 0.01);
        assert_eq!(c.estimator.folds, 10);
        assert_eq!(c.schema.outcome, "y");
        assert_eq!(c.schema.covariates, Some(vec!["age".into(), "wtkg".into(), "cd40".into()]));
    }

    #[test]
    fn overrides_replace_file_values() {
        let c = RunConfig::from_text("trees = 10\nmean_depth = 2", "cfg", &["trees=20".into(), "seed = 7".into()]).unwrap();
        assert_eq!((c.estimator.n_trees, c.estimator.seed), (20, 7));
    }

    #[test]
    fn rejections_name_the_problem() {
        let cases = [
            ("trees = 10\nmean_depth = 2\nshrinkge = 0.1", "unknown config key 'shrinkge'"),
            ("trees = 10", "missing required config key 'mean_depth'"),
            ("trees = 10\ntrees = 11\nmean_depth = 2", "given twice"),
            ("trees = ten\nmean_depth = 2", "cannot read 'ten'"),
            ("trees 10", "expected 'key = value'"),
            ("trees = 10\nmean_depth = 2\nsubsample = 1.5", "subsample"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::from_text(text, "cfg", &[]).unwrap_err();
            assert_eq!(err.kind, ExitKind::Usage);
            assert!(err.message.contains(needle), "{text:?}: {}", err.message);
        }
    }

    #[test]
    fn grid_is_the_product_of_its_lists() {
        let text = "trees = 5\nmean_depth = 2\nscenarios = 2, 4\nn = 100\np = 8, 10\nreplicates = 3\nseed = 9\nexternal = cf:/tmp/cf";
        let g = GridConfig::from_text(text, "grid", &[]).unwrap();
        assert_eq!(g.grid.cells.len(), 4);
        assert_eq!(g.grid.cells[1], GridCell { scenario: 2, n: 100, p: 10 });
        assert_eq!((g.grid.replicates, g.grid.seed), (3, 9));
        assert_eq!(g.options.external[0].label, "cf");
        let all = GridConfig::from_text(&text.replace("2, 4", "all"), "grid", &[]).unwrap();
        assert_eq!(all.grid.cells.len(), 32);
        let bad = GridConfig::from_text(&text.replace("2, 4", "2, 17"), "grid", &[]).unwrap_err();
        assert_eq!(bad.kind, ExitKind::Usage);
    }
}
