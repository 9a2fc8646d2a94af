//! Versioned JSON model documents.
//!
//! Rules are stored as text conditions (`x3 > 1.25 & x7 <= 0.4`) with
//! thresholds printed exactly, coefficients as parallel arrays. Loading
//! parses the rules back, so a saved model predicts exactly as the fitted one.

use std::path::Path;

use rulefit_hte::boosting::GBTEnsemble;
use rulefit_hte::dataset::{CsvSchema, LinearBasis, LinearTerm};
use rulefit_hte::hte::{EstimatorConfig, FitSummary, FittedHTEModel, LinearEffect, MainEffect, TreatmentEffect};
use rulefit_hte::rules::Rule;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT: &str = "rulefit-hte-model";
pub const VERSION: u32 = 1;

/// The run settings echoed into the model: hyperparameters and the resolved schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub estimator: EstimatorConfig,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scale: Vec<f64>,
    pub retained: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSection {
    pub covariates: Vec<String>,
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainSection {
    pub rules: Vec<String>,
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentSection {
    pub rules: Vec<String>,
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
    /// Training fraction of subjects satisfying each rule.
    pub support: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub settings: ModelSettings,
    pub intercept: f64,
    pub linear_basis: BasisSection,
    pub linear: LinearSection,
    pub main_rules: MainSection,
    pub treatment_rules: TreatmentSection,
    pub summary: FitSummary,
    /// The boosted ensemble the rules came from, kept for inspection.
    pub ensemble: Option<GBTEnsemble>,
}

impl ModelFile {
    pub fn new(model: &FittedHTEModel, schema: &CsvSchema, ensemble: Option<GBTEnsemble>) -> Self {
        let names = &model.covariates;
        let text = |r: &Rule| r.display(names, None);
        let terms = &model.basis.terms;
        ModelFile {
            format: FORMAT.to_string(),
            version: VERSION,
            settings: ModelSettings {
                estimator: model.config.clone(),
                schema: schema.clone(),
            },
            intercept: model.intercept,
            linear_basis: BasisSection {
                lower: terms.iter().map(|t| t.lower).collect(),
                upper: terms.iter().map(|t| t.upper).collect(),
                scale: terms.iter().map(|t| t.scale).collect(),
                retained: terms.iter().map(|t| t.retained).collect(),
            },
            linear: LinearSection {
                covariates: model.linear.iter().map(|l| names[l.covariate].clone()).collect(),
                coef: model.linear.iter().map(|l| l.coef).collect(),
            },
            main_rules: MainSection {
                rules: model.main.iter().map(|m| text(&m.rule)).collect(),
                coef: model.main.iter().map(|m| m.coef).collect(),
            },
            treatment_rules: TreatmentSection {
                rules: model.treatment.iter().map(|t| text(&t.rule)).collect(),
                treated: model.treatment.iter().map(|t| t.treated).collect(),
                control: model.treatment.iter().map(|t| t.control).collect(),
                support: model.treatment.iter().map(|t| t.support).collect(),
            },
            summary: model.summary.clone(),
            ensemble,
        }
    }

    /// Rebuilds the fitted model, checking format, version and array lengths.
    pub fn to_model(&self) -> Result<FittedHTEModel, CliError> {
        if self.format != FORMAT {
            return Err(CliError::data(format!("model file: format '{}' is not '{FORMAT}'", self.format)));
        }
        if self.version != VERSION {
            return Err(CliError::data(format!(
                "model file: version {} is not supported (expected {VERSION})",
                self.version
            )));
        }
        let names = &self.settings.schema.covariates;
        let p = names.len();
        let b = &self.linear_basis;
        let t = &self.treatment_rules;
        let lengths_ok = [b.lower.len(), b.upper.len(), b.scale.len(), b.retained.len()]
            .iter()
            .all(|&l| l == p)
            && self.linear.covariates.len() == self.linear.coef.len()
            && self.main_rules.rules.len() == self.main_rules.coef.len()
            && [t.treated.len(), t.control.len(), t.support.len()].iter().all(|&l| l == t.rules.len());
        if !lengths_ok {
            return Err(CliError::data("model file: coefficient arrays have inconsistent lengths"));
        }
        let parse = |text: &String| Rule::parse(text, names).map_err(CliError::from);
        let basis = LinearBasis {
            terms: (0..p)
                .map(|j| LinearTerm {
                    lower: b.lower[j],
                    upper: b.upper[j],
                    scale: b.scale[j],
                    retained: b.retained[j],
                })
                .collect(),
        };
        let linear = self
            .linear
            .covariates
            .iter()
            .zip(&self.linear.coef)
            .map(|(name, &coef)| {
                let covariate = names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| CliError::data(format!("model file: unknown linear covariate '{name}'")))?;
                Ok(LinearEffect { covariate, coef })
            })
            .collect::<Result<_, CliError>>()?;
        let main = self
            .main_rules
            .rules
            .iter()
            .zip(&self.main_rules.coef)
            .map(|(r, &coef)| Ok(MainEffect { rule: parse(r)?, coef }))
            .collect::<Result<_, CliError>>()?;
        let treatment = (0..t.rules.len())
            .map(|k| {
                Ok(TreatmentEffect {
                    rule: parse(&t.rules[k])?,
                    treated: t.treated[k],
                    control: t.control[k],
                    support: t.support[k],
                })
            })
            .collect::<Result<_, CliError>>()?;
        Ok(FittedHTEModel {
            covariates: names.clone(),
            config: self.settings.estimator.clone(),
            basis,
            intercept: self.intercept,
            main,
            linear,
            treatment,
            summary: self.summary.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_json()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
