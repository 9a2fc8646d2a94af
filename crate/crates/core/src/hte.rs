//! Fitted S-learner rule ensemble: arm-wise predictions, treatment effect
//! estimates and rule-level reports.

use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::boosting::{fit_gbt, BoostingParams, GBTEnsemble, DEFAULT_MIN_LEAF};
use crate::dataset::{build_linear_basis, split_folds, LinearBasis, TrialDataset, DEFAULT_WINSOR_FRACTION};
use crate::error::{Error, Result};
use crate::rules::{extract_rules, sort_rules, Rule, RuleCounts, RuleSet};
use crate::solver::{
    build_design, cross_validate, fit_path, lambda_path, SolverOptions, Term, DEFAULT_MAX_SWEEPS,
    DEFAULT_PATH_LENGTH, DEFAULT_PATH_RATIO, DEFAULT_TOLERANCE,
};

/// Normal quantile used for 95% intervals.
pub const Z_95: f64 = 1.96;

/// Every knob of the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub n_trees: usize,
    pub mean_depth: f64,
    pub shrinkage: f64,
    pub subsample: f64,
    pub min_leaf: usize,
    pub winsor: f64,
    pub folds: usize,
    pub lambda_count: usize,
    pub lambda_ratio: f64,
    pub tol: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl EstimatorConfig {
    /// Defaults for everything except the tree count and mean depth.
    pub fn new(n_trees: usize, mean_depth: f64) -> Self {
        Self {
            n_trees,
            mean_depth,
            shrinkage: 0.01,
            subsample: 0.5,
            min_leaf: DEFAULT_MIN_LEAF,
            winsor: DEFAULT_WINSOR_FRACTION,
            folds: 10,
            lambda_count: DEFAULT_PATH_LENGTH,
            lambda_ratio: DEFAULT_PATH_RATIO,
            tol: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            seed: 0,
        }
    }

    pub fn boosting_params(&self) -> BoostingParams {
        BoostingParams {
            n_trees: self.n_trees,
            mean_depth: self.mean_depth,
            shrinkage: self.shrinkage,
            subsample: self.subsample,
            min_leaf: self.min_leaf,
            seed: self.seed,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_sweeps: self.max_sweeps,
            track_objective: false,
        }
    }

    /// Checks every parameter domain that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let params = self.boosting_params();
        // n large enough that only the data-independent checks can fail
        params.validate(usize::MAX / 4)?;
        if !(0.0..0.5).contains(&self.winsor) {
            return Err(Error::param("winsor", format!("must lie in [0, 0.5), got {}", self.winsor)));
        }
        if self.folds < 2 {
            return Err(Error::param("folds", format!("need at least 2, got {}", self.folds)));
        }
        if self.lambda_count == 0 {
            return Err(Error::param("lambda_count", "must be at least 1"));
        }
        if !(self.lambda_ratio > 0.0 && self.lambda_ratio < 1.0) {
            return Err(Error::param("lambda_ratio", format!("must lie in (0, 1), got {}", self.lambda_ratio)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tol", format!("must be positive, got {}", self.tol)));
        }
        if self.max_sweeps == 0 {
            return Err(Error::param("max_sweeps", "must be at least 1"));
        }
        Ok(())
    }

    fn fold_seed(&self) -> u64 {
        self.seed ^ 0x5DEE_CE66_D1CE_4E5B
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MainEffect {
    pub rule: Rule,
    pub coef: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEffect {
    pub covariate: usize,
    /// Coefficient of the scaled, winsorized term.
    pub coef: f64,
}

/// A shared treatment rule with its target-arm and control-arm coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentEffect {
    pub rule: Rule,
    pub treated: f64,
    pub control: f64,
    /// Share of training rows satisfying the rule.
    pub support: f64,
}

impl TreatmentEffect {
    pub fn effect(&self) -> f64 {
        self.treated - self.control
    }

    pub fn is_active(&self) -> bool {
        self.treated != 0.0 || self.control != 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n_train: usize,
    pub lambda: f64,
    pub cv_path: Vec<f64>,
    pub cv_errors: Vec<f64>,
    pub restratified: bool,
    pub converged: bool,
    pub sweeps: usize,
    pub rule_counts: RuleCounts,
    /// Leaves of each boosted tree, in order.
    pub tree_leaves: Vec<usize>,
    pub design_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedHTEModel {
    pub covariates: Vec<String>,
    pub config: EstimatorConfig,
    pub basis: LinearBasis,
    pub intercept: f64,
    pub main: Vec<MainEffect>,
    pub linear: Vec<LinearEffect>,
    pub treatment: Vec<TreatmentEffect>,
    pub summary: FitSummary,
}

/// Everything produced by one fit, including intermediate artifacts that
/// the model itself does not need for prediction.
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub model: FittedHTEModel,
    pub ensemble: GBTEnsemble,
    pub rules: RuleSet,
}

/// Rule generation, sorting, design assembly and cross-validated group lasso.
pub fn fit_hte(dataset: &TrialDataset, config: &EstimatorConfig) -> Result<FittedHTEModel> {
    fit_hte_full(dataset, config).map(|a| a.model)
}

pub fn fit_hte_full(dataset: &TrialDataset, config: &EstimatorConfig) -> Result<FitArtifacts> {
    config.validate()?;
    dataset.require_both_arms()?;
    let basis = build_linear_basis(dataset, config.winsor)?;
    let ensemble = fit_gbt(dataset, &config.boosting_params())?;
    let treatment_feature = dataset.p();
    let extracted: Vec<_> = ensemble
        .trees
        .iter()
        .enumerate()
        .flat_map(|(m, tree)| extract_rules(tree, m, treatment_feature))
        .collect();
    let rules = sort_rules(&extracted, dataset.x());
    let (design, groups) = build_design(dataset, &rules, &basis)?;

    let y = dataset.y();
    let opts = config.solver_options();
    let full_path = lambda_path(&design, y, &groups, config.lambda_count, config.lambda_ratio)?;
    let fits = fit_path(&design, y, &groups, &full_path, &opts, true)?;
    let path = &full_path[..fits.len()];
    let folds = split_folds(dataset.n(), config.folds, config.fold_seed())?;
    let cv = cross_validate(&design, y, dataset.z(), &groups, &folds, path, &opts)?;
    let coefs = &fits[cv.best_index];

    let mut main = Vec::new();
    let mut linear = Vec::new();
    let mut treatment = Vec::new();
    let terms = design.terms();
    let mut j = 0;
    while j < terms.len() {
        match terms[j] {
            Term::MainRule(k) => main.push(MainEffect {
                rule: rules.main[k].rule.clone(),
                coef: coefs.beta[j],
            }),
            Term::Linear(c) => linear.push(LinearEffect {
                covariate: c,
                coef: coefs.beta[j],
            }),
            Term::TreatedArm(k) => {
                debug_assert_eq!(terms[j + 1], Term::ControlArm(k));
                let rule = rules.treatment[k].rule.clone();
                let support = rule_support(&rule, dataset.x());
                treatment.push(TreatmentEffect {
                    rule,
                    treated: coefs.beta[j],
                    control: coefs.beta[j + 1],
                    support,
                });
                j += 1;
            }
            Term::ControlArm(_) | Term::Generic(_) => {
                return Err(Error::Numerical(format!("unexpected design term {:?}", terms[j])))
            }
        }
        j += 1;
    }

    let model = FittedHTEModel {
        covariates: dataset.names().to_vec(),
        config: config.clone(),
        basis,
        intercept: coefs.intercept,
        main,
        linear,
        treatment,
        summary: FitSummary {
            n_train: dataset.n(),
            lambda: cv.best_lambda,
            cv_path: cv.path,
            cv_errors: cv.errors,
            restratified: cv.restratified,
            converged: coefs.converged,
            sweeps: coefs.sweeps,
            rule_counts: rules.counts,
            tree_leaves: ensemble.trees.iter().map(|t| t.n_leaves()).collect(),
            design_columns: design.n_columns(),
        },
    };
    Ok(FitArtifacts {
        model,
        ensemble,
        rules,
    })
}

/// Arm a prediction is made for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    Treated,
    Control,
}

impl FittedHTEModel {
    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.covariates.len() {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, got {width}",
                self.covariates.len()
            )));
        }
        Ok(())
    }

    /// Intercept, main-effect rules and linear terms: the part shared by both arms.
    fn shared_part(&self, x: ArrayView1<'_, f64>) -> f64 {
        let rules: f64 = self
            .main
            .iter()
            .filter(|m| m.coef != 0.0 && m.rule.matches(x))
            .map(|m| m.coef)
            .sum();
        let lin: f64 = self
            .linear
            .iter()
            .filter(|l| l.coef != 0.0)
            .map(|l| l.coef * self.basis.terms[l.covariate].transform(x[l.covariate]))
            .sum();
        self.intercept + rules + lin
    }

    pub fn active_treatment_rules(&self) -> usize {
        self.treatment.iter().filter(|t| t.is_active()).count()
    }

    /// Treatment rules where exactly one arm coefficient is zero.
    pub fn shared_basis_violations(&self) -> Vec<usize> {
        self.treatment
            .iter()
            .enumerate()
            .filter(|(_, t)| (t.treated == 0.0) != (t.control == 0.0))
            .map(|(k, _)| k)
            .collect()
    }
}

/// Conditional mean for one arm at covariate vector `x`.
pub fn predict_mu(model: &FittedHTEModel, x: ArrayView1<'_, f64>, arm: Arm) -> Result<f64> {
    model.check_width(x.len())?;
    let arm_part: f64 = model
        .treatment
        .iter()
        .filter(|t| t.rule.matches(x))
        .map(|t| match arm {
            Arm::Treated => t.treated,
            Arm::Control => t.control,
        })
        .sum();
    Ok(model.shared_part(x) + arm_part)
}

/// `sum_k (treated_k - control_k) r_k(x)` per row.
pub fn estimate_hte(model: &FittedHTEModel, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    model.check_width(x.ncols())?;
    Ok(x
        .axis_iter(Axis(0))
        .map(|row| {
            model
                .treatment
                .iter()
                .filter(|t| t.is_active() && t.rule.matches(row))
                .map(TreatmentEffect::effect)
                .sum()
        })
        .collect())
}

/// Fraction of rows satisfying the rule's covariate conditions.
pub fn rule_support(rule: &Rule, x: ArrayView2<'_, f64>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let hits = x.axis_iter(Axis(0)).filter(|row| rule.matches(*row)).count();
    hits as f64 / x.nrows() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReportRow {
    /// Index into [`FittedHTEModel::treatment`].
    pub index: usize,
    pub rule: String,
    pub importance: f64,
    /// Importance scaled so the top rule reads 100.
    pub normalized_importance: f64,
    /// `treated - control`: the rule's contribution to the effect.
    pub hte: f64,
    pub support: f64,
}

/// `|treated - control| * sqrt(o (1 - o))`.
pub fn importance(effect: f64, support: f64) -> f64 {
    effect.abs() * (support * (1.0 - support)).max(0.0).sqrt()
}

fn report_rows(model: &FittedHTEModel, supports: &[f64]) -> Vec<RuleReportRow> {
    let mut rows: Vec<RuleReportRow> = model
        .treatment
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_active())
        .map(|(k, t)| RuleReportRow {
            index: k,
            rule: t.rule.display(&model.covariates, Some(2)),
            importance: importance(t.effect(), supports[k]),
            normalized_importance: 0.0,
            hte: t.effect(),
            support: supports[k],
        })
        .collect();
    rows.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.index.cmp(&b.index)));
    let top = rows.first().map_or(0.0, |r| r.importance);
    for r in &mut rows {
        r.normalized_importance = if top > 0.0 { 100.0 * r.importance / top } else { 0.0 };
    }
    rows
}

/// Importance report over the active treatment rules with supports measured
/// on `x`, sorted by importance (descending).
pub fn rule_importance(model: &FittedHTEModel, x: ArrayView2<'_, f64>) -> Result<Vec<RuleReportRow>> {
    model.check_width(x.ncols())?;
    let supports: Vec<f64> = model.treatment.iter().map(|t| rule_support(&t.rule, x)).collect();
    Ok(report_rows(model, &supports))
}

/// Same report using the supports stored at fit time.
pub fn training_report(model: &FittedHTEModel) -> Vec<RuleReportRow> {
    let supports: Vec<f64> = model.treatment.iter().map(|t| t.support).collect();
    report_rows(model, &supports)
}

/// Rows whose importance exceeds the mean importance of the report.
pub fn above_mean_importance(rows: &[RuleReportRow]) -> Vec<RuleReportRow> {
    if rows.is_empty() {
        return Vec::new();
    }
    let mean = rows.iter().map(|r| r.importance).sum::<f64>() / rows.len() as f64;
    rows.iter().filter(|r| r.importance > mean).cloned().collect()
}

/// Aligned text table: rule number, rule, importance, HTE, support.
pub fn format_report(rows: &[RuleReportRow]) -> String {
    let headers = ["Rule #", "Rule", "Importance", "HTE", "Support"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            [
                (i + 1).to_string(),
                r.rule.clone(),
                format!("{:.2}", r.normalized_importance),
                format!("{:.2}", r.hte),
                format!("{:.2}", r.support),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (i, (c, w)) in row.iter().zip(widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            if i == 1 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "{c:>w$}");
            }
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
    };
    line(&mut out, &headers);
    let rule_len: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &refs);
    }
    out
}

/// Outcome summary of one arm within a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mean: f64,
    /// `s / sqrt(m)`; `None` with a single member.
    pub se: Option<f64>,
    pub count: usize,
}

fn summarize(values: &[f64]) -> Option<ArmSummary> {
    if values.is_empty() {
        return None;
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let se = (values.len() > 1).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    });
    Some(ArmSummary {
        mean,
        se,
        count: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TertileGroup {
    pub label: String,
    pub size: usize,
    pub treated: Option<ArmSummary>,
    pub control: Option<ArmSummary>,
}

/// Sizes of the low/middle/high groups: `n / 3` each, one extra row to the
/// high group when `n % 3 == 1`, one to middle and high when `n % 3 == 2`.
pub fn tertile_sizes(n: usize) -> [usize; 3] {
    let base = n / 3;
    match n % 3 {
        0 => [base; 3],
        1 => [base, base, base + 1],
        _ => [base, base + 1, base + 1],
    }
}

/// Orders subjects by estimated effect (ties by row), cuts them into thirds
/// and summarizes the outcome per arm in each third.
pub fn tertile_diagnostic(model: &FittedHTEModel, dataset: &TrialDataset) -> Result<Vec<TertileGroup>> {
    let tau = estimate_hte(model, dataset.x())?;
    let mut order: Vec<usize> = (0..dataset.n()).collect();
    order.sort_by(|&a, &b| tau[a].total_cmp(&tau[b]).then(a.cmp(&b)));
    let y = dataset.y();
    let z = dataset.z();
    let mut start = 0;
    let mut out = Vec::with_capacity(3);
    for (label, size) in ["low", "middle", "high"].into_iter().zip(tertile_sizes(dataset.n())) {
        let rows = &order[start..start + size];
        start += size;
        let arm = |a: u8| -> Vec<f64> { rows.iter().filter(|&&i| z[i] == a).map(|&i| y[i]).collect() };
        out.push(TertileGroup {
            label: label.to_string(),
            size,
            treated: summarize(&arm(1)),
            control: summarize(&arm(0)),
        });
    }
    Ok(out)
}

/// Difference in mean outcome within a rule's subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEffect {
    pub ate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_treated: usize,
    pub n_control: usize,
}

/// Mean treated minus mean control over rows satisfying `rule`, with a
/// Welch normal-approximation 95% interval. A single-member arm contributes
/// zero variance.
pub fn subgroup_ate(dataset: &TrialDataset, rule: &Rule) -> Result<SubgroupEffect> {
    let x = dataset.x();
    if rule.max_feature().is_some_and(|f| f >= dataset.p()) {
        return Err(Error::Dimension("rule refers to a covariate the data lacks".into()));
    }
    let (mut treated, mut control) = (Vec::new(), Vec::new());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        if rule.matches(row) {
            if dataset.z()[i] == 1 {
                treated.push(dataset.y()[i]);
            } else {
                control.push(dataset.y()[i]);
            }
        }
    }
    let context = || format!("no subgroup member satisfies '{}'", rule.display(dataset.names(), None));
    let t = summarize(&treated).ok_or_else(|| Error::EmptyArm {
        arm: "treated",
        context: context(),
    })?;
    let c = summarize(&control).ok_or_else(|| Error::EmptyArm {
        arm: "control",
        context: context(),
    })?;
    let var_term = |s: &ArmSummary| s.se.map_or(0.0, |se| se * se);
    let half = Z_95 * (var_term(&t) + var_term(&c)).sqrt();
    let ate = t.mean - c.mean;
    Ok(SubgroupEffect {
        ate,
        ci_low: ate - half,
        ci_high: ate + half,
        n_treated: t.count,
        n_control: c.count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LinearTerm;
    use crate::rules::{ArmSet, Interval};
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(feature: usize, t: f64) -> Rule {
        Rule {
            conditions: vec![Interval {
                feature,
                lower: Some(t),
                upper: None,
            }],
            arms: ArmSet::Both,
        }
    }

    fn bare_model(p: usize) -> FittedHTEModel {
        FittedHTEModel {
            covariates: (1..=p).map(|j| format!("x{j}")).collect(),
            config: EstimatorConfig::new(10, 2.0),
            basis: LinearBasis {
                terms: vec![
                    LinearTerm {
                        lower: -1.0,
                        upper: 1.0,
                        scale: 0.5,
                        retained: true,
                    };
                    p
                ],
            },
            intercept: 0.0,
            main: vec![],
            linear: vec![],
            treatment: vec![],
            summary: FitSummary {
                n_train: 0,
                lambda: 0.0,
                cv_path: vec![],
                cv_errors: vec![],
                restratified: false,
                converged: true,
                sweeps: 0,
                rule_counts: RuleCounts::default(),
                tree_leaves: vec![],
                design_columns: 1,
            },
        }
    }

    fn random_model(p: usize, rng: &mut ChaCha8Rng) -> FittedHTEModel {
        let mut m = bare_model(p);
        m.intercept = rng.random_range(-2.0..2.0);
        for j in 0..p {
            m.main.push(MainEffect {
                rule: gt(j, rng.random_range(-1.0..1.0)),
                coef: rng.random_range(-1.0..1.0),
            });
            m.linear.push(LinearEffect {
                covariate: j,
                coef: rng.random_range(-1.0..1.0),
            });
            m.treatment.push(TreatmentEffect {
                rule: gt(j, rng.random_range(-1.0..1.0)),
                treated: rng.random_range(-3.0..3.0),
                control: rng.random_range(-3.0..3.0),
                support: 0.5,
            });
        }
        m
    }

    #[test]
    fn intercept_only_model() {
        let mut m = bare_model(2);
        m.intercept = 4.25;
        let x = array![0.3, -0.7];
        assert_eq!(predict_mu(&m, x.view(), Arm::Treated).unwrap(), 4.25);
        assert_eq!(predict_mu(&m, x.view(), Arm::Control).unwrap(), 4.25);
        assert!(predict_mu(&m, array![1.0].view(), Arm::Treated).is_err());
    }

    #[test]
    fn one_active_rule_difference() {
        let mut m = bare_model(1);
        m.treatment.push(TreatmentEffect {
            rule: gt(0, 0.0),
            treated: 2.0,
            control: 0.5,
            support: 0.5,
        });
        let x = array![1.0];
        let d = predict_mu(&m, x.view(), Arm::Treated).unwrap() - predict_mu(&m, x.view(), Arm::Control).unwrap();
        assert_eq!(d, 1.5);
        let xs = array![[1.0], [-1.0], [2.0], [-2.0]];
        assert_eq!(estimate_hte(&m, xs.view()).unwrap().to_vec(), vec![1.5, 0.0, 1.5, 0.0]);
        m.treatment[0].treated = 0.0;
        m.treatment[0].control = 0.0;
        assert!(estimate_hte(&m, xs.view()).unwrap().iter().all(|&t| t == 0.0));
    }

    #[test]
    fn effect_equals_arm_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let m = random_model(4, &mut rng);
            let x = Array2::from_shape_fn((50, 4), |_| rng.random_range(-2.0..2.0));
            let tau = estimate_hte(&m, x.view()).unwrap();
            for (i, row) in x.axis_iter(Axis(0)).enumerate() {
                let d = predict_mu(&m, row, Arm::Treated).unwrap() - predict_mu(&m, row, Arm::Control).unwrap();
                assert!((d - tau[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn support_extremes_and_mean() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(rule_support(&gt(0, 0.0), x.view()), 1.0);
        assert_eq!(rule_support(&gt(0, 9.0), x.view()), 0.0);
        assert_eq!(rule_support(&gt(0, 2.0), x.view()), 0.5);
    }

    #[test]
    fn importance_values() {
        assert_eq!(importance(2.0, 0.5), 1.0);
        assert_eq!(importance(-2.0, 0.5), 1.0);
        assert_eq!(importance(3.0, 0.0), 0.0);
        assert_eq!(importance(3.0, 1.0), 0.0);
    }

    #[test]
    fn report_is_sorted_and_normalized() {
        let mut m = bare_model(1);
        m.treatment = vec![
            TreatmentEffect {
                rule: gt(0, 0.0),
                treated: 1.0,
                control: 0.0,
                support: 0.5,
            },
            TreatmentEffect {
                rule: gt(0, 1.0),
                treated: 0.0,
                control: 0.0,
                support: 0.3,
            },
            TreatmentEffect {
                rule: gt(0, 2.0),
                treated: 4.0,
                control: 1.0,
                support: 0.1,
            },
        ];
        let rows = training_report(&m);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].index, 2);
        assert_eq!(rows[0].normalized_importance, 100.0);
        assert!(rows[1].normalized_importance < 100.0);
        assert_eq!(rows[0].hte, 3.0);
        let table = format_report(&rows);
        assert!(table.lines().next().unwrap().starts_with("Rule #  Rule"));
        assert!(table.contains("100.00"));
        assert_eq!(above_mean_importance(&rows).len(), 1);
    }

    #[test]
    fn tertile_sizes_follow_remainder_rule() {
        assert_eq!(tertile_sizes(1054), [351, 351, 352]);
        assert_eq!(tertile_sizes(1055), [351, 352, 352]);
        assert_eq!(tertile_sizes(9), [3, 3, 3]);
    }

    #[test]
    fn tertiles_on_constant_effect_follow_row_order() {
        let m = bare_model(1);
        let y = Array1::from_iter((0..12).map(f64::from));
        let z = Array1::from_iter((0..12).map(|i| (i % 2) as u8));
        let x = Array2::zeros((12, 1));
        let ds = TrialDataset::new(y, x, z, vec!["x1".into()]).unwrap();
        let t = tertile_diagnostic(&m, &ds).unwrap();
        // low = rows 0..4: treated {1,3}, control {0,2}
        assert_eq!(t[0].treated.unwrap().mean, 2.0);
        assert_eq!(t[0].control.unwrap().mean, 1.0);
        assert_eq!(t[2].treated.unwrap().mean, 10.0);
        let se = t[0].treated.unwrap().se.unwrap();
        // values {1, 3}: s = sqrt(2), se = 1
        assert!((se - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subgroup_effect_cases() {
        let y = array![2.0, 1.0, 2.0, 1.0, 7.0];
        let z = array![1, 0, 1, 0, 1];
        let x = array![[1.0], [1.0], [1.0], [1.0], [-1.0]];
        let ds = TrialDataset::new(y, x, z, vec!["x1".into()]).unwrap();
        let e = subgroup_ate(&ds, &gt(0, 0.0)).unwrap();
        assert_eq!((e.ate, e.ci_low, e.ci_high), (1.0, 1.0, 1.0));
        assert!(matches!(subgroup_ate(&ds, &gt(0, 5.0)), Err(Error::EmptyArm { .. })));
        let only_treated = Rule {
            conditions: vec![Interval {
                feature: 0,
                lower: None,
                upper: Some(0.0),
            }],
            arms: ArmSet::Both,
        };
        assert!(matches!(
            subgroup_ate(&ds, &only_treated),
            Err(Error::EmptyArm { arm: "control", .. })
        ));
    }
}
