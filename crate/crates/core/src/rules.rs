//! Rule extraction from trees, canonical form, main/treatment sorting and
//! indicator evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::boosting::{Direction, RegressionTree, SplitCondition};
use crate::error::{Error, Result};

/// Treatment values a rule applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArmSet {
    Both,
    Treated,
    Control,
}

impl ArmSet {
    pub fn contains(self, z: u8) -> bool {
        match self {
            ArmSet::Both => true,
            ArmSet::Treated => z == 1,
            ArmSet::Control => z == 0,
        }
    }
}

/// Half-open interval `(lower, upper]` on one covariate; `None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub feature: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Interval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower.is_none_or(|a| value > a) && self.upper.is_none_or(|b| value <= b)
    }

    fn is_empty(&self) -> bool {
        matches!((self.lower, self.upper), (Some(a), Some(b)) if a >= b)
    }
}

/// Conjunction of covariate intervals plus a treatment condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub conditions: Vec<Interval>,
    pub arms: ArmSet,
}

/// Hashable identity of a canonical rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleKey(Vec<(usize, Option<u64>, Option<u64>)>, ArmSet);

fn bits(v: Option<f64>) -> Option<u64> {
    // +0.0 and -0.0 describe the same bound
    v.map(|x| if x == 0.0 { 0u64 } else { x.to_bits() })
}

impl Rule {
    /// Builds a canonical rule from tree split conditions. Conditions on
    /// `treatment_feature` become the arm set. `None` if vacuous.
    pub fn from_splits(splits: &[SplitCondition], treatment_feature: usize) -> Option<Rule> {
        let mut arms = ArmSet::Both;
        let mut conditions = Vec::new();
        for s in splits {
            if s.feature == treatment_feature {
                let arm = match s.direction {
                    Direction::LessEqual if s.threshold >= 0.0 && s.threshold < 1.0 => ArmSet::Control,
                    Direction::Greater if s.threshold >= 0.0 && s.threshold < 1.0 => ArmSet::Treated,
                    _ => return None,
                };
                arms = match (arms, arm) {
                    (ArmSet::Both, a) => a,
                    (a, b) if a == b => a,
                    _ => return None,
                };
            } else {
                conditions.push(match s.direction {
                    Direction::LessEqual => Interval {
                        feature: s.feature,
                        lower: None,
                        upper: Some(s.threshold),
                    },
                    Direction::Greater => Interval {
                        feature: s.feature,
                        lower: Some(s.threshold),
                        upper: None,
                    },
                });
            }
        }
        canonicalize(&Rule { conditions, arms })
    }

    pub fn key(&self) -> RuleKey {
        RuleKey(
            self.conditions
                .iter()
                .map(|c| (c.feature, bits(c.lower), bits(c.upper)))
                .collect(),
            self.arms,
        )
    }

    /// The covariate part only (treatment condition removed).
    pub fn covariate_part(&self) -> Rule {
        Rule {
            conditions: self.conditions.clone(),
            arms: ArmSet::Both,
        }
    }

    pub fn max_feature(&self) -> Option<usize> {
        self.conditions.iter().map(|c| c.feature).max()
    }

    /// Product of the covariate interval indicators.
    pub fn matches(&self, x: ArrayView1<'_, f64>) -> bool {
        self.conditions.iter().all(|c| c.contains(x[c.feature]))
    }

    /// Full base function including the treatment condition.
    pub fn matches_with_arm(&self, x: ArrayView1<'_, f64>, z: u8) -> bool {
        self.arms.contains(z) && self.matches(x)
    }

    /// Renders `x3 > 1.25 & x7 <= 0.4`. With `precision` bounds are rounded
    /// for display; without it they print exactly and parse back losslessly.
    pub fn display(&self, names: &[String], precision: Option<usize>) -> String {
        let fmt = |v: f64| match precision {
            Some(p) => format!("{v:.p$}"),
            None => format!("{v}"),
        };
        let mut out = String::new();
        let sep = |out: &mut String| {
            if !out.is_empty() {
                out.push_str(" & ");
            }
        };
        for c in &self.conditions {
            let name = names.get(c.feature).map_or_else(|| format!("x{}", c.feature + 1), Clone::clone);
            if let Some(a) = c.lower {
                sep(&mut out);
                let _ = write!(out, "{name} > {}", fmt(a));
            }
            if let Some(b) = c.upper {
                sep(&mut out);
                let _ = write!(out, "{name} <= {}", fmt(b));
            }
        }
        match self.arms {
            ArmSet::Both => {}
            ArmSet::Treated => {
                sep(&mut out);
                out.push_str("arm = 1");
            }
            ArmSet::Control => {
                sep(&mut out);
                out.push_str("arm = 0");
            }
        }
        if out.is_empty() {
            out.push_str("TRUE");
        }
        out
    }

    /// Parses the format produced by [`Rule::display`].
    pub fn parse(text: &str, names: &[String]) -> Result<Rule> {
        let err = |reason: String| Error::RuleSyntax {
            text: text.to_string(),
            reason,
        };
        let mut conditions = Vec::new();
        let mut arms = ArmSet::Both;
        if text.trim() == "TRUE" {
            return Ok(Rule { conditions, arms });
        }
        for part in text.split(" & ") {
            let part = part.trim();
            match part {
                "arm = 1" => {
                    arms = ArmSet::Treated;
                    continue;
                }
                "arm = 0" => {
                    arms = ArmSet::Control;
                    continue;
                }
                _ => {}
            }
            let (name, op, value) = if let Some(pos) = part.rfind(" <= ") {
                (&part[..pos], "<=", &part[pos + 4..])
            } else if let Some(pos) = part.rfind(" > ") {
                (&part[..pos], ">", &part[pos + 3..])
            } else {
                return Err(err(format!("condition '{part}' has no '<=' or '>'")));
            };
            let feature = names
                .iter()
                .position(|n| n == name.trim())
                .ok_or_else(|| err(format!("unknown covariate '{}'", name.trim())))?;
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("bad threshold '{}'", value.trim())))?;
            conditions.push(if op == "<=" {
                Interval {
                    feature,
                    lower: None,
                    upper: Some(v),
                }
            } else {
                Interval {
                    feature,
                    lower: Some(v),
                    upper: None,
                }
            });
        }
        canonicalize(&Rule { conditions, arms }).ok_or_else(|| err("conditions are contradictory".into()))
    }
}

/// Sorts conditions by covariate and intersects repeated covariates.
/// Returns `None` when the intersection is empty (a vacuous rule).
pub fn canonicalize(rule: &Rule) -> Option<Rule> {
    let mut merged: Vec<Interval> = Vec::with_capacity(rule.conditions.len());
    let mut conds = rule.conditions.clone();
    conds.sort_by_key(|c| c.feature);
    for c in conds {
        match merged.last_mut() {
            Some(last) if last.feature == c.feature => {
                last.lower = match (last.lower, c.lower) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
                last.upper = match (last.upper, c.upper) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
            _ => merged.push(c),
        }
    }
    if merged.iter().any(Interval::is_empty) {
        return None;
    }
    merged.retain(|c| c.lower.is_some() || c.upper.is_some());
    Some(Rule {
        conditions: merged,
        arms: rule.arms,
    })
}

/// Tree and node a rule was first extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleOrigin {
    pub tree: usize,
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedRule {
    pub rule: Rule,
    pub origin: RuleOrigin,
}

/// One rule per non-root node: the conjunction of the conditions on its path.
/// A tree with `t` leaves yields `2 (t - 1)` rules.
pub fn extract_rules(tree: &RegressionTree, tree_index: usize, treatment_feature: usize) -> Vec<ExtractedRule> {
    (1..tree.nodes.len())
        .filter_map(|node| {
            let path = tree.path_conditions(node);
            Rule::from_splits(&path, treatment_feature).map(|rule| ExtractedRule {
                rule,
                origin: RuleOrigin {
                    tree: tree_index,
                    node,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainRule {
    pub rule: Rule,
    pub origin: RuleOrigin,
}

/// Covariate-only rule shared by both arms, plus the arm(s) it was seen with.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentRule {
    pub rule: Rule,
    pub from_treated: bool,
    pub from_control: bool,
    pub origin: RuleOrigin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    /// K: every extracted rule, before deduplication.
    pub extracted: usize,
    /// Extracted rules without a treatment condition.
    pub main_raw: usize,
    /// Extracted rules with a treatment condition.
    pub treatment_raw: usize,
    /// Distinct rules dropped because their training support was 0 or 1.
    pub dropped_support: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RuleSet {
    pub main: Vec<MainRule>,
    pub treatment: Vec<TreatmentRule>,
    pub counts: RuleCounts,
}

impl RuleSet {
    pub fn main_rules(&self) -> Vec<Rule> {
        self.main.iter().map(|m| m.rule.clone()).collect()
    }

    pub fn treatment_rules(&self) -> Vec<Rule> {
        self.treatment.iter().map(|t| t.rule.clone()).collect()
    }
}

fn support_count(rule: &Rule, x: ArrayView2<'_, f64>) -> usize {
    x.rows().into_iter().filter(|row| rule.matches(*row)).count()
}

/// Splits extracted rules into main-effect rules (no treatment condition)
/// and treatment rules (the treatment condition stripped). Treatment rules
/// with the same covariate part merge into one shared rule. Duplicates keep
/// their first occurrence; rules whose covariate part holds for none or all
/// of the training rows are dropped.
pub fn sort_rules(extracted: &[ExtractedRule], x: ArrayView2<'_, f64>) -> RuleSet {
    let n = x.nrows();
    let mut set = RuleSet::default();
    let mut seen_main: HashMap<RuleKey, Option<usize>> = HashMap::new();
    let mut seen_treat: HashMap<RuleKey, Option<usize>> = HashMap::new();
    set.counts.extracted = extracted.len();

    for er in extracted {
        let arms = er.rule.arms;
        let x_part = er.rule.covariate_part();
        let key = x_part.key();
        let is_main = arms == ArmSet::Both;
        if is_main {
            set.counts.main_raw += 1;
        } else {
            set.counts.treatment_raw += 1;
        }
        let seen = if is_main { &mut seen_main } else { &mut seen_treat };
        if let Some(slot) = seen.get(&key) {
            if let (Some(idx), false) = (*slot, is_main) {
                let t = &mut set.treatment[idx];
                t.from_treated |= arms == ArmSet::Treated;
                t.from_control |= arms == ArmSet::Control;
            }
            continue;
        }
        let support = support_count(&x_part, x);
        if support == 0 || support == n {
            seen.insert(key, None);
            set.counts.dropped_support += 1;
            continue;
        }
        if is_main {
            seen.insert(key, Some(set.main.len()));
            set.main.push(MainRule {
                rule: x_part,
                origin: er.origin,
            });
        } else {
            seen.insert(key, Some(set.treatment.len()));
            set.treatment.push(TreatmentRule {
                rule: x_part,
                from_treated: arms == ArmSet::Treated,
                from_control: arms == ArmSet::Control,
                origin: er.origin,
            });
        }
    }
    set
}

/// Binary matrix whose `(i, k)` entry is the covariate part of rule `k` at row `i`.
pub fn evaluate_rules(rules: &[Rule], x: ArrayView2<'_, f64>) -> Result<Array2<u8>> {
    let p = x.ncols();
    if let Some(bad) = rules.iter().filter_map(Rule::max_feature).find(|&f| f >= p) {
        return Err(Error::Dimension(format!(
            "rule uses covariate index {bad} but data has {p} covariates"
        )));
    }
    let mut out = Array2::zeros((x.nrows(), rules.len()));
    for (i, row) in x.rows().into_iter().enumerate() {
        for (k, rule) in rules.iter().enumerate() {
            out[[i, k]] = u8::from(rule.matches(row));
        }
    }
    Ok(out)
}
