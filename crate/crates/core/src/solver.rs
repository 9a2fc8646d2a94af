//! Design matrix, group structure and the group-lasso solver.
//!
//! The penalized problem is
//!
//! ```text
//! 1/2 * sum_i (y_i - b0 - x_i' b)^2 + lambda * sum_g w_g * ||b_g||_2
//! ```
//!
//! on columns centered and scaled to unit (population) variance, with the
//! intercept unpenalized and `w_g = sqrt(|g|)`. Singleton groups reduce to
//! plain lasso terms. Each block update is an exact minimization: singletons
//! by soft-thresholding, pairs through the secular equation of the 2x2 block
//! (centered arm columns are not orthogonal, so no closed form exists).

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_folds_stratified, FoldAssignment, LinearBasis, TrialDataset};
use crate::error::{Error, Result};
use crate::rules::{evaluate_rules, RuleSet};

pub const DEFAULT_TOLERANCE: f64 = 1e-7;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;
pub const DEFAULT_PATH_LENGTH: usize = 100;
pub const DEFAULT_PATH_RATIO: f64 = 1e-4;

/// Path fitting stops early once this fraction of the centered sum of
/// squares is explained...
const SATURATION_R2: f64 = 0.999;
/// ...or once the explained fraction grows by less than this relative amount.
const SATURATION_STEP: f64 = 1e-5;

/// What a penalized design column stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    /// Main-effect rule, by index into [`RuleSet::main`].
    MainRule(usize),
    /// Winsorized linear term of covariate `j`.
    Linear(usize),
    /// Treatment rule (index into [`RuleSet::treatment`]) times `1{z = 1}`.
    TreatedArm(usize),
    /// Treatment rule times `1{z = 0}`.
    ControlArm(usize),
    /// Column of a design built directly from raw columns.
    Generic(usize),
}

/// Penalized columns; the intercept is implicit and unpenalized.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
    terms: Vec<Term>,
}

impl DesignMatrix {
    pub fn new(columns: Vec<Vec<f64>>, terms: Vec<Term>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::EmptyModel);
        }
        if columns.len() != terms.len() {
            return Err(Error::Dimension(format!(
                "{} columns but {} term labels",
                columns.len(),
                terms.len()
            )));
        }
        let n_rows = columns[0].len();
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(Error::Dimension("design columns differ in length".into()));
        }
        Ok(Self {
            n_rows,
            columns,
            terms,
        })
    }

    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let terms = (0..columns.len()).map(Term::Generic).collect();
        Self::new(columns, terms)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_penalized(&self) -> usize {
        self.columns.len()
    }

    /// Including the intercept column.
    pub fn n_columns(&self) -> usize {
        1 + self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            n_rows: rows.len(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&i| c[i]).collect())
                .collect(),
            terms: self.terms.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub columns: Vec<usize>,
    pub weight: f64,
}

/// Partition of the penalized columns into singletons and pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    groups: Vec<Group>,
}

impl GroupSpec {
    /// Each group gets weight `sqrt(size)`. Groups must partition
    /// `0..n_penalized` and hold one or two columns.
    pub fn new(groups: Vec<Vec<usize>>, n_penalized: usize) -> Result<Self> {
        let mut seen = vec![false; n_penalized];
        for g in &groups {
            if g.is_empty() || g.len() > 2 {
                return Err(Error::Dimension(format!(
                    "groups hold one or two columns, got {}",
                    g.len()
                )));
            }
            for &j in g {
                if j >= n_penalized || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Dimension(format!(
                        "column {j} is out of range or in two groups"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Dimension("groups do not cover every column".into()));
        }
        Ok(Self {
            groups: groups
                .into_iter()
                .map(|columns| Group {
                    weight: (columns.len() as f64).sqrt(),
                    columns,
                })
                .collect(),
        })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

fn is_constant(col: &[f64]) -> bool {
    col.iter().all(|&v| v == col[0])
}

/// Assembles main-rule, linear, treated-arm and control-arm columns (in that
/// order) with their groups. Constant columns are dropped; a treatment rule
/// loses both arm columns if either one is constant, so every surviving pair
/// can be compared across arms.
pub fn build_design(
    dataset: &TrialDataset,
    rules: &RuleSet,
    basis: &LinearBasis,
) -> Result<(DesignMatrix, GroupSpec)> {
    let x = dataset.x();
    let z = dataset.z();
    let mut columns = Vec::new();
    let mut terms = Vec::new();
    let mut groups = Vec::new();

    let main = evaluate_rules(&rules.main_rules(), x)?;
    for (k, col) in main.columns().into_iter().enumerate() {
        let col: Vec<f64> = col.iter().map(|&v| f64::from(v)).collect();
        if !is_constant(&col) {
            groups.push(vec![columns.len()]);
            columns.push(col);
            terms.push(Term::MainRule(k));
        }
    }
    for j in basis.retained() {
        let col = basis.column(x, j);
        if !is_constant(&col) {
            groups.push(vec![columns.len()]);
            columns.push(col);
            terms.push(Term::Linear(j));
        }
    }
    let treat = evaluate_rules(&rules.treatment_rules(), x)?;
    for (k, col) in treat.columns().into_iter().enumerate() {
        let treated: Vec<f64> = col.iter().zip(z).map(|(&r, &zi)| f64::from(r * zi)).collect();
        let control: Vec<f64> = col.iter().zip(z).map(|(&r, &zi)| f64::from(r * (1 - zi))).collect();
        if is_constant(&treated) || is_constant(&control) {
            continue;
        }
        groups.push(vec![columns.len(), columns.len() + 1]);
        columns.push(treated);
        columns.push(control);
        terms.push(Term::TreatedArm(k));
        terms.push(Term::ControlArm(k));
    }
    if columns.is_empty() {
        return Err(Error::EmptyModel);
    }
    let n_pen = columns.len();
    Ok((DesignMatrix::new(columns, terms)?, GroupSpec::new(groups, n_pen)?))
}

/// Block soft-thresholding: `(1 - t / ||v||)_+ * v`.
pub fn group_soft_threshold(v: &[f64], t: f64) -> Vec<f64> {
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm <= t {
        return vec![0.0; v.len()];
    }
    let shrink = 1.0 - t / norm;
    v.iter().map(|a| shrink * a).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Largest per-sweep coefficient change (standardized scale) at convergence.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Record the objective after every sweep.
    pub track_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            track_objective: false,
        }
    }
}

/// Fitted coefficients on the original column scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub intercept: f64,
    /// One entry per penalized design column.
    pub beta: Vec<f64>,
    pub lambda: f64,
    /// False when `max_sweeps` ran out first.
    pub converged: bool,
    pub sweeps: usize,
    /// Objective (standardized problem) after each sweep, when tracked.
    pub objective_trace: Vec<f64>,
}

impl Coefficients {
    pub fn predict_row(&self, design: &DesignMatrix, i: usize) -> f64 {
        self.intercept
            + self
                .beta
                .iter()
                .enumerate()
                .filter(|(_, b)| **b != 0.0)
                .map(|(j, b)| b * design.column(j)[i])
                .sum::<f64>()
    }

    pub fn is_null(&self) -> bool {
        self.beta.iter().all(|&b| b == 0.0)
    }
}

/// Cached Gram block of a group over its usable columns.
#[derive(Debug, Clone)]
enum Block {
    Empty,
    Single { j: usize, g: f64 },
    Pair { j: [usize; 2], g: [f64; 3] },
}

/// The problem on centered, unit-variance columns.
struct Standardized<'a> {
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
    y_mean: f64,
    yc: Vec<f64>,
    groups: &'a GroupSpec,
    blocks: Vec<Block>,
    gram: RefCell<GramCache>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'a> Standardized<'a> {
    fn new(design: &DesignMatrix, y: &[f64], groups: &'a GroupSpec) -> Result<Self> {
        let n = design.n_rows();
        if y.len() != n {
            return Err(Error::Dimension(format!("{} outcomes for {n} design rows", y.len())));
        }
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if groups.groups.iter().flat_map(|g| &g.columns).any(|&j| j >= design.n_penalized()) {
            return Err(Error::Dimension("group refers to a missing column".into()));
        }
        let nf = n as f64;
        let mut cols = Vec::with_capacity(design.n_penalized());
        let mut means = Vec::with_capacity(design.n_penalized());
        let mut scales = Vec::with_capacity(design.n_penalized());
        for raw in &design.columns {
            if is_constant(raw) {
                cols.push(Vec::new());
                means.push(raw[0]);
                scales.push(0.0);
                continue;
            }
            let mean = raw.iter().sum::<f64>() / nf;
            let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf).sqrt();
            cols.push(raw.iter().map(|v| (v - mean) / sd).collect());
            means.push(mean);
            scales.push(sd);
        }
        let y_mean = y.iter().sum::<f64>() / nf;
        let yc = y.iter().map(|v| v - y_mean).collect();
        let blocks = groups
            .groups
            .iter()
            .map(|g| {
                let usable: Vec<usize> = g.columns.iter().copied().filter(|&j| scales[j] > 0.0).collect();
                match usable.as_slice() {
                    [] => Block::Empty,
                    [j] => Block::Single {
                        j: *j,
                        g: dot(&cols[*j], &cols[*j]),
                    },
                    [a, b] => Block::Pair {
                        j: [*a, *b],
                        g: [
                            dot(&cols[*a], &cols[*a]),
                            dot(&cols[*a], &cols[*b]),
                            dot(&cols[*b], &cols[*b]),
                        ],
                    },
                    _ => unreachable!("groups hold at most two columns"),
                }
            })
            .collect();
        Ok(Self {
            cols,
            means,
            scales,
            y_mean,
            yc,
            groups,
            blocks,
            gram: RefCell::new(GramCache::new(design.n_penalized())),
        })
    }

    fn lambda_max(&self) -> f64 {
        self.groups
            .groups
            .iter()
            .zip(&self.blocks)
            .map(|(g, block)| {
                let norm = match block {
                    Block::Empty => 0.0,
                    Block::Single { j, .. } => dot(&self.cols[*j], &self.yc).abs(),
                    Block::Pair { j, .. } => {
                        let a = dot(&self.cols[j[0]], &self.yc);
                        let b = dot(&self.cols[j[1]], &self.yc);
                        a.hypot(b)
                    }
                };
                norm / g.weight
            })
            .fold(0.0, f64::max)
    }

    fn penalty(&self, b: &[f64]) -> f64 {
        self.groups
            .groups
            .iter()
            .map(|g| g.weight * g.columns.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt())
            .sum()
    }

    fn objective(&self, b: &[f64], resid: &[f64], lambda: f64) -> f64 {
        0.5 * dot(resid, resid) + lambda * self.penalty(b)
    }

    fn residual(&self, b: &[f64]) -> Vec<f64> {
        let mut r = self.yc.clone();
        for (j, &bj) in b.iter().enumerate() {
            if bj != 0.0 {
                for (ri, xi) in r.iter_mut().zip(&self.cols[j]) {
                    *ri -= bj * xi;
                }
            }
        }
        r
    }

    /// Exact minimizer over one group given the partial gradients
    /// `grad_j = x_j' r` of its columns.
    fn group_target(&self, gi: usize, lambda: f64, b: &[f64], grad: [f64; 2]) -> [f64; 2] {
        let mu = lambda * self.groups.groups[gi].weight;
        match &self.blocks[gi] {
            Block::Empty => [0.0; 2],
            Block::Single { j, g } => [soft(grad[0] + g * b[*j], mu) / g, 0.0],
            Block::Pair { j: [ja, jb], g } => {
                let c = [
                    grad[0] + g[0] * b[*ja] + g[1] * b[*jb],
                    grad[1] + g[1] * b[*ja] + g[2] * b[*jb],
                ];
                solve_pair(*g, c, mu)
            }
        }
    }

    fn block_columns(&self, gi: usize) -> &[usize] {
        match &self.blocks[gi] {
            Block::Empty => &[],
            Block::Single { j, .. } => std::slice::from_ref(j),
            Block::Pair { j, .. } => j,
        }
    }

    /// One pass over every group, keeping the full residual up to date.
    fn full_sweep(&self, lambda: f64, b: &mut [f64], resid: &mut [f64]) -> f64 {
        let mut change = 0.0f64;
        for gi in 0..self.blocks.len() {
            let js = self.block_columns(gi);
            let mut grad = [0.0; 2];
            for (g, &j) in grad.iter_mut().zip(js) {
                *g = dot(&self.cols[j], resid);
            }
            let u = self.group_target(gi, lambda, b, grad);
            for (&j, &uj) in js.iter().zip(&u) {
                let delta = uj - b[j];
                if delta != 0.0 {
                    b[j] = uj;
                    for (ri, xi) in resid.iter_mut().zip(&self.cols[j]) {
                        *ri -= delta * xi;
                    }
                }
                change = change.max(delta.abs());
            }
        }
        change
    }

    /// Block coordinate descent from `b`. Full sweeps alternate with runs of
    /// sweeps over the groups that are currently nonzero.
    fn solve(&self, lambda: f64, b: &mut [f64], opts: &SolverOptions) -> SolveInfo {
        let mut resid = self.residual(b);
        let check = opts.track_objective || cfg!(debug_assertions);
        let mut progress = Progress {
            sweeps: 0,
            check,
            track: opts.track_objective,
            last: if check { self.objective(b, &resid, lambda) } else { f64::INFINITY },
            trace: Vec::new(),
        };
        let mut converged = false;
        while progress.sweeps < opts.max_sweeps {
            let change = self.full_sweep(lambda, b, &mut resid);
            progress.record(|| self.objective(b, &resid, lambda));
            if change <= opts.tol {
                converged = true;
                if let Some(obj) = self.refine(lambda, b, &mut resid) {
                    progress.improve(obj);
                }
                break;
            }
            self.active_run(lambda, b, &mut resid, opts, &mut progress);
        }
        SolveInfo {
            converged,
            sweeps: progress.sweeps,
            trace: progress.trace,
            rss: dot(&resid, &resid),
        }
    }

    /// Sweeps restricted to the nonzero groups until their coefficients stop
    /// moving. Works from cached inner products among the active columns, so a
    /// sweep costs O(active^2) instead of O(n active), and periodically tries
    /// an Anderson extrapolation of the last few sweeps, kept only when it
    /// lowers the objective.
    fn active_run(&self, lambda: f64, b: &mut [f64], resid: &mut [f64], opts: &SolverOptions, progress: &mut Progress) {
        let groups: Vec<usize> = (0..self.blocks.len())
            .filter(|&gi| self.block_columns(gi).iter().any(|&j| b[j] != 0.0))
            .collect();
        if groups.is_empty() {
            return;
        }
        let cols: Vec<usize> = groups.iter().flat_map(|&gi| self.block_columns(gi).iter().copied()).collect();
        let mut state = ActiveState::new(self, &cols, b, resid);
        let mut history: Vec<Vec<f64>> = Vec::with_capacity(ANDERSON_DEPTH + 1);
        while progress.sweeps < opts.max_sweeps {
            let mut change = 0.0f64;
            let mut s = 0;
            for &gi in &groups {
                let width = self.block_columns(gi).len();
                let mut grad = [0.0; 2];
                grad[..width].copy_from_slice(&state.grad[s..s + width]);
                let u = self.group_target(gi, lambda, b, grad);
                for (k, &uj) in u[..width].iter().enumerate() {
                    change = change.max(state.shift(s + k, uj, b));
                }
                s += width;
            }
            progress.record(|| state.half_rss + lambda * self.penalty(b));
            if change <= opts.tol {
                break;
            }
            history.push(cols.iter().map(|&j| b[j]).collect());
            if history.len() == ANDERSON_DEPTH + 1 {
                if let Some(ext) = anderson(&history) {
                    let before = state.half_rss + lambda * self.penalty(b);
                    let saved: Vec<f64> = cols.iter().map(|&j| b[j]).collect();
                    let saved_grad = state.grad.clone();
                    let saved_rss = state.half_rss;
                    for (k, &v) in ext.iter().enumerate() {
                        state.shift(k, v, b);
                    }
                    let after = state.half_rss + lambda * self.penalty(b);
                    if after < before {
                        progress.last = progress.last.min(after);
                    } else {
                        for (&j, &v) in cols.iter().zip(&saved) {
                            b[j] = v;
                        }
                        state.grad = saved_grad;
                        state.half_rss = saved_rss;
                    }
                }
                history.clear();
            }
        }
        for (k, &j) in cols.iter().enumerate() {
            let delta = b[j] - state.start[k];
            if delta != 0.0 {
                for (ri, xi) in resid.iter_mut().zip(&self.cols[j]) {
                    *ri -= delta * xi;
                }
            }
        }
    }

    /// One Newton step on the nonzero groups, where the objective is smooth,
    /// taken after the sweeps have met the stopping rule. Kept only if it
    /// lowers the objective; returns the new objective in that case. At
    /// `lambda = 0` this lands on the least-squares solution, well inside the
    /// accuracy the sweep-change rule alone can promise on ill-conditioned
    /// designs. Skipped for active sets above `REFINE_LIMIT` columns.
    fn refine(&self, lambda: f64, b: &mut [f64], resid: &mut [f64]) -> Option<f64> {
        let active: Vec<usize> = (0..self.blocks.len())
            .filter(|&gi| self.block_columns(gi).iter().any(|&j| b[j] != 0.0))
            .collect();
        let cols: Vec<usize> = active.iter().flat_map(|&gi| self.block_columns(gi).iter().copied()).collect();
        let k = cols.len();
        if k == 0 || k > REFINE_LIMIT {
            return None;
        }
        let mut h = DMatrix::from_fn(k, k, |a, c| dot(&self.cols[cols[a]], &self.cols[cols[c]]));
        let mut rhs = DVector::from_fn(k, |a, _| dot(&self.cols[cols[a]], resid));
        let mut pos = 0;
        for &gi in &active {
            let js = self.block_columns(gi);
            let mu = lambda * self.groups.groups[gi].weight;
            let norm = js.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt();
            for (a, &ja) in js.iter().enumerate() {
                rhs[pos + a] -= mu * b[ja] / norm;
                if js.len() > 1 {
                    for (c, &jc) in js.iter().enumerate() {
                        let eye = if a == c { 1.0 } else { 0.0 };
                        h[(pos + a, pos + c)] += mu * (eye / norm - b[ja] * b[jc] / norm.powi(3));
                    }
                }
            }
            pos += js.len();
        }
        let step = h.cholesky()?.solve(&rhs);
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        let before = self.objective(b, resid, lambda);
        let mut trial_b = b.to_vec();
        let mut trial_r = resid.to_vec();
        for (a, &j) in cols.iter().enumerate() {
            // a step that flips a sign leaves the smooth region it was derived in
            if trial_b[j] * (trial_b[j] + step[a]) < 0.0 {
                return None;
            }
            trial_b[j] += step[a];
            for (ri, xi) in trial_r.iter_mut().zip(&self.cols[j]) {
                *ri -= step[a] * xi;
            }
        }
        let after = self.objective(&trial_b, &trial_r, lambda);
        if after < before {
            b.copy_from_slice(&trial_b);
            resid.copy_from_slice(&trial_r);
            Some(after)
        } else {
            None
        }
    }

    fn to_original(&self, b: &[f64], info: SolveInfo, lambda: f64) -> Coefficients {
        let beta: Vec<f64> = b
            .iter()
            .zip(&self.scales)
            .map(|(&bj, &s)| if s > 0.0 && bj != 0.0 { bj / s } else { 0.0 })
            .collect();
        let intercept = self.y_mean - beta.iter().zip(&self.means).map(|(bj, m)| bj * m).sum::<f64>();
        Coefficients {
            intercept,
            beta,
            lambda,
            converged: info.converged,
            sweeps: info.sweeps,
            objective_trace: info.trace,
        }
    }
}

/// Sweeps combined by one Anderson extrapolation step.
const ANDERSON_DEPTH: usize = 5;
/// Largest active set that gets a Newton refinement after convergence.
const REFINE_LIMIT: usize = 100;

struct Progress {
    sweeps: usize,
    check: bool,
    track: bool,
    last: f64,
    trace: Vec<f64>,
}

impl Progress {
    fn record(&mut self, objective: impl FnOnce() -> f64) {
        self.sweeps += 1;
        if !self.check {
            return;
        }
        let obj = objective();
        debug_assert!(
            obj <= self.last + 1e-9 * (1.0 + self.last.abs()),
            "objective increased from {} to {obj}",
            self.last
        );
        self.last = obj;
        if self.track {
            self.trace.push(obj);
        }
    }

    /// Records an objective reached outside a sweep.
    fn improve(&mut self, obj: f64) {
        if self.check {
            self.last = self.last.min(obj);
            if self.track {
                self.trace.push(obj);
            }
        }
    }
}

/// Inner products among every column that has ever been active, grown on
/// demand and kept across `lambda` values.
struct GramCache {
    slot_of: Vec<Option<usize>>,
    cols: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl GramCache {
    fn new(p: usize) -> Self {
        Self {
            slot_of: vec![None; p],
            cols: Vec::new(),
            rows: Vec::new(),
        }
    }

    fn slot(&mut self, j: usize, data: &[Vec<f64>]) -> usize {
        if let Some(k) = self.slot_of[j] {
            return k;
        }
        let k = self.cols.len();
        let mut row = Vec::with_capacity(k + 1);
        for (a, &c) in self.cols.iter().enumerate() {
            let v = dot(&data[j], &data[c]);
            self.rows[a].push(v);
            row.push(v);
        }
        row.push(dot(&data[j], &data[j]));
        self.rows.push(row);
        self.cols.push(j);
        self.slot_of[j] = Some(k);
        k
    }
}

/// Gradients and inner products of a fixed set of active columns.
struct ActiveState {
    cols: Vec<usize>,
    /// Row-major `m x m` inner products among `cols`.
    gram: Vec<f64>,
    grad: Vec<f64>,
    start: Vec<f64>,
    half_rss: f64,
}

impl ActiveState {
    fn new(prob: &Standardized<'_>, cols: &[usize], b: &[f64], resid: &[f64]) -> Self {
        let mut cache = prob.gram.borrow_mut();
        let slots: Vec<usize> = cols.iter().map(|&j| cache.slot(j, &prob.cols)).collect();
        let m = cols.len();
        let mut gram = Vec::with_capacity(m * m);
        for &a in &slots {
            let row = &cache.rows[a];
            gram.extend(slots.iter().map(|&c| row[c]));
        }
        Self {
            cols: cols.to_vec(),
            gram,
            grad: cols.iter().map(|&j| dot(&prob.cols[j], resid)).collect(),
            start: cols.iter().map(|&j| b[j]).collect(),
            half_rss: 0.5 * dot(resid, resid),
        }
    }

    /// Sets coefficient `k` of the active set to `value`; returns |change|.
    fn shift(&mut self, k: usize, value: f64, b: &mut [f64]) -> f64 {
        let j = self.cols[k];
        let delta = value - b[j];
        if delta == 0.0 {
            return 0.0;
        }
        let m = self.cols.len();
        let row = &self.gram[k * m..(k + 1) * m];
        self.half_rss += delta * (0.5 * delta * row[k] - self.grad[k]);
        for (g, &v) in self.grad.iter_mut().zip(row) {
            *g -= v * delta;
        }
        b[j] = value;
        delta.abs()
    }
}

/// Anderson extrapolation of iterates `h[0..=K]`: the affine combination of
/// `h[1..=K]` whose weights minimize the norm of the combined differences.
fn anderson(h: &[Vec<f64>]) -> Option<Vec<f64>> {
    let k = h.len() - 1;
    let diffs: Vec<Vec<f64>> = (0..k)
        .map(|i| h[i + 1].iter().zip(&h[i]).map(|(a, b)| a - b).collect())
        .collect();
    let mut mat = vec![vec![0.0; k + 1]; k];
    for a in 0..k {
        for c in a..k {
            let v = dot(&diffs[a], &diffs[c]);
            mat[a][c] = v;
            mat[c][a] = v;
        }
        mat[a][k] = 1.0;
    }
    let scale = (0..k).map(|a| mat[a][a]).sum::<f64>();
    if !(scale > 0.0) {
        return None;
    }
    for (a, row) in mat.iter_mut().enumerate() {
        row[a] += 1e-10 * scale;
    }
    // Gaussian elimination with partial pivoting on [M | 1]
    for col in 0..k {
        let piv = (col..k).max_by(|&a, &c| mat[a][col].abs().total_cmp(&mat[c][col].abs()))?;
        if mat[piv][col].abs() < 1e-300 {
            return None;
        }
        mat.swap(col, piv);
        for r in col + 1..k {
            let f = mat[r][col] / mat[col][col];
            for c in col..=k {
                mat[r][c] -= f * mat[col][c];
            }
        }
    }
    let mut w = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|c| mat[r][c] * w[c]).sum();
        w[r] = (mat[r][k] - s) / mat[r][r];
    }
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total.abs() < 1e-300 {
        return None;
    }
    let m = h[0].len();
    let mut out = vec![0.0; m];
    for (i, wi) in w.iter().enumerate() {
        let c = wi / total;
        for (o, v) in out.iter_mut().zip(&h[i + 1]) {
            *o += c * v;
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

struct SolveInfo {
    converged: bool,
    sweeps: usize,
    trace: Vec<f64>,
    rss: f64,
}

fn soft(c: f64, t: f64) -> f64 {
    if c > t {
        c - t
    } else if c < -t {
        c + t
    } else {
        0.0
    }
}

/// Minimizes `1/2 u'Gu - c'u + mu ||u||` for a symmetric positive
/// semidefinite 2x2 `G = [[g0, g1], [g1, g2]]`.
fn solve_pair(g: [f64; 3], c: [f64; 2], mu: f64) -> [f64; 2] {
    let c_norm = c[0].hypot(c[1]);
    if c_norm <= mu {
        return [0.0, 0.0];
    }
    let [a, off, d] = g;
    let theta = 0.5 * (2.0 * off).atan2(a - d);
    let (sin, cos) = theta.sin_cos();
    let floor = 1e-12 * (a + d);
    let e = [
        (a * cos * cos + 2.0 * off * sin * cos + d * sin * sin).max(floor),
        (a * sin * sin - 2.0 * off * sin * cos + d * cos * cos).max(floor),
    ];
    let v = [[cos, sin], [-sin, cos]];
    let proj = [v[0][0] * c[0] + v[0][1] * c[1], v[1][0] * c[0] + v[1][1] * c[1]];
    if mu == 0.0 {
        let w = [proj[0] / e[0], proj[1] / e[1]];
        return [v[0][0] * w[0] + v[1][0] * w[1], v[0][1] * w[0] + v[1][1] * w[1]];
    }

    // Find s = ||u|| > 0 with F(s) = sum_i proj_i^2 / (e_i s + mu)^2 = 1;
    // F is decreasing, F(0) > 1. Newton on F^{-1/2} - 1, kept inside a bracket.
    let f = |s: f64| -> (f64, f64) {
        let mut val = 0.0;
        let mut der = 0.0;
        for i in 0..2 {
            let den = e[i] * s + mu;
            val += proj[i] * proj[i] / (den * den);
            der += -2.0 * proj[i] * proj[i] * e[i] / (den * den * den);
        }
        (val, der)
    };
    let mut lo = 0.0;
    let mut hi = c_norm / e[0].min(e[1]);
    let mut s = (c_norm - mu) / e[0].max(e[1]);
    for _ in 0..100 {
        let (val, der) = f(s);
        if val > 1.0 {
            lo = s;
        } else {
            hi = s;
        }
        let q = val.powf(-0.5) - 1.0;
        if q.abs() <= 1e-15 || hi - lo <= 1e-15 * hi {
            break;
        }
        let dq = -0.5 * val.powf(-1.5) * der;
        let next = s - q / dq;
        s = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
    }
    let w = [
        proj[0] * s / (e[0] * s + mu),
        proj[1] * s / (e[1] * s + mu),
    ];
    [v[0][0] * w[0] + v[1][0] * w[1], v[0][1] * w[0] + v[1][1] * w[1]]
}

/// Group lasso at one `lambda`, starting from zero.
pub fn fit_group_lasso(
    design: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    groups: &GroupSpec,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Coefficients> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    let y = y.to_vec();
    let prob = Standardized::new(design, &y, groups)?;
    let mut b = vec![0.0; design.n_penalized()];
    let info = prob.solve(lambda, &mut b, opts);
    Ok(prob.to_original(&b, info, lambda))
}

/// Smallest `lambda` at which every penalized coefficient is zero.
pub fn lambda_max(design: &DesignMatrix, y: ArrayView1<'_, f64>, groups: &GroupSpec) -> Result<f64> {
    let y = y.to_vec();
    Ok(Standardized::new(design, &y, groups)?.lambda_max())
}

/// Geometric grid of `count` values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_path(
    design: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    groups: &GroupSpec,
    count: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::param("lambda_count", "must be at least 1"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::param("lambda_ratio", format!("must lie in (0, 1), got {ratio}")));
    }
    let top = lambda_max(design, y, groups)?;
    if count == 1 {
        return Ok(vec![top]);
    }
    let step = ratio.ln() / (count - 1) as f64;
    Ok((0..count).map(|i| top * (step * i as f64).exp()).collect())
}

/// Fits every `lambda` in order with warm starts. With `stop_when_saturated`
/// the path is cut once the fit explains nearly all variation or stops
/// improving; the returned vector is then shorter than `path`.
pub fn fit_path(
    design: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    groups: &GroupSpec,
    path: &[f64],
    opts: &SolverOptions,
    stop_when_saturated: bool,
) -> Result<Vec<Coefficients>> {
    let y = y.to_vec();
    let prob = Standardized::new(design, &y, groups)?;
    let tss = dot(&prob.yc, &prob.yc);
    let mut b = vec![0.0; design.n_penalized()];
    let mut out = Vec::with_capacity(path.len());
    let mut last_r2 = 0.0;
    for &lambda in path {
        let info = prob.solve(lambda, &mut b, opts);
        let r2 = if tss > 0.0 { 1.0 - info.rss / tss } else { 1.0 };
        out.push(prob.to_original(&b, info, lambda));
        if stop_when_saturated && out.len() > 1 && (r2 >= SATURATION_R2 || r2 - last_r2 < SATURATION_STEP * r2) {
            break;
        }
        last_r2 = r2;
    }
    Ok(out)
}

/// Largest KKT violation of a solution, measured on the standardized scale:
/// `|grad_g| <= w_g lambda` for zero groups and
/// `grad_g = lambda w_g b_g / ||b_g||` for active ones.
pub fn kkt_residual(
    design: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    groups: &GroupSpec,
    coefs: &Coefficients,
) -> Result<f64> {
    let yv = y.to_vec();
    let prob = Standardized::new(design, &yv, groups)?;
    let b: Vec<f64> = coefs.beta.iter().zip(&prob.scales).map(|(bj, s)| bj * s).collect();
    let resid = prob.residual(&b);
    let mut worst = 0.0f64;
    for (g, block) in groups.groups.iter().zip(&prob.blocks) {
        let js: Vec<usize> = match block {
            Block::Empty => continue,
            Block::Single { j, .. } => vec![*j],
            Block::Pair { j, .. } => j.to_vec(),
        };
        let grad: Vec<f64> = js.iter().map(|&j| dot(&prob.cols[j], &resid)).collect();
        let bn = js.iter().map(|&j| b[j] * b[j]).sum::<f64>().sqrt();
        let bound = coefs.lambda * g.weight;
        let viol = if bn == 0.0 {
            (grad.iter().map(|v| v * v).sum::<f64>().sqrt() - bound).max(0.0)
        } else {
            js.iter()
                .zip(&grad)
                .map(|(&j, gr)| (gr - bound * b[j] / bn).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        worst = worst.max(viol);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub path: Vec<f64>,
    /// Mean held-out squared error per `lambda`, pooled over all rows.
    pub errors: Vec<f64>,
    pub best_index: usize,
    pub best_lambda: f64,
    /// True when the given folds lacked an arm and were re-dealt by arm.
    pub restratified: bool,
}

fn folds_have_both_arms(folds: &FoldAssignment, z: ArrayView1<'_, u8>) -> bool {
    (0..folds.k).all(|f| {
        let (_, train) = folds.split(f);
        let treated = train.iter().filter(|&&i| z[i] == 1).count();
        treated > 0 && treated < train.len()
    })
}

/// K-fold cross-validation along `path`. The best `lambda` minimizes the mean
/// held-out squared error; ties go to the largest `lambda`. If some fold's
/// training part lacks an arm the folds are re-dealt stratified by arm once.
pub fn cross_validate(
    design: &DesignMatrix,
    y: ArrayView1<'_, f64>,
    z: ArrayView1<'_, u8>,
    groups: &GroupSpec,
    folds: &FoldAssignment,
    path: &[f64],
    opts: &SolverOptions,
) -> Result<CvResult> {
    let n = design.n_rows();
    if folds.folds.len() != n || z.len() != n || y.len() != n {
        return Err(Error::Dimension("folds, arms, outcomes and design disagree on rows".into()));
    }
    if folds.k < 2 {
        return Err(Error::param("folds", "need at least 2 folds"));
    }
    if path.is_empty() {
        return Err(Error::param("lambda_count", "empty lambda path"));
    }
    let mut restratified = false;
    let restrat;
    let mut folds = folds;
    if !folds_have_both_arms(folds, z) {
        restrat = split_folds_stratified(z, folds.k, folds.seed)?;
        folds = &restrat;
        restratified = true;
        if !folds_have_both_arms(folds, z) {
            return Err(Error::EmptyArm {
                arm: "one",
                context: "a cross-validation fold has no training rows from one arm".into(),
            });
        }
    }

    let per_fold: Vec<Result<Vec<f64>>> = (0..folds.k)
        .into_par_iter()
        .map(|f| {
            let (held, train) = folds.split(f);
            let sub = design.select_rows(&train);
            let sub_y: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let fits = fit_path(&sub, ArrayView1::from(&sub_y), groups, path, opts, false)?;
            Ok(fits
                .iter()
                .map(|c| {
                    held.iter()
                        .map(|&i| (y[i] - c.predict_row(design, i)).powi(2))
                        .sum::<f64>()
                })
                .collect())
        })
        .collect();
    let mut sse = vec![0.0; path.len()];
    for fold in per_fold {
        for (acc, v) in sse.iter_mut().zip(fold?) {
            *acc += v;
        }
    }
    let errors: Vec<f64> = sse.iter().map(|s| s / n as f64).collect();
    let mut best_index = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best_index] {
            best_index = i;
        }
    }
    Ok(CvResult {
        path: path.to_vec(),
        best_lambda: path[best_index],
        errors,
        best_index,
        restratified,
    })
}
