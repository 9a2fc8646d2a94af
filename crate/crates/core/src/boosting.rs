//! Gradient boosting with size-randomized least-squares regression trees.
//!
//! The ensemble only serves as a rule generator: every tree is grown on the
//! covariates plus the treatment indicator (last feature column), so a split on
//! the treatment produces arm-specific rules downstream.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dataset::TrialDataset;
use crate::error::{Error, Result};

pub const DEFAULT_MIN_LEAF: usize = 7;

/// Gains closer than this fraction of the targets' total sum of squares are
/// treated as ties (lowest feature, then smallest threshold, then earliest
/// leaf wins). The same rule is what makes tree growth reproducible across
/// summation orders.
pub const TIE_TOLERANCE: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    LessEqual,
    Greater,
}

/// One side of a binary split: `x[feature] <= threshold` or `x[feature] > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCondition {
    pub feature: usize,
    pub threshold: f64,
    pub direction: Direction,
}

impl SplitCondition {
    pub fn holds(&self, value: f64) -> bool {
        match self.direction {
            Direction::LessEqual => value <= self.threshold,
            Direction::Greater => value > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Leaf,
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Parent node and the side of its split this node sits on.
    pub parent: Option<(usize, Direction)>,
    /// Mean target of the rows routed here (the leaf constant for leaves).
    pub value: f64,
    pub n_samples: usize,
    pub kind: NodeKind,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf)
    }
}

/// A binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
    pub n_features: usize,
}

impl RegressionTree {
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.len() - self.n_leaves()
    }

    pub fn leaf_index(&self, row: ArrayView1<'_, f64>) -> usize {
        let mut idx = 0;
        while let NodeKind::Split {
            feature,
            threshold,
            left,
            right,
        } = self.nodes[idx].kind
        {
            idx = if row[feature] <= threshold { left } else { right };
        }
        idx
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        self.nodes[self.leaf_index(row)].value
    }

    /// Conditions from the root down to `node`, root first.
    pub fn path_conditions(&self, node: usize) -> Vec<SplitCondition> {
        let mut path = Vec::new();
        let mut cur = node;
        while let Some((parent, direction)) = self.nodes[cur].parent {
            if let NodeKind::Split {
                feature, threshold, ..
            } = self.nodes[parent].kind
            {
                path.push(SplitCondition {
                    feature,
                    threshold,
                    direction,
                });
            }
            cur = parent;
        }
        path.reverse();
        path
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct OpenLeaf {
    node: usize,
    /// Row indices sorted by each feature's value (ties by row index).
    sorted: Vec<Vec<usize>>,
    best: Option<Candidate>,
}

fn mean_of(targets: ArrayView1<'_, f64>, rows: &[usize]) -> f64 {
    let mut sorted_rows = rows.to_vec();
    sorted_rows.sort_unstable();
    sorted_rows.iter().map(|&i| targets[i]).sum::<f64>() / rows.len() as f64
}

fn best_split(
    features: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    sorted: &[Vec<usize>],
    min_leaf: usize,
    eps: f64,
) -> Option<Candidate> {
    let m = sorted.first().map_or(0, Vec::len);
    if m < 2 * min_leaf.max(1) {
        return None;
    }
    let total: f64 = sorted[0].iter().map(|&i| targets[i]).sum();
    let parent_term = total * total / m as f64;
    let mut best: Option<Candidate> = None;
    let mut best_gain = 0.0;
    for (feature, order) in sorted.iter().enumerate() {
        let mut left_sum = 0.0;
        for pos in 1..m {
            left_sum += targets[order[pos - 1]];
            if pos < min_leaf || m - pos < min_leaf {
                continue;
            }
            let lo = features[[order[pos - 1], feature]];
            let hi = features[[order[pos], feature]];
            if lo >= hi {
                continue;
            }
            let right_sum = total - left_sum;
            let gain = left_sum * left_sum / pos as f64 + right_sum * right_sum / (m - pos) as f64
                - parent_term;
            if gain > best_gain + eps {
                let mut threshold = 0.5 * (lo + hi);
                if threshold >= hi {
                    threshold = lo;
                }
                best_gain = gain;
                best = Some(Candidate {
                    feature,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

/// Grows a least-squares tree best-first: the open leaf whose best split
/// removes the most squared error is split next, until `max_leaves` leaves
/// exist or no split is admissible. A node needs `2 * min_leaf` rows to be
/// split and each child keeps at least `min_leaf`. Split points are midpoints
/// between consecutive distinct values.
pub fn fit_tree(
    features: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    max_leaves: usize,
    min_leaf: usize,
) -> RegressionTree {
    let (n, d) = features.dim();
    assert_eq!(n, targets.len(), "features and targets disagree on rows");
    let all: Vec<usize> = (0..n).collect();
    let root_value = if n == 0 { 0.0 } else { mean_of(targets, &all) };
    let mut nodes = vec![TreeNode {
        parent: None,
        value: root_value,
        n_samples: n,
        kind: NodeKind::Leaf,
    }];
    if n == 0 || max_leaves < 2 {
        return RegressionTree {
            nodes,
            n_features: d,
        };
    }

    let eps = TIE_TOLERANCE * targets.iter().map(|t| t * t).sum::<f64>();
    let sorted: Vec<Vec<usize>> = (0..d)
        .map(|f| {
            let mut idx = all.clone();
            idx.sort_by(|&a, &b| features[[a, f]].total_cmp(&features[[b, f]]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let best = best_split(features, targets, &sorted, min_leaf, eps);
    let mut open = vec![OpenLeaf {
        node: 0,
        sorted,
        best,
    }];
    let mut leaves = 1;

    while leaves < max_leaves {
        let mut pick: Option<usize> = None;
        let mut pick_gain = 0.0;
        for (i, leaf) in open.iter().enumerate() {
            if let Some(c) = leaf.best {
                if pick.is_none() || c.gain > pick_gain + eps {
                    pick = Some(i);
                    pick_gain = c.gain;
                }
            }
        }
        let Some(i) = pick else { break };
        let leaf = open.remove(i);
        let cand = leaf.best.expect("picked leaf has a split");

        let goes_left = |row: usize| features[[row, cand.feature]] <= cand.threshold;
        let mut left_sorted = Vec::with_capacity(d);
        let mut right_sorted = Vec::with_capacity(d);
        for order in &leaf.sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = order.iter().partition(|&&row| goes_left(row));
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let left_id = nodes.len();
        let right_id = left_id + 1;
        for (sorted, direction) in [
            (&left_sorted, Direction::LessEqual),
            (&right_sorted, Direction::Greater),
        ] {
            nodes.push(TreeNode {
                parent: Some((leaf.node, direction)),
                value: mean_of(targets, &sorted[0]),
                n_samples: sorted[0].len(),
                kind: NodeKind::Leaf,
            });
        }
        nodes[leaf.node].kind = NodeKind::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left: left_id,
            right: right_id,
        };
        leaves += 1;

        for (id, sorted) in [(left_id, left_sorted), (right_id, right_sorted)] {
            let best = best_split(features, targets, &sorted, min_leaf, eps);
            open.push(OpenLeaf {
                node: id,
                sorted,
                best,
            });
        }
    }

    RegressionTree {
        nodes,
        n_features: d,
    }
}

/// Terminal-node count `2 + floor(u)` with `u` exponential of mean
/// `mean_depth - 2`; exactly 2 when `mean_depth == 2`.
pub fn sample_terminal_count<R: Rng + ?Sized>(mean_depth: f64, rng: &mut R) -> Result<usize> {
    if !(mean_depth >= 2.0 && mean_depth.is_finite()) {
        return Err(Error::param(
            "mean_depth",
            format!("must be a finite value >= 2, got {mean_depth}"),
        ));
    }
    if mean_depth == 2.0 {
        return Ok(2);
    }
    let exp = Exp::new(1.0 / (mean_depth - 2.0))
        .map_err(|e| Error::param("mean_depth", e.to_string()))?;
    let u: f64 = exp.sample(rng);
    Ok(2 + u.floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoostingParams {
    /// Number of trees M.
    pub n_trees: usize,
    /// Mean terminal-node parameter (>= 2).
    pub mean_depth: f64,
    /// Shrinkage rate applied at the update step.
    pub shrinkage: f64,
    /// Fraction of rows drawn without replacement for each tree.
    pub subsample: f64,
    pub min_leaf: usize,
    pub seed: u64,
}

impl BoostingParams {
    pub fn validate(&self, n: usize) -> Result<usize> {
        if !(self.mean_depth >= 2.0 && self.mean_depth.is_finite()) {
            return Err(Error::param("mean_depth", format!("must be >= 2, got {}", self.mean_depth)));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::param("shrinkage", format!("must lie in (0, 1], got {}", self.shrinkage)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::param("subsample", format!("must lie in (0, 1], got {}", self.subsample)));
        }
        if self.min_leaf == 0 {
            return Err(Error::param("min_leaf", "must be at least 1"));
        }
        let size = (self.subsample * n as f64).floor() as usize;
        if size < 2 * self.min_leaf {
            return Err(Error::param(
                "subsample",
                format!(
                    "subsample of {size} rows is smaller than 2 * min_leaf = {}",
                    2 * self.min_leaf
                ),
            ));
        }
        Ok(size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBTEnsemble {
    pub trees: Vec<RegressionTree>,
    /// Terminal-node count drawn for each tree (an upper bound on its leaves).
    pub requested_leaves: Vec<usize>,
    pub base_prediction: f64,
    pub params: BoostingParams,
}

impl GBTEnsemble {
    /// `base + shrinkage * sum_m h_m(row)` for a row with the treatment appended.
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
        self.base_prediction + self.params.shrinkage * sum
    }

    /// Total rule count `sum_m 2 (t_m - 1)` over the fitted trees.
    pub fn rule_count(&self) -> usize {
        self.trees.iter().map(|t| 2 * (t.n_leaves() - 1)).sum()
    }
}

/// Squared-error gradient boosting over `(x, z)`.
pub fn fit_gbt(dataset: &TrialDataset, params: &BoostingParams) -> Result<GBTEnsemble> {
    let n = dataset.n();
    let sub_size = params.validate(n)?;
    let features = dataset.features_with_treatment();
    let y = dataset.y();
    let base = y.sum() / n as f64;
    let mut fitted = Array1::from_elem(n, base);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut requested = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        let residual = &y - &fitted;
        let mut rows = rand::seq::index::sample(&mut rng, n, sub_size).into_vec();
        rows.sort_unstable();
        let t_m = sample_terminal_count(params.mean_depth, &mut rng)?;
        let sub_x = features.select(Axis(0), &rows);
        let sub_r = residual.select(Axis(0), &rows);
        let tree = fit_tree(sub_x.view(), sub_r.view(), t_m, params.min_leaf);
        for (i, row) in features.axis_iter(Axis(0)).enumerate() {
            fitted[i] += params.shrinkage * tree.predict_row(row);
        }
        trees.push(tree);
        requested.push(t_m);
    }

    Ok(GBTEnsemble {
        trees,
        requested_leaves: requested,
        base_prediction: base,
        params: *params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn degenerate_mean_depth_gives_stumps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_terminal_count(2.0, &mut rng).unwrap(), 2);
        }
        assert!(sample_terminal_count(1.5, &mut rng).is_err());
        assert!(sample_terminal_count(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn terminal_count_mean_matches_closed_form() {
        // E[floor(U)] for U ~ Exp(mean 2) is sum_{k>=1} P(U >= k) = sum_k e^{-k/2}.
        let expected = 2.0 + (1..200).map(|k| (-(k as f64) / 2.0).exp()).sum::<f64>();
        assert!((expected - 3.541).abs() < 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 100_000;
        let mut total = 0usize;
        for _ in 0..draws {
            let t = sample_terminal_count(4.0, &mut rng).unwrap();
            assert!(t >= 2);
            total += t;
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - expected).abs() < 0.03, "mean {mean} vs {expected}");
    }

    #[test]
    fn constant_targets_give_root_only() {
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        let t = array![3.5, 3.5, 3.5, 3.5];
        let tree = fit_tree(x.view(), t.view(), 4, 1);
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.nodes[0].value, 3.5);
    }

    #[test]
    fn step_target_splits_at_zero() {
        let x = array![[-1.0], [1.0], [-1.0], [1.0], [1.0], [-1.0]];
        let t = x.column(0).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let tree = fit_tree(x.view(), t.view(), 2, 1);
        assert_eq!(tree.n_leaves(), 2);
        match tree.nodes[0].kind {
            NodeKind::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.0);
                assert_eq!(tree.nodes[left].value, 0.0);
                assert_eq!(tree.nodes[right].value, 1.0);
            }
            NodeKind::Leaf => panic!("expected a split"),
        }
    }

    #[test]
    fn min_leaf_blocks_small_nodes() {
        let x = array![[0.0], [1.0], [2.0], [3.0], [4.0]];
        let t = array![0.0, 0.0, 0.0, 0.0, 9.0];
        let tree = fit_tree(x.view(), t.view(), 4, 3);
        assert_eq!(tree.nodes.len(), 1);
        let tree = fit_tree(x.view(), t.view(), 4, 2);
        assert_eq!(tree.n_leaves(), 2);
    }

    #[test]
    fn treatment_column_splits_at_half() {
        let x = array![[0.0], [1.0], [0.0], [1.0]];
        let t = array![0.0, 2.0, 0.0, 2.0];
        let tree = fit_tree(x.view(), t.view(), 2, 1);
        assert!(matches!(tree.nodes[0].kind, NodeKind::Split { threshold, .. } if threshold == 0.5));
    }

    fn toy_dataset(n: usize, seed: u64) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let z = Array1::from_shape_fn(n, |_| u8::from(rng.random_bool(0.5)));
        let y = Array1::from_shape_fn(n, |i| {
            x[[i, 0]] * x[[i, 1]] + if z[i] == 1 && x[[i, 2]] > 0.0 { 1.5 } else { 0.0 }
                + rng.random_range(-0.3..0.3)
        });
        TrialDataset::new(y, x, z, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    fn params(n_trees: usize, subsample: f64, seed: u64) -> BoostingParams {
        BoostingParams {
            n_trees,
            mean_depth: 4.0,
            shrinkage: 0.1,
            subsample,
            min_leaf: 1,
            seed,
        }
    }

    #[test]
    fn zero_trees_predict_the_mean() {
        let ds = toy_dataset(30, 1);
        let gbt = fit_gbt(&ds, &params(0, 0.5, 0)).unwrap();
        let feats = ds.features_with_treatment();
        let mean = ds.y().sum() / 30.0;
        for row in feats.axis_iter(Axis(0)) {
            assert_eq!(gbt.predict_row(row), mean);
        }
    }

    #[test]
    fn full_sample_training_error_never_increases() {
        let ds = toy_dataset(80, 2);
        let gbt = fit_gbt(&ds, &params(40, 1.0, 5)).unwrap();
        let feats = ds.features_with_treatment();
        let mut fitted = Array1::from_elem(ds.n(), gbt.base_prediction);
        let mut last = f64::INFINITY;
        for tree in &gbt.trees {
            for (i, row) in feats.axis_iter(Axis(0)).enumerate() {
                fitted[i] += gbt.params.shrinkage * tree.predict_row(row);
            }
            let mse = (&ds.y() - &fitted).mapv(|r| r * r).mean().unwrap();
            assert!(mse <= last + 1e-12);
            last = mse;
        }
        // additive prediction identity
        for (i, row) in feats.axis_iter(Axis(0)).enumerate() {
            assert!((gbt.predict_row(row) - fitted[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn trees_are_full_binary_and_seeded() {
        let ds = toy_dataset(60, 3);
        let a = fit_gbt(&ds, &params(25, 0.5, 11)).unwrap();
        let b = fit_gbt(&ds, &params(25, 0.5, 11)).unwrap();
        assert_eq!(a, b);
        for (tree, &t_m) in a.trees.iter().zip(&a.requested_leaves) {
            assert_eq!(tree.n_internal() + 1, tree.n_leaves());
            assert!(tree.n_leaves() <= t_m);
        }
    }

    #[test]
    fn subsample_too_small_is_rejected() {
        let ds = toy_dataset(20, 4);
        let mut p = params(5, 0.3, 0);
        p.min_leaf = 7;
        assert!(matches!(fit_gbt(&ds, &p), Err(Error::Parameter { name: "subsample", .. })));
        p.shrinkage = 0.0;
        assert!(fit_gbt(&ds, &p).is_err());
    }
}
