//! Greedy best-first trees checked against a brute-force search that
//! recomputes every candidate split's squared-error reduction from scratch.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rulefit_hte::boosting::{fit_tree, NodeKind, RegressionTree, TIE_TOLERANCE};

fn sse(targets: &[f64], rows: &[usize]) -> f64 {
    let mean = rows.iter().map(|&i| targets[i]).sum::<f64>() / rows.len() as f64;
    rows.iter().map(|&i| (targets[i] - mean).powi(2)).sum()
}

struct OracleSplit {
    node: usize,
    feature: usize,
    threshold: f64,
}

/// Best split of `rows`: scan features in order and, within a feature, the
/// midpoints between consecutive distinct values in increasing order; a
/// candidate replaces the incumbent only when it is better by more than `eps`.
fn oracle_best(x: &Array2<f64>, y: &[f64], rows: &[usize], min_leaf: usize, eps: f64) -> Option<(usize, f64, f64)> {
    if rows.len() < 2 * min_leaf {
        return None;
    }
    let parent = sse(y, rows);
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.ncols() {
        let mut values: Vec<f64> = rows.iter().map(|&i| x[[i, f]]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let left: Vec<usize> = rows.iter().copied().filter(|&i| x[[i, f]] <= t).collect();
            let right: Vec<usize> = rows.iter().copied().filter(|&i| x[[i, f]] > t).collect();
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let gain = parent - sse(y, &left) - sse(y, &right);
            if gain > best.map_or(0.0, |b| b.2) + eps {
                best = Some((f, t, gain));
            }
        }
    }
    best
}

/// Splits in the order they are made, with node ids numbered as the tree
/// numbers them (children appended in pairs).
fn oracle_tree(x: &Array2<f64>, y: &[f64], max_leaves: usize, min_leaf: usize) -> Vec<OracleSplit> {
    let eps = TIE_TOLERANCE * y.iter().map(|v| v * v).sum::<f64>();
    let mut next_id = 1;
    let mut open: Vec<(usize, Vec<usize>)> = vec![(0, (0..y.len()).collect())];
    let mut splits = Vec::new();
    while splits.len() + 1 < max_leaves {
        let mut pick: Option<(usize, (usize, f64, f64))> = None;
        for (k, (_, rows)) in open.iter().enumerate() {
            if let Some(c) = oracle_best(x, y, rows, min_leaf, eps) {
                if pick.is_none_or(|(_, p)| c.2 > p.2 + eps) {
                    pick = Some((k, c));
                }
            }
        }
        let Some((k, (f, t, _))) = pick else { break };
        let (node, rows) = open.remove(k);
        splits.push(OracleSplit {
            node,
            feature: f,
            threshold: t,
        });
        let left = rows.iter().copied().filter(|&i| x[[i, f]] <= t).collect();
        let right = rows.iter().copied().filter(|&i| x[[i, f]] > t).collect();
        open.push((next_id, left));
        open.push((next_id + 1, right));
        next_id += 2;
    }
    splits
}

fn tree_splits(tree: &RegressionTree) -> Vec<(usize, usize, f64)> {
    tree.nodes
        .iter()
        .enumerate()
        .filter_map(|(id, node)| match node.kind {
            NodeKind::Split { feature, threshold, .. } => Some((id, feature, threshold)),
            NodeKind::Leaf => None,
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<f64>, usize, usize) {
    let n = rng.random_range(2..=30);
    let p = rng.random_range(1..=4);
    let coarse = rng.random_bool(0.4);
    let x = Array2::from_shape_fn((n, p), |(_, j)| {
        if j == p - 1 && rng.random_bool(0.3) {
            f64::from(u8::from(rng.random_bool(0.5)))
        } else if coarse {
            f64::from(rng.random_range(0..5u8))
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let y = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let max_leaves = rng.random_range(2..=6);
    let min_leaf = rng.random_range(1..=4);
    (x, y, max_leaves, min_leaf)
}

#[test]
fn matches_exhaustive_greedy_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_231_101);
    for case in 0..300 {
        let (x, y, max_leaves, min_leaf) = random_instance(&mut rng);
        let yv = Array1::from(y.clone());
        let tree = fit_tree(x.view(), yv.view(), max_leaves, min_leaf);
        let want = oracle_tree(&x, &y, max_leaves, min_leaf);
        let got = tree_splits(&tree);
        assert_eq!(got.len(), want.len(), "case {case}: split count");
        // the tree numbers nodes in split order, so sort the oracle the same way
        let mut want_sorted: Vec<_> = want.iter().map(|s| (s.node, s.feature, s.threshold)).collect();
        want_sorted.sort_by_key(|s| s.0);
        assert_eq!(got, want_sorted, "case {case}");
        for node in &tree.nodes {
            assert!(node.n_samples >= min_leaf.min(y.len()));
        }
        // leaf values are training means
        for (i, row) in x.outer_iter().enumerate() {
            let leaf = tree.leaf_index(row);
            let members: Vec<usize> = (0..y.len()).filter(|&k| tree.leaf_index(x.row(k)) == leaf).collect();
            let mean = members.iter().map(|&k| y[k]).sum::<f64>() / members.len() as f64;
            assert!((tree.predict_row(row) - mean).abs() < 1e-12, "case {case} row {i}");
        }
    }
}

#[test]
fn split_order_follows_gain() {
    // two clusters on x1, a weaker step on x2 inside each
    let x = ndarray::array![
        [0.0, 0.0],
        [0.0, 1.0],
        [0.0, 0.0],
        [0.0, 1.0],
        [1.0, 0.0],
        [1.0, 1.0],
        [1.0, 0.0],
        [1.0, 1.0]
    ];
    let y = ndarray::array![0.0, 1.0, 0.0, 1.0, 10.0, 11.0, 10.0, 11.0];
    let tree = fit_tree(x.view(), y.view(), 3, 1);
    let splits = tree_splits(&tree);
    assert_eq!(splits[0], (0, 0, 0.5));
    // both second-level splits gain 1.0; the earlier leaf (left child) wins
    assert_eq!(splits[1], (1, 1, 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leaves_never_exceed_request(seed in 0u64..10_000, max_leaves in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, _, min_leaf) = random_instance(&mut rng);
        let tree = fit_tree(x.view(), Array1::from(y).view(), max_leaves, min_leaf);
        prop_assert!(tree.n_leaves() <= max_leaves.max(1));
        prop_assert_eq!(tree.n_leaves(), tree.n_internal() + 1);
    }
}
