//! Experiment runner: ledger layout, reproducibility and external estimates.

use rulefit_hte::hte::EstimatorConfig;
use rulefit_hte::simharness::{
    read_estimates, replicate_seed, replicate_stem, run_experiment, write_ledger, ExperimentGrid, ExperimentOptions,
    ExternalMethod, GridCell, LEDGER_HEADER, METHOD_LABEL,
};

fn tiny_config() -> EstimatorConfig {
    EstimatorConfig {
        folds: 3,
        lambda_count: 20,
        lambda_ratio: 1e-2,
        ..EstimatorConfig::new(10, 2.0)
    }
}

fn tiny_grid() -> ExperimentGrid {
    ExperimentGrid {
        cells: vec![
            GridCell {
                scenario: 2,
                n: 120,
                p: 8,
            },
            GridCell {
                scenario: 4,
                n: 100,
                p: 9,
            },
        ],
        replicates: 2,
        seed: 31,
    }
}

fn ledger_bytes(results: &[rulefit_hte::simharness::SimResult]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ledger(&mut buf, results, true).unwrap();
    buf
}

#[test]
fn ledger_is_ordered_and_reproducible() {
    let grid = tiny_grid();
    let a = run_experiment(&grid, &tiny_config(), &ExperimentOptions::default()).unwrap();
    let b = run_experiment(&grid, &tiny_config(), &ExperimentOptions::default()).unwrap();
    assert_eq!(ledger_bytes(&a), ledger_bytes(&b));
    assert_eq!(a.len(), 4);
    for (k, r) in a.iter().enumerate() {
        let (c, rep) = (k / 2, k % 2);
        assert_eq!(r.scenario, grid.cells[c].scenario);
        assert_eq!(r.seed, replicate_seed(grid.seed, c, rep));
        assert_eq!(r.method, METHOD_LABEL);
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.seconds.is_none());
    }
    let text = String::from_utf8(ledger_bytes(&a)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), LEDGER_HEADER.join(","));
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!(fields[8], "NA");
    }
    // the null scenario has a zero effect everywhere, so relative bias is undefined
    assert!(a[2].metrics.unwrap().rbias.is_none());
}

#[test]
fn different_grid_seeds_draw_different_data() {
    let grid = tiny_grid();
    let other = ExperimentGrid { seed: 32, ..tiny_grid() };
    let a = run_experiment(&grid, &tiny_config(), &ExperimentOptions::default()).unwrap();
    let b = run_experiment(&other, &tiny_config(), &ExperimentOptions::default()).unwrap();
    assert_ne!(a[0].seed, b[0].seed);
    assert_ne!(ledger_bytes(&a), ledger_bytes(&b));
}

#[test]
fn external_estimates_are_scored_against_the_same_truth() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples");
    let oracle = dir.path().join("oracle");
    std::fs::create_dir_all(&oracle).unwrap();
    let grid = ExperimentGrid {
        cells: vec![tiny_grid().cells[0]],
        replicates: 2,
        seed: 5,
    };
    let export = ExperimentOptions {
        export_dir: Some(samples.clone()),
        ..ExperimentOptions::default()
    };
    run_experiment(&grid, &tiny_config(), &export).unwrap();
    // a perfect external method: copy the exported truth as its estimates
    for rep in 0..grid.replicates {
        let stem = replicate_stem(&grid.cells[0], replicate_seed(grid.seed, 0, rep));
        for part in ["train", "test", "tau"] {
            assert!(samples.join(format!("{stem}_{part}.csv")).exists());
        }
        std::fs::copy(samples.join(format!("{stem}_tau.csv")), oracle.join(format!("{stem}.csv"))).unwrap();
        let truth = read_estimates(&samples.join(format!("{stem}_tau.csv"))).unwrap();
        assert_eq!(truth.len(), grid.cells[0].n);
    }
    let opts = ExperimentOptions {
        external: vec![
            ExternalMethod {
                label: "oracle".into(),
                dir: oracle,
            },
            ExternalMethod {
                label: "absent".into(),
                dir: dir.path().join("nowhere"),
            },
        ],
        ..ExperimentOptions::default()
    };
    let results = run_experiment(&grid, &tiny_config(), &opts).unwrap();
    assert_eq!(results.len(), 6);
    for chunk in results.chunks(3) {
        assert_eq!(chunk[0].method, METHOD_LABEL);
        let m = chunk[1].metrics.unwrap();
        assert_eq!(chunk[1].method, "oracle");
        assert!(m.mse.abs() < 1e-24);
        assert!((m.spearman.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(chunk[2].method, "absent");
        assert!(chunk[2].metrics.is_none() && chunk[2].error.is_some());
    }
}

#[test]
fn invalid_scenario_fails_before_any_work() {
    let grid = ExperimentGrid {
        cells: vec![GridCell {
            scenario: 17,
            n: 100,
            p: 8,
        }],
        replicates: 1,
        seed: 0,
    };
    assert!(run_experiment(&grid, &tiny_config(), &ExperimentOptions::default()).is_err());
}
