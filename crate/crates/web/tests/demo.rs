use osp_web::{budget_steps, timing_sweep_points, training_rows};

#[test]
fn sweep_matches_closed_forms_when_deferred_bytes_fit() {
    let points = timing_sweep_points(8, 25.0, 10.0, 250.0).unwrap();
    assert_eq!(points.len(), 10);
    for p in &points {
        let off = (p.osp_bst - p.expected_osp_bst).abs() / p.expected_osp_bst;
        assert!(off < 0.01, "fraction {}: {} vs {}", p.routine_fraction, p.osp_bst, p.expected_osp_bst);
    }
    // a full routine stage is BSP
    let last = points.last().unwrap();
    assert!((last.throughput_ratio - 1.0).abs() < 1e-9);
    assert!(points[1].throughput_ratio > 1.5);
    assert!(timing_sweep_points(0, 25.0, 10.0, 250.0).is_err());
}

#[test]
fn budget_grows_with_falling_loss() {
    let steps = budget_steps(&[2.0, 1.5, 1.0, 0.8, 0.5], 20_000_000, 25_000_000).unwrap();
    let budgets: Vec<u64> = steps.iter().map(|s| s.budget_bytes).collect();
    assert_eq!(budgets[0], 0);
    assert!(budgets.windows(2).all(|w| w[0] <= w[1]));
    assert!(*budgets.last().unwrap() > 0);
    assert!(budgets.iter().all(|&b| b <= 20_000_000));
}

#[test]
fn training_comparison_covers_every_model() {
    let rows = training_rows(4, 2, 3, 1.0, 0.1);
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert!(r.error.is_none(), "{}: {:?}", r.model, r.error);
        assert!(r.throughput > 0.0);
        assert_eq!(r.curve.len(), 2);
    }
}
