mod common;

use common::*;

#[test]
fn random_graphs_match_finite_differences() {
    let mut all = Vec::new();
    for i in 0..24 {
        let g = random_graph(i);
        let errs = graph_rel_errors(&g);
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 1e-3, "graph {i} ({}) worst rel err {worst:e}", g.name);
        all.extend(errs);
    }
    assert!(percentile(&all, 0.99) <= 1e-4, "p99 {:e}", percentile(&all, 0.99));
}

#[test]
fn whole_objective_matches_finite_differences() {
    for seed in [3, 4] {
        let errs = total_loss_rel_errors(&tiny_problem(seed));
        assert!(errs.len() > 100);
        let p99 = percentile(&errs, 0.99);
        assert!(p99 <= 1e-4, "seed {seed}: p99 {p99:e}");
    }
}
