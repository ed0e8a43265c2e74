#[path = "common/oracles.rs"]
mod oracles;

use mlselect_core::bip::{enumerate_optima_oracle, solve_bip};
use mlselect_core::cover::{
    max_threshold_for_size, min_set_for_threshold, perceptual_risk, AffinityMatrix, CoverStatus,
};
use mlselect_core::transfer::{
    check_structure, min_delta_schedule, solve_transfer, ObjectiveMode, TransferStatus,
};
use proptest::prelude::*;

#[test]
fn random_programs_match_enumeration() {
    let mut rng = oracles::rng(11);
    for _ in 0..200 {
        let p = oracles::random_program(&mut rng, 14);
        let fast = solve_bip(&p).unwrap();
        let slow = enumerate_optima_oracle(&p).unwrap();
        assert_eq!(fast.status, slow.status, "{}", p.to_json());
        assert_eq!(fast.objective_value, slow.objective_value, "{}", p.to_json());
    }
}

#[test]
fn cover_matches_subset_search() {
    let mut rng = oracles::rng(5);
    for _ in 0..40 {
        let m = 1 + (rand::Rng::random_range(&mut rng, 0..8usize));
        let a = oracles::random_affinity(&mut rng, m);
        let distinct = a.distinct_entries();
        let mut previous = f64::MIN;
        for k in 1..=m {
            let s = max_threshold_for_size(&a, k).unwrap();
            let (delta, size) = oracles::brute_force_max_threshold(&a, k);
            assert_eq!(s.threshold_delta, delta);
            assert_eq!(s.selected.len(), size, "k={k}");
            assert!(s.threshold_delta >= previous);
            previous = s.threshold_delta;
            let bound = ((m * m) as f64).log2().ceil() as usize + 1;
            assert!(s.solver_calls <= bound);
            assert!(s.probed_deltas.iter().all(|d| distinct.contains(d)));
        }
        for &delta in &distinct {
            let s = min_set_for_threshold(&a, delta).unwrap();
            match oracles::brute_force_min_set(&a, delta) {
                Some(size) => assert_eq!(s.selected.len(), size),
                None => assert_eq!(s.status, CoverStatus::Infeasible),
            }
        }
    }
}

#[test]
fn min_set_size_shrinks_as_threshold_drops() {
    let mut rng = oracles::rng(8);
    for _ in 0..20 {
        let a = oracles::random_affinity(&mut rng, 6);
        let mut sizes = Vec::new();
        for delta in a.distinct_entries().into_iter().rev() {
            sizes.push(min_set_for_threshold(&a, delta).unwrap().selected.len());
        }
        assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "{sizes:?}");
    }
}

#[test]
fn transfer_matches_subgraph_enumeration() {
    let mut rng = oracles::rng(21);
    let mut feasible = 0;
    for _ in 0..300 {
        let p = oracles::random_transfer_problem(&mut rng);
        let s = solve_transfer(&p).unwrap();
        match oracles::enumerate_transfer_optimum(&p, None) {
            Some(best) => {
                feasible += 1;
                assert_eq!(s.status, TransferStatus::Optimal, "{}", p.to_json());
                assert_eq!(s.objective_value, best, "{}", p.to_json());
                check_structure(&p, &s.chosen_edges, &s.active_features).unwrap();
            }
            None => assert_eq!(s.status, TransferStatus::Infeasible, "{}", p.to_json()),
        }
    }
    assert!(feasible > 50, "only {feasible} feasible instances");
}

#[test]
fn schedule_picks_largest_feasible_threshold() {
    let mut rng = oracles::rng(99);
    for _ in 0..100 {
        let mut p = oracles::random_transfer_problem(&mut rng);
        p.objective_mode = ObjectiveMode::MaxPerformance;
        let budget = 1 + rand::Rng::random_range(&mut rng, 0..3usize);
        let s = min_delta_schedule(&p, budget).unwrap();
        let mut candidates: Vec<f64> = p
            .edges
            .iter()
            .filter(|e| p.targets.contains(&e.target))
            .map(|e| e.performance)
            .collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let expected = candidates.iter().rev().copied().find(|&d| {
            let mut at = p.clone();
            at.delta = d;
            oracles::enumerate_transfer_optimum(&at, Some(budget)).is_some()
        });
        match expected {
            Some(d) => {
                assert_eq!(s.delta, d);
                assert!(s.active_features.len() <= budget);
            }
            None => assert_eq!(s.status, TransferStatus::Infeasible),
        }
    }
}

fn matrix_strategy() -> impl Strategy<Value = AffinityMatrix> {
    (1usize..=6).prop_flat_map(|m| {
        proptest::collection::vec(proptest::collection::vec(0u32..=10, m), m).prop_map(|rows| {
            let values = rows
                .into_iter()
                .map(|r| r.into_iter().map(|v| f64::from(v) / 10.0).collect())
                .collect();
            AffinityMatrix::from_values(values).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn risk_of_union_dominates_parts(
        a in matrix_strategy(),
        xs in proptest::collection::vec(0usize..6, 1..4),
        ys in proptest::collection::vec(0usize..6, 1..4),
    ) {
        let m = a.len();
        let x: Vec<usize> = xs.into_iter().map(|i| i % m).collect();
        let y: Vec<usize> = ys.into_iter().map(|i| i % m).collect();
        let union: Vec<usize> = x.iter().chain(&y).copied().collect();
        let rx = perceptual_risk(&a, &x).unwrap();
        let ry = perceptual_risk(&a, &y).unwrap();
        prop_assert!(perceptual_risk(&a, &union).unwrap() >= rx.max(ry));
    }

    #[test]
    fn budget_threshold_is_monotone(a in matrix_strategy()) {
        let deltas: Vec<f64> = (1..=a.len())
            .map(|k| max_threshold_for_size(&a, k).unwrap().threshold_delta)
            .collect();
        prop_assert!(deltas.windows(2).all(|w| w[0] <= w[1]));
    }
}
