use masters::schedule::{shard_questions, stage_count, StageSchedule};
use proptest::prelude::*;

/// Stage index by the closed form, in exact integer arithmetic.
fn closed_form_stage(i: usize, stages: usize, iterations: usize) -> usize {
    ((i - 1) * stages / iterations).min(stages - 1)
}

proptest! {
    #[test]
    fn schedule_matches_closed_form(k in 0usize..9, iterations in 1usize..1500) {
        let decrement = 0.05;
        let r_max = k as f64 * decrement;
        let m = stage_count(r_max, decrement).unwrap();
        prop_assert_eq!(m, k + 1);
        prop_assume!(iterations >= m);
        let s = StageSchedule::new(r_max, decrement, iterations).unwrap();
        let mut previous = f64::INFINITY;
        for i in 1..=iterations {
            let stage = s.stage_of(i).unwrap();
            prop_assert_eq!(stage, closed_form_stage(i, m, iterations));
            let ratio = s.ratio_at(i).unwrap();
            prop_assert!(ratio <= previous);
            prop_assert!((ratio - (r_max - stage as f64 * decrement)).abs() < 1e-12);
            previous = ratio;
        }
        prop_assert!((s.ratio_at(1).unwrap() - r_max).abs() < 1e-12);
        prop_assert_eq!(s.ratio_at(iterations).unwrap(), 0.0);
        let lens: Vec<usize> = s.stages.iter().map(|st| st.len()).collect();
        prop_assert_eq!(lens.iter().sum::<usize>(), iterations);
        prop_assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
    }

    #[test]
    fn shards_are_a_partition(n in 0usize..200, shards in 1usize..10, seed in any::<u64>()) {
        let ids: Vec<u64> = (0..n as u64).collect();
        let parts = shard_questions(&ids, shards, seed, "p");
        prop_assert_eq!(parts.len(), shards);
        let mut all: Vec<u64> = parts.iter().flatten().copied().collect();
        all.sort();
        prop_assert_eq!(all, ids);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn out_of_range_iterations_are_errors() {
    let s = StageSchedule::new(0.2, 0.05, 10).unwrap();
    assert!(s.stage_of(0).is_err());
    assert!(s.stage_of(11).is_err());
    assert!(StageSchedule::new(0.2, 0.05, 4).is_err());
}
