use hmem_core::compressor::hierarchy_depth;
use hmem_core::data::{gen_icl_dataset, VocabSpec, EXAMPLES_PER_SAMPLE, RELEVANT_PER_SAMPLE};
use hmem_core::eval::random_match_probability;
use hmem_core::memstore::{child_range, chunk_context};
use hmem_core::retriever::top_c_indices;
use hmem_core::trainer::count_forwards;
use proptest::prelude::*;

/// Counts `c`-subsets of `0..n` that contain `0..r` by enumerating bitmasks.
fn enumerated_match_probability(n: usize, r: usize, c: usize) -> f64 {
    let subsets = (0u32..1 << n).filter(|m| m.count_ones() as usize == c);
    let (hits, total) = subsets.fold((0, 0), |(h, t), m| {
        let all = (0..r).all(|i| m & (1 << i) != 0);
        (h + all as usize, t + 1)
    });
    hits as f64 / total as f64
}

proptest! {
    #[test]
    fn depth_is_the_smallest_covering_power(n in 2usize..100_000, k in 2usize..9) {
        let l = hierarchy_depth(n, k) as u32;
        prop_assert!(k.pow(l) >= n);
        prop_assert!(k.pow(l - 1) < n);
        prop_assert_eq!(count_forwards(n, k), 2 * l as usize + 2);
    }

    #[test]
    fn top_c_keeps_the_largest_in_index_order(
        att in prop::collection::vec(0.0f64..1.0, 1..20),
        c in 1usize..25,
    ) {
        let sel = top_c_indices(&att, c);
        prop_assert_eq!(sel.len(), c.min(att.len()));
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        let floor = sel.iter().map(|&i| att[i]).fold(f64::INFINITY, f64::min);
        for (i, &a) in att.iter().enumerate() {
            if !sel.contains(&i) {
                prop_assert!(a <= floor);
            }
        }
    }

    #[test]
    fn chunking_round_trips(tokens in prop::collection::vec(0u32..50, 0..200), len in 1usize..40) {
        let chunks = chunk_context(&tokens, len).unwrap();
        prop_assert_eq!(chunks.concat(), tokens);
        if let Some((last, rest)) = chunks.split_last() {
            prop_assert!(rest.iter().all(|c| c.len() == len));
            prop_assert!(!last.is_empty() && last.len() <= len);
        }
    }

    #[test]
    fn child_ranges_partition_the_lower_level(lower in 1usize..200, k in 2usize..9) {
        let parents = lower.div_ceil(k);
        let mut next = 0;
        for i in 0..parents {
            let r = child_range(k, i, lower);
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty() && r.len() <= k);
            next = r.end;
        }
        prop_assert_eq!(next, lower);
    }

    #[test]
    fn match_probability_agrees_with_enumeration(n in 1usize..11, r in 0usize..4, c in 0usize..11) {
        prop_assume!(r <= n && c <= n);
        let closed = random_match_probability(n, r, c);
        prop_assert!((closed - enumerated_match_probability(n, r, c)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_samples_have_the_benchmark_shape(seed in any::<u64>(), keys in 2usize..6, values in 2usize..6) {
        let spec = VocabSpec { n_families: 3, tasks_per_family: 3, n_keys: keys, n_values: values };
        let ds = gen_icl_dataset(seed, 20, 10, &spec).unwrap();
        let heldout = spec.heldout_family();
        for (s, is_test) in ds.train.iter().map(|s| (s, false)).chain(ds.test.iter().map(|s| (s, true))) {
            prop_assert_eq!(s.examples.len(), EXAMPLES_PER_SAMPLE);
            prop_assert_eq!(s.relevant_indices().len(), RELEVANT_PER_SAMPLE);
            prop_assert_eq!(spec.family_of(s.target_task) == Some(heldout), is_test);
            for e in &s.examples {
                prop_assert_eq!(e.relevant, e.task_id == s.target_task);
                if !is_test {
                    prop_assert_ne!(spec.family_of(e.task_id), Some(heldout));
                }
            }
            let answers: Vec<_> = s
                .examples
                .iter()
                .filter(|e| e.relevant && e.question == s.target_question)
                .map(|e| &e.answer)
                .collect();
            prop_assert_eq!(answers, vec![&s.target_answer]);
            prop_assert!(s.target_answer.iter().all(|t| spec.value_tokens().contains(t)));
        }
    }
}
