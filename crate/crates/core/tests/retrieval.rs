mod common;

use common::{gaussian_vec, random_store, rng, store_of};
use frameloop::retrieval::{
    cosine_sim, expand, expand_top_m, mmr_brute_force, mmr_brute_force_positions,
    mmr_greedy_positions, mmr_objective, mmr_objective_positions, policy_distribution,
    sample_without_replacement, shrink_mmr_greedy, RetrievalConfig, WorkingSet,
};
use frameloop::vecmath::softmax;
use frameloop::SearchState;
use proptest::prelude::*;
use rand::Rng;

fn query(v: &[f64]) -> SearchState {
    SearchState::new("q", v).unwrap()
}

/// Three frames with query similarities 0.9, 0.8, 0.1; frames 0 and 1 have
/// mutual similarity 0.95, all other pairs 0. The query is e1.
fn three_frame_instance() -> (Vec<f64>, impl Fn(usize, usize) -> f64) {
    let rel = vec![0.9, 0.8, 0.1];
    let pair = |a: usize, b: usize| {
        if (a.min(b), a.max(b)) == (0, 1) {
            0.95
        } else {
            0.0
        }
    };
    (rel, pair)
}

#[test]
fn cosine_examples() {
    let st = store_of(&[vec![1.0, 0.0], vec![3.0, 4.0]]);
    assert_eq!(cosine_sim(&st, 0, &query(&[1.0, 0.0])).unwrap(), 1.0);
    assert_eq!(cosine_sim(&st, 0, &query(&[0.0, 1.0])).unwrap(), 0.0);
    assert!((cosine_sim(&st, 1, &query(&[4.0, 3.0])).unwrap() - 0.96).abs() < 1e-6);
    assert!(cosine_sim(&st, 2, &query(&[1.0, 0.0])).is_err());
}

#[test]
fn policy_examples() {
    let p = softmax(&[1.0, 0.0], 1.0);
    assert!((p[0] - 0.73106).abs() < 1e-4 && (p[1] - 0.26894).abs() < 1e-4);
    let st = store_of(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
    let q = query(&[1.0, 1.0]);
    let sym = policy_distribution(&st, &[0, 1], &q, 1.0).unwrap();
    assert!((sym[0] - 0.5).abs() < 1e-12);
    let cold = policy_distribution(&st, &[0, 1, 2], &q, 1e-6).unwrap();
    assert!(cold[2] >= 1.0 - 1e-6);
    assert!(policy_distribution(&st, &[], &q, 1.0).is_err());
}

#[test]
fn expand_worked_examples() {
    // similarities to e1: 0.9, 0.2, 0.8, 0.5
    let rows: Vec<Vec<f64>> = [0.9f64, 0.2, 0.8, 0.5]
        .iter()
        .map(|&c| vec![c, (1.0 - c * c).sqrt()])
        .collect();
    let st = store_of(&rows);
    let q = query(&[1.0, 0.0]);
    let w = WorkingSet::new(&st, vec![0]).unwrap();
    assert_eq!(expand_top_m(&st, &w, &q, 3).unwrap().indices(), &[0, 2, 3]);
    assert_eq!(expand_top_m(&st, &w, &q, 1).unwrap().indices(), &[0]);
    assert!(expand_top_m(&st, &w, &q, 5).is_err());

    let tie = store_of(&[vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()], vec![0.5, 0.75f64.sqrt()]]);
    let w = WorkingSet::new(&tie, vec![0]).unwrap();
    assert_eq!(expand_top_m(&tie, &w, &q, 2).unwrap().indices(), &[0, 1]);
}

#[test]
fn mmr_three_frame_instance() {
    let (rel, pair) = three_frame_instance();
    assert!((mmr_objective_positions(&rel, &pair, &[0, 1], 0.5) + 0.1).abs() < 1e-12);
    assert!((mmr_objective_positions(&rel, &pair, &[0, 2], 0.5) - 0.5).abs() < 1e-12);
    assert!((mmr_objective_positions(&rel, &pair, &[1, 2], 0.5) - 0.45).abs() < 1e-12);
    assert!((mmr_objective_positions(&rel, &pair, &[0], 0.5) - 0.45).abs() < 1e-12);
    let mut greedy = mmr_greedy_positions(&rel, &pair, 2, 0.5);
    greedy.sort_unstable();
    assert_eq!(greedy, vec![0, 2]);
    let (best, obj) = mmr_brute_force_positions(&rel, &pair, 2, 0.5).unwrap();
    assert_eq!(best, vec![0, 2]);
    assert!((obj - 0.5).abs() < 1e-12);
    assert_eq!(mmr_greedy_positions(&rel, &pair, 1, 0.5), vec![0]);
}

#[test]
fn brute_force_edge_cases() {
    let rel = vec![0.0; 5];
    let (best, _) = mmr_brute_force_positions(&rel, |_, _| 0.0, 3, 0.5).unwrap();
    assert_eq!(best, vec![0, 1, 2]);
    let (all, _) = mmr_brute_force_positions(&[0.3, 0.1], |_, _| 0.2, 2, 0.5).unwrap();
    assert_eq!(all, vec![0, 1]);
    // C(40, 20) is far over the enumeration budget
    assert!(mmr_brute_force_positions(&[0.1; 40], |_, _| 0.0, 20, 0.5).is_err());
}

fn straight_line_objective(store: &frameloop::EmbeddingStore, q: &SearchState, set: &[usize], lambda: f64) -> f64 {
    let mut total = 0.0;
    for &i in set {
        let rel: f64 = (0..store.dim()).map(|k| store.row(i)[k] * q.embedding()[k]).sum();
        let mut red = f64::NEG_INFINITY;
        for &j in set {
            if j != i {
                let s: f64 = (0..store.dim()).map(|k| store.row(i)[k] * store.row(j)[k]).sum();
                red = red.max(s);
            }
        }
        if red == f64::NEG_INFINITY {
            red = 0.0;
        }
        total += lambda * rel - (1.0 - lambda) * red;
    }
    total
}

#[test]
fn greedy_never_beats_oracle_on_random_instances() {
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..=10);
        let k = r.random_range(1..=4.min(n));
        let d = r.random_range(2..=8);
        let store = random_store(n, d, seed + 500);
        let q = query(&gaussian_vec(&mut r, d));
        let lambda = [0.5, r.random_range(0.0..=1.0)][seed as usize % 2];
        let full = WorkingSet::full(&store);
        let greedy = shrink_mmr_greedy(&store, &full, &q, k, lambda).unwrap();
        let pool: Vec<usize> = (0..n).collect();
        let (best, best_obj) = mmr_brute_force(&store, &pool, &q, k, lambda).unwrap();
        let g_obj = mmr_objective(&store, greedy.indices(), &q, lambda).unwrap();
        assert!(g_obj <= best_obj + 1e-12, "seed {seed}: greedy {g_obj} > oracle {best_obj}");
        let independent = straight_line_objective(&store, &q, &best, lambda);
        assert!((independent - best_obj).abs() < 1e-12, "seed {seed}");
    }
}

#[test]
fn shrink_contract() {
    let store = random_store(9, 4, 2);
    let q = query(&[1.0, 0.5, -0.2, 0.1]);
    let w = WorkingSet::new(&store, vec![1, 3, 4, 6, 8]).unwrap();
    assert_eq!(shrink_mmr_greedy(&store, &w, &q, 5, 0.5).unwrap().indices(), w.indices());
    assert!(shrink_mmr_greedy(&store, &w, &q, 0, 0.5).is_err());
    assert!(shrink_mmr_greedy(&store, &w, &q, 6, 0.5).is_err());
    assert!(shrink_mmr_greedy(&store, &w, &q, 2, 1.5).is_err());
}

#[test]
fn cold_sampling_recovers_top_m() {
    for seed in 0..100u64 {
        let store = random_store(12, 6, seed);
        let q = query(&gaussian_vec(&mut rng(seed + 3), 6));
        let w = WorkingSet::new(&store, vec![seed as usize % 12]).unwrap();
        let top = expand_top_m(&store, &w, &q, 5).unwrap();
        let cfg = RetrievalConfig {
            stochastic: true,
            softmax_temperature: 1e-6,
            ..Default::default()
        };
        let sampled = expand(&store, &w, &q, 5, &cfg, &mut rng(seed)).unwrap();
        assert_eq!(sampled.indices(), top.indices(), "seed {seed}");
    }
}

#[test]
fn stochastic_expansion_is_seed_reproducible() {
    let store = random_store(20, 5, 4);
    let q = query(&[0.1, 0.2, 0.3, 0.4, 0.5]);
    let cfg = RetrievalConfig {
        stochastic: true,
        ..Default::default()
    };
    let w = WorkingSet::empty();
    let a = expand(&store, &w, &q, 8, &cfg, &mut rng(9)).unwrap();
    let b = expand(&store, &w, &q, 8, &cfg, &mut rng(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
}

#[test]
fn config_validation() {
    let ok = RetrievalConfig::default();
    assert!(ok.validate(3).is_ok());
    assert!(ok.validate(2).is_err());
    let bad_temp = RetrievalConfig {
        softmax_temperature: 0.0,
        ..Default::default()
    };
    assert!(bad_temp.validate(3).is_err());
    let non_monotone = RetrievalConfig {
        static_schedule: vec![4, 4, 16],
        ..Default::default()
    };
    assert!(non_monotone.validate(3).is_err());
    let rising = RetrievalConfig {
        dynamic_schedule: vec![16, 32, 64],
        ..Default::default()
    };
    assert!(rising.validate(3).is_err());
}

fn instance() -> impl Strategy<Value = (u64, usize, usize, Vec<f64>)> {
    (any::<u64>(), 1usize..16, 1usize..6).prop_flat_map(|(seed, n, d)| {
        (
            Just(seed),
            Just(n),
            Just(d),
            prop::collection::vec(-1.0f64..1.0, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn policy_sums_to_one_and_is_shift_invariant(logits in prop::collection::vec(-5.0f64..5.0, 1..20), c in -10.0f64..10.0, t in 0.05f64..5.0) {
        let p = softmax(&logits, t);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let q = softmax(&shifted, t);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_is_monotone_in_similarity((seed, n, d, qv) in instance()) {
        prop_assume!(qv.iter().any(|x| x.abs() > 1e-3));
        let store = random_store(n, d, seed);
        let q = query(&qv);
        let pool: Vec<usize> = (0..n).collect();
        let p = policy_distribution(&store, &pool, &q, 0.7).unwrap();
        for a in 0..n {
            for b in 0..n {
                let (sa, sb) = (cosine_sim(&store, a, &q).unwrap(), cosine_sim(&store, b, &q).unwrap());
                if sa > sb {
                    prop_assert!(p[a] >= p[b]);
                }
            }
        }
    }

    #[test]
    fn expand_only_adds((seed, n, d, qv) in instance(), start in 0usize..16, grow in 0usize..16) {
        prop_assume!(qv.iter().any(|x| x.abs() > 1e-3));
        let store = random_store(n, d, seed);
        let q = query(&qv);
        let initial: Vec<usize> = (0..n).filter(|i| (i + start) % 3 == 0).collect();
        let w = WorkingSet::new(&store, initial).unwrap();
        let target = (w.len() + grow).min(n);
        let out = expand_top_m(&store, &w, &q, target).unwrap();
        prop_assert_eq!(out.len(), target);
        prop_assert!(w.indices().iter().all(|&i| out.contains(i)));
        prop_assert!(out.indices().windows(2).all(|p| p[0] < p[1]));
        let ts = store.timestamps();
        prop_assert!(out.indices().windows(2).all(|p| ts[p[0]] < ts[p[1]]));
    }

    #[test]
    fn shrink_only_removes((seed, n, d, qv) in instance(), k in 1usize..16, lambda in 0.0f64..=1.0) {
        prop_assume!(qv.iter().any(|x| x.abs() > 1e-3));
        let store = random_store(n, d, seed);
        let q = query(&qv);
        let w = WorkingSet::full(&store);
        let k = k.min(n);
        let out = shrink_mmr_greedy(&store, &w, &q, k, lambda).unwrap();
        prop_assert_eq!(out.len(), k);
        prop_assert!(out.indices().iter().all(|&i| w.contains(i)));
        prop_assert!(out.indices().windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn sampling_draws_distinct_positions(logits in prop::collection::vec(-3.0f64..3.0, 1..20), k in 0usize..25, seed in any::<u64>()) {
        let drawn = sample_without_replacement(&logits, k, 1.0, &mut rng(seed));
        prop_assert_eq!(drawn.len(), k.min(logits.len()));
        let mut sorted = drawn.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), drawn.len());
    }
}
