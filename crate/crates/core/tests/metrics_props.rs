use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simplex_core::metrics::{compute_metrics, top_k};
use simplex_core::synthetic::random_scores;
use simplex_core::verify::reference_metrics;

struct Case {
    scores: Vec<Vec<f32>>,
    exclude: Vec<Vec<u32>>,
    test: Vec<Vec<u32>>,
}

/// Random split with some empty test rows and coarse scores (ties happen).
fn case(seed: u64, users: usize, items: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = random_scores(&mut rng, users, items);
    for row in &mut scores {
        for s in row.iter_mut() {
            if rng.random_bool(0.3) {
                *s = (*s * 4.0).round() / 4.0;
            }
        }
    }
    let all: Vec<u32> = (0..items as u32).collect();
    let mut exclude = Vec::new();
    let mut test = Vec::new();
    for _ in 0..users {
        let mut pool = all.clone();
        pool.shuffle(&mut rng);
        let n_ex = rng.random_range(0..items / 3);
        let n_te = if rng.random_bool(0.15) { 0 } else { rng.random_range(1..items / 4) };
        let mut e = pool[..n_ex].to_vec();
        let mut t = pool[n_ex..n_ex + n_te].to_vec();
        e.sort_unstable();
        t.sort_unstable();
        exclude.push(e);
        test.push(t);
    }
    Case { scores, exclude, test }
}

fn rankings(c: &Case, k: usize) -> Vec<Vec<u32>> {
    c.scores
        .iter()
        .zip(&c.exclude)
        .map(|(s, e)| top_k(s, e, k))
        .collect()
}

proptest! {
    #[test]
    fn matches_reference(seed in any::<u64>(), users in 1usize..25, items in 8usize..60) {
        let c = case(seed, users, items);
        prop_assume!(c.test.iter().any(|t| !t.is_empty()));
        let ks = [1, 5, 20];
        let r = compute_metrics(&rankings(&c, 20), &c.test, &ks).unwrap();
        let (reference, n) = reference_metrics(&c.scores, &c.exclude, &c.test, &ks);
        prop_assert_eq!(r.num_eval_users, n);
        for (k, want) in ks.iter().zip(&reference) {
            let got = r.by_k[k];
            for (a, b) in [got.recall, got.ndcg, got.precision, got.f1].iter().zip(want) {
                prop_assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn recall_and_ndcg_bounds_and_monotone_recall(seed in any::<u64>()) {
        let c = case(seed, 15, 40);
        prop_assume!(c.test.iter().any(|t| !t.is_empty()));
        let ks: Vec<usize> = (1..=40).collect();
        let r = compute_metrics(&rankings(&c, 40), &c.test, &ks).unwrap();
        let mut prev = 0.0;
        for k in ks {
            let m = r.by_k[&k];
            for v in [m.recall, m.ndcg, m.precision, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(m.recall >= prev);
            prev = m.recall;
        }
    }

    #[test]
    fn precision_times_k_is_hits(seed in any::<u64>(), k in 1usize..30) {
        let c = case(seed, 1, 50);
        prop_assume!(!c.test[0].is_empty());
        let r = compute_metrics(&rankings(&c, k), &c.test, &[k]).unwrap();
        let m = r.by_k[&k];
        let lhs = m.precision * k as f64;
        let rhs = m.recall * c.test[0].len() as f64;
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    /// Relabelling items (and the ranking with them) leaves the metrics alone
    /// when scores are distinct.
    #[test]
    fn item_relabelling_invariance(seed in any::<u64>()) {
        let c = case(seed, 10, 30);
        prop_assume!(c.test.iter().any(|t| !t.is_empty()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let distinct: Vec<Vec<f32>> = (0..10)
            .map(|u| (0..30).map(|i| c.scores[u][i] + i as f32 * 1e-4).collect())
            .collect();
        let mut perm: Vec<u32> = (0..30).collect();
        perm.shuffle(&mut rng);
        let relabel = |rows: &[Vec<u32>]| -> Vec<Vec<u32>> {
            rows.iter()
                .map(|r| {
                    let mut v: Vec<u32> = r.iter().map(|&i| perm[i as usize]).collect();
                    v.sort_unstable();
                    v
                })
                .collect()
        };
        let mut moved = vec![vec![0.0f32; 30]; 10];
        for u in 0..10 {
            for i in 0..30 {
                moved[u][perm[i] as usize] = distinct[u][i];
            }
        }
        let a: Vec<Vec<u32>> = distinct.iter().zip(&c.exclude).map(|(s, e)| top_k(s, e, 10)).collect();
        let ex2 = relabel(&c.exclude);
        let b: Vec<Vec<u32>> = moved.iter().zip(&ex2).map(|(s, e)| top_k(s, e, 10)).collect();
        let ra = compute_metrics(&a, &c.test, &[10]).unwrap();
        let rb = compute_metrics(&b, &relabel(&c.test), &[10]).unwrap();
        prop_assert_eq!(ra, rb);
    }
}

#[test]
fn user_order_does_not_matter() {
    let c = case(42, 20, 50);
    let r = rankings(&c, 20);
    let base = compute_metrics(&r, &c.test, &[20]).unwrap();
    let mut idx: Vec<usize> = (0..20).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let r2: Vec<Vec<u32>> = idx.iter().map(|&u| r[u].clone()).collect();
    let t2: Vec<Vec<u32>> = idx.iter().map(|&u| c.test[u].clone()).collect();
    let shuffled = compute_metrics(&r2, &t2, &[20]).unwrap();
    let (a, b) = (base.by_k[&20], shuffled.by_k[&20]);
    assert!((a.recall - b.recall).abs() < 1e-12);
    assert!((a.ndcg - b.ndcg).abs() < 1e-12);
}

#[test]
fn excluded_items_never_ranked() {
    let c = case(7, 20, 50);
    for (u, r) in rankings(&c, 50).iter().enumerate() {
        assert!(r.iter().all(|i| c.exclude[u].binary_search(i).is_err()));
        assert_eq!(r.len(), 50 - c.exclude[u].len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let row = c.scores.choose(&mut rng).unwrap();
    assert_eq!(top_k(row, &[], 0), Vec::<u32>::new());
}
