mod common;

use common::*;
use lrqk::cache::{select_active, CacheStats, TieredKVCache};
use lrqk::prefill::PrefillConfig;
use lrqk::session::{Session, SessionConfig};
use lrqk::workload::{gen_recency_biased, SyntheticSpec};
use lrqk::Matrix;
use proptest::prelude::*;

fn row(x: f64, d: usize) -> Matrix {
    Matrix::row_vector(vec![x; d]).unwrap()
}

#[test]
fn session_history_and_fast_tier_bounds() {
    let w = gen_recency_biased(&SyntheticSpec {
        l: 200,
        d: 16,
        r_true: 4,
        recency_strength: 1.0,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (inp, v, steps) = w.split(100).unwrap();
    let cfg = SessionConfig {
        prefill: PrefillConfig {
            rank: 4,
            ..PrefillConfig::default()
        },
        k_budget: 10,
        lite_budget: 5,
        track_quality: false,
        ..SessionConfig::default()
    };
    let mut s = Session::prefill(&inp, &v, cfg).unwrap();
    for (i, step) in steps.iter().enumerate() {
        let out = s.decode_step_detailed(step).unwrap();
        assert_eq!(s.cache().len(), 101 + i);
        assert_eq!(s.cache().proxies().len(), 101 + i);
        assert_eq!(s.cache().resident_len(), 15);
        assert_eq!(s.cache().resident_indices(), out.selection.omega);
        // stored rows are the originals, bit for bit
        assert_eq!(
            s.cache().slow_keys().row(100 + i).unwrap(),
            step.k.as_slice()
        );
        assert_eq!(
            s.cache().slow_values().row(100 + i).unwrap(),
            step.v.as_slice()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Random selections replayed against an independent set model.
    #[test]
    fn transfers_match_set_replay(
        prompt in 1usize..20,
        lite in 1usize..6,
        k_budget in 1usize..8,
        seeds in proptest::collection::vec(any::<u64>(), 1..40),
    ) {
        let d = 2;
        let mut cache = TieredKVCache::new(d, 1, k_budget, lite).unwrap();
        let k = Matrix::new(prompt, d, (0..prompt * d).map(|x| x as f64).collect()).unwrap();
        cache.seed_prompt(&k, &k, &Matrix::zeros(prompt, 1)).unwrap();
        let initial = cache.resident_indices();
        let mut stats = CacheStats::default();
        let mut log = Vec::new();
        for seed in seeds {
            let t = cache.append_token(&row(1.0, d), &row(2.0, d), &row(0.0, 1)).unwrap();
            let mut g = rng(seed);
            let scores: Vec<f64> = (0..=t).map(|_| rand::Rng::gen_range(&mut g, 0.0..1.0)).collect();
            let sel = select_active(&scores, t, k_budget, lite).unwrap();
            let (kk, vv) = cache.fetch_and_merge(&sel, &mut stats).unwrap();
            prop_assert_eq!(kk.rows(), sel.omega.len());
            prop_assert_eq!(vv.rows(), sel.omega.len());
            log.push((t, sel.omega.clone()));
        }
        let replay = replay_misses(&initial, &log);
        let got: Vec<usize> = stats.per_step.iter().map(|s| s.miss).collect();
        prop_assert_eq!(&got, &replay);
        prop_assert_eq!(stats.c_miss, replay.iter().sum::<usize>() as u64);
        prop_assert_eq!(stats.c_total, log.iter().map(|(_, o)| o.len() as u64).sum::<u64>());
        prop_assert!(stats.c_miss <= stats.c_total);
    }
}
