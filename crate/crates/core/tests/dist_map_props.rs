use std::collections::{BTreeMap, BTreeSet};

use mpmr::{hash_key, owner, spawn_local_cluster, Cluster, DistMap, DistMapConfig, NodeId, Sum};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Emissions of node `node`, derived from `seed` so every test can rebuild
/// them independently.
fn emissions(seed: u64, node: usize, count: usize, vocab: u32) -> Vec<(Vec<u8>, i64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (node as u64).wrapping_mul(0x9e37_79b9));
    (0..count)
        .map(|_| {
            let k = rng.random_range(0..vocab);
            (format!("k{k}").into_bytes(), rng.random_range(-5..20))
        })
        .collect()
}

struct NodeOutcome {
    local: Vec<(Vec<u8>, i64)>,
    gathered: Vec<(Vec<u8>, i64)>,
    global_size: u64,
    shuffled_to: Vec<u64>,
}

fn run(
    n: usize,
    threads: usize,
    segments: usize,
    seed: u64,
    count: usize,
    vocab: u32,
) -> Vec<NodeOutcome> {
    let config = DistMapConfig {
        segments,
        segment_capacity: 2,
        threads,
        cache_watermark: None,
    };
    spawn_local_cluster(n, |c| {
        let me = c.self_id().index();
        let mut map = DistMap::<i64, _>::new(c, &config).unwrap();
        let mine = emissions(seed, me, count, vocab);
        let maps = map.maps();
        std::thread::scope(|s| {
            for (t, part) in mine.chunks(mine.len().div_ceil(threads).max(1)).enumerate() {
                s.spawn(move || {
                    let mut w = maps.writer(t, &Sum);
                    for (k, v) in part {
                        w.emit(k, *v);
                    }
                });
            }
        });
        map.sync(&Sum).unwrap();
        let local = map.local_entries().map(|(k, v)| (k.to_vec(), *v)).collect();
        let global_size = map.global_size().unwrap();
        let gathered = map.gather_to_root().unwrap();
        NodeOutcome {
            local,
            gathered,
            global_size,
            shuffled_to: map.metrics().shuffled_entries_to.clone(),
        }
    })
    .unwrap()
}

fn oracle(n: usize, seed: u64, count: usize, vocab: u32) -> BTreeMap<Vec<u8>, i64> {
    let mut out = BTreeMap::new();
    for node in 0..n {
        for (k, v) in emissions(seed, node, count, vocab) {
            *out.entry(k).or_insert(0) += v;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synced_contents_match_oracle(
        n in 1usize..=4,
        threads in 1usize..=3,
        segments in prop::sample::select(vec![1usize, 4, 16]),
        seed in any::<u64>(),
        count in 0usize..3000,
        vocab in 1u32..500,
    ) {
        let outcomes = run(n, threads, segments, seed, count, vocab);
        let expected = oracle(n, seed, count, vocab);

        let mut union = BTreeMap::new();
        for (i, o) in outcomes.iter().enumerate() {
            for (k, v) in &o.local {
                prop_assert_eq!(owner(hash_key(k), n), NodeId(i), "misplaced key");
                prop_assert!(union.insert(k.clone(), *v).is_none(), "key on two nodes");
            }
            prop_assert_eq!(o.global_size, expected.len() as u64);
        }
        prop_assert_eq!(&union, &expected);
        let gathered: BTreeMap<_, _> = outcomes[0].gathered.iter().cloned().collect();
        prop_assert_eq!(outcomes[0].gathered.len(), gathered.len());
        prop_assert_eq!(&gathered, &expected);
        prop_assert!(outcomes[1..].iter().all(|o| o.gathered.is_empty()));

        // Each node ships one combined entry per distinct remote key it emitted.
        for (i, o) in outcomes.iter().enumerate() {
            let distinct: BTreeSet<Vec<u8>> =
                emissions(seed, i, count, vocab).into_iter().map(|(k, _)| k).collect();
            for j in 0..n {
                let want = if j == i {
                    0
                } else {
                    distinct.iter().filter(|k| owner(hash_key(k), n) == NodeId(j)).count() as u64
                };
                prop_assert_eq!(o.shuffled_to[j], want);
            }
        }
    }
}

#[test]
fn four_nodes_agree_with_one() {
    let seed = 99;
    let mut one: Vec<_> = run(1, 2, 8, seed, 20_000, 5000).swap_remove(0).gathered;
    one.sort();
    // The same emissions spread over four nodes.
    let all = emissions(seed, 0, 20_000, 5000);
    let config = DistMapConfig {
        segments: 8,
        segment_capacity: 16,
        threads: 2,
        cache_watermark: None,
    };
    let mut four = spawn_local_cluster(4, |c| {
        let me = c.self_id().index();
        let mut map = DistMap::<i64, _>::new(c, &config).unwrap();
        for (k, v) in all.iter().skip(me).step_by(4) {
            map.async_set(0, k, *v, &Sum);
        }
        map.sync(&Sum).unwrap();
        map.gather_to_root().unwrap()
    })
    .unwrap()
    .swap_remove(0);
    four.sort();
    assert_eq!(one, four);
}

#[test]
fn repeated_sync_is_idempotent_without_new_emits() {
    let results = spawn_local_cluster(3, |c| {
        let mut map = DistMap::<i64, _>::new(c, &DistMapConfig::default()).unwrap();
        map.async_set(0, b"a", 1, &Sum);
        map.sync(&Sum).unwrap();
        map.sync(&Sum).unwrap();
        map.global_size().unwrap()
    })
    .unwrap();
    assert_eq!(results, vec![1, 1, 1]);
}
