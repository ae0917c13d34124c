use std::sync::Arc;

use attnindex::attention::{merge_f64, merge_weights, partial_attention, static_partition, PartialAttention};
use attnindex::diagnostics::{recall_at_k, MahalanobisModel};
use attnindex::index::{FlatIndex, IvfIndex};
use attnindex::vecstore::{read_vectors, write_vectors, Role, VectorSet, KVD1_HEADER_LEN};
use proptest::prelude::*;

fn set_strategy(max_n: usize, max_d: usize, lo: f32, hi: f32) -> impl Strategy<Value = (usize, Vec<f32>)> {
    (1..=max_d, 0..=max_n).prop_flat_map(move |(d, n)| (Just(d), prop::collection::vec(lo..hi, n * d)))
}

fn small_ints(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec((-8i32..=8).prop_map(|x| x as f32), len)
}

/// Direct f64 softmax over `ids`, max-shifted.
fn direct(q: &[f32], k: &VectorSet, v: &VectorSet, ids: &[usize]) -> Vec<f64> {
    let s = 1.0 / (k.dim() as f64).sqrt();
    let z: Vec<f64> = ids
        .iter()
        .map(|&i| q.iter().zip(k.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() * s)
        .collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let t: f64 = w.iter().sum();
    let mut out = vec![0.0; v.dim()];
    for (&i, wi) in ids.iter().zip(&w) {
        for (o, &x) in out.iter_mut().zip(v.row(i)) {
            *o += wi / t * x as f64;
        }
    }
    out
}

proptest! {
    #[test]
    fn kvd1_round_trip_is_bit_exact((d, data) in set_strategy(40, 16, -1e30, 1e30), role in 0u8..3) {
        let role = Role::from_code(role).unwrap();
        let set = VectorSet::new(role, d, data).unwrap();
        let mut buf = Vec::new();
        write_vectors(&mut buf, &set).unwrap();
        prop_assert_eq!(buf.len(), KVD1_HEADER_LEN + 4 * set.len() * d);
        let back = read_vectors(&buf[..]).unwrap();
        prop_assert_eq!(back.role(), role);
        prop_assert_eq!(back.dim(), d);
        let bits = |s: &VectorSet| s.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&set));
    }

    #[test]
    fn merge_equals_softmax_over_union(
        (d, kdata) in set_strategy(64, 16, -4.0, 4.0),
        seed in any::<u64>(),
        assign in prop::collection::vec(0u8..3, 64),
    ) {
        let n = kdata.len() / d;
        prop_assume!(n > 0);
        let keys = VectorSet::new(Role::Key, d, kdata.clone()).unwrap();
        let vdata: Vec<f32> = kdata.iter().rev().map(|x| x * 0.5 + 0.25).collect();
        let values = VectorSet::new(Role::Value, d, vdata).unwrap();
        let q: Vec<f32> = (0..d).map(|i| (((seed >> (i % 60)) & 15) as f32 - 7.5) * 0.5).collect();
        let w: Vec<usize> = (0..n).filter(|&i| assign[i] == 0).collect();
        let o: Vec<usize> = (0..n).filter(|&i| assign[i] == 1).collect();
        prop_assume!(!w.is_empty() || !o.is_empty());
        let part = |ids: &[usize]| {
            if ids.is_empty() {
                PartialAttention::empty(d)
            } else {
                partial_attention(&q, &keys, &values, ids).unwrap()
            }
        };
        let (pw, po) = (part(&w), part(&o));
        let got = merge_f64(&pw, &po).unwrap();
        let union: Vec<usize> = w.iter().chain(&o).copied().collect();
        let want = direct(&q, &keys, &values, &union);
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
        }
        if !w.is_empty() && !o.is_empty() {
            let (g1, g2) = merge_weights(&pw, &po);
            prop_assert!((g1 + g2 - 1.0).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&g1) && (0.0..=1.0).contains(&g2));
        }
    }

    // Small integer entries keep every inner product exact, so ties are real
    // ties and both sides must break them by id.
    #[test]
    fn flat_matches_sorted_oracle(
        (d, n) in (1usize..8, 1usize..120),
        seed_data in small_ints(8 * 120 + 8),
        k in 1usize..40,
    ) {
        let keys = Arc::new(VectorSet::new(Role::Key, d, seed_data[..n * d].to_vec()).unwrap());
        let q = &seed_data[n * d..n * d + d];
        let k = k.min(n);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .map(|i| (q.iter().zip(keys.row(i)).map(|(&a, &b)| a as f64 * b as f64).sum(), i))
            .collect();
        // partial_cmp, not total_cmp: -0.0 and 0.0 are the same score
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = scored[..k].iter().map(|s| s.1).collect();
        let got = FlatIndex::build(keys).unwrap().search(q, k, None).unwrap();
        prop_assert_eq!(got.ids, want);
        prop_assert_eq!(got.scanned, n);
    }

    #[test]
    fn ivf_recall_grows_with_nprobe(
        data in prop::collection::vec(-1.0f32..1.0, 300 * 4),
        q in prop::collection::vec(-1.0f32..1.0, 4),
        seed in any::<u64>(),
    ) {
        let keys = Arc::new(VectorSet::new(Role::Key, 4, data).unwrap());
        let ivf = IvfIndex::build(keys.clone(), 12, seed, 5).unwrap();
        let truth = FlatIndex::build(keys).unwrap().search(&q, 10, None).unwrap().ids;
        let mut last = 0.0;
        for nprobe in 1..=12 {
            let r = ivf.search(&q, 10, nprobe, None).unwrap();
            let recall = recall_at_k(&r.ids, &truth);
            prop_assert!(recall >= last);
            last = recall;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn recall_ignores_order(
        retrieved in prop::collection::vec(0usize..50, 0..30),
        truth in prop::collection::btree_set(0usize..50, 1..20),
        rot in 0usize..30,
    ) {
        let truth: Vec<usize> = truth.into_iter().collect();
        let base = recall_at_k(&retrieved, &truth);
        let mut r2 = retrieved.clone();
        if !r2.is_empty() {
            let len = r2.len();
            r2.rotate_left(rot % len);
        }
        r2.reverse();
        let mut t2 = truth.clone();
        t2.reverse();
        prop_assert_eq!(recall_at_k(&r2, &t2), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn static_partition_covers_context(t in 0usize..5000, s_init in 0usize..300, s_local in 0usize..800) {
        let p = static_partition(t, s_init, s_local);
        let mut all: Vec<usize> = p.static_set.iter().chain(&p.dynamic_pool).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..t).collect::<Vec<_>>());
        prop_assert!(p.static_set.len() <= s_init + s_local);
    }

    // Distances to a Gaussian fit do not change under an invertible affine map
    // applied to both the reference set and the point.
    #[test]
    fn mahalanobis_is_affine_invariant(
        data in prop::collection::vec(-1.0f32..1.0, 60 * 3),
        x in prop::collection::vec(-2.0f32..2.0, 3),
        a in prop::collection::vec(-0.3f32..0.3, 9),
        b in prop::collection::vec(-5.0f32..5.0, 3),
    ) {
        let m = |i: usize, j: usize| a[i * 3 + j] + if i == j { 1.0 } else { 0.0 };
        let map = |v: &[f32]| -> Vec<f32> {
            (0..3).map(|i| (0..3).map(|j| m(i, j) * v[j]).sum::<f32>() + b[i]).collect()
        };
        let reference = VectorSet::new(Role::Key, 3, data.clone()).unwrap();
        let mapped: Vec<f32> = data.chunks(3).flat_map(map).collect();
        let mapped = VectorSet::new(Role::Key, 3, mapped).unwrap();
        let before = MahalanobisModel::fit(&reference, Some(0.0)).unwrap().squared_distance(&x).unwrap();
        let after = MahalanobisModel::fit(&mapped, Some(0.0)).unwrap().squared_distance(&map(&x)).unwrap();
        prop_assert!((before - after).abs() <= 1e-4 * before.max(1.0), "{} vs {}", before, after);
    }
}
