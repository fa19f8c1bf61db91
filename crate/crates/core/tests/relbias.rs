use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redt_core::attention::{window_partition, WindowLayout};
use redt_core::numerics::{Graph, ParamStore, Tensor};
use redt_core::relbias::*;

fn table(nb: usize, nh: usize, seed: u64) -> (ParamStore<f64>, BiasEmbeddingTable) {
    let mut store = ParamStore::new();
    let t = BiasEmbeddingTable::register(&mut store, "head.iter0.block0.theta_de", BinConfig { d_min: 0.0, d_max: 80.0, num_bins: nb }, nh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.get_mut(t.theta).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    (store, t)
}

fn bias_of(store: &ParamStore<f64>, t: &BiasEmbeddingTable, bins: &[usize]) -> Vec<f64> {
    let mut g = Graph::new();
    let r = t.build_bias(&mut g, store, bins).unwrap();
    g.value(r).to_vec()
}

#[test]
fn fig3_window_matches_brute_force() {
    let (nb, nh) = (200, 3);
    let (store, t) = table(nb, nh, 1);
    // A = 198 and B = 1 as in the illustration; the rest are arbitrary.
    let bins = [198, 1, 57, 0, 199, 120, 33, 33, 150];
    assert_eq!(raw_difference(bins[0], bins[1]), 197);
    assert_eq!(t.bins.classes(), 399);
    assert_eq!(store.get(t.theta).shape(), &[399, 3]);
    let r = bias_of(&store, &t, &bins);
    let theta = store.get(t.theta).data();
    for h in 0..nh {
        for p in 0..9 {
            for q in 0..9 {
                let row = (bins[p] as i64 - bins[q] as i64 + nb as i64 - 1) as usize;
                assert_eq!(r[(h * 9 + p) * 9 + q], theta[row * nh + h]);
            }
        }
    }
    assert_eq!(r[1], theta[396 * nh]);
}

#[test]
fn zero_table_gives_zero_bias() {
    let mut store = ParamStore::<f64>::new();
    let t = BiasEmbeddingTable::register(&mut store, "t", BinConfig { d_min: 1.0, d_max: 20.0, num_bins: 128 }, 8).unwrap();
    assert!(bias_of(&store, &t, &[0, 5, 127, 64]).iter().all(|&v| v == 0.0));
}

#[test]
fn theta_gradient_is_scatter_add_of_upstream() {
    let (nb, nh) = (4, 2);
    let (store, t) = table(nb, nh, 2);
    let bins = [0, 3, 3, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let upstream: Vec<f64> = (0..nh * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let r = t.build_bias(&mut g, &store, &bins).unwrap();
    let w = g.constant(&[nh, 4, 4], upstream.clone()).unwrap();
    let prod = g.mul(r, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut s2 = store.clone();
    grads.accumulate_into(&g, &mut s2).unwrap();
    let got = s2.get(t.theta).grad.clone().unwrap();
    let mut expect = vec![0.0; (2 * nb - 1) * nh];
    for h in 0..nh {
        for p in 0..4 {
            for q in 0..4 {
                let row = bins[p] + nb - 1 - bins[q];
                expect[row * nh + h] += upstream[(h * 4 + p) * 4 + q];
            }
        }
    }
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn loss_without_attention_leaves_theta_gradient_zero() {
    let (store, t) = table(8, 2, 4);
    let mut g = Graph::new();
    let _r = t.build_bias(&mut g, &store, &[1, 2, 3, 4]).unwrap();
    let x = g.input(&Tensor::full(&[3], 2.0));
    let sq = g.square(x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut s2 = store.clone();
    grads.accumulate_into(&g, &mut s2).unwrap();
    assert!(s2.get(t.theta).grad.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn depth_map_receives_no_gradient_through_bins() {
    let (store, t) = table(16, 2, 5);
    let mut g = Graph::new();
    let depth = g.input(&Tensor::new(vec![4], vec![3.0, 40.0, 41.0, 79.0]).unwrap().with_grad());
    let bins = discretize(g.value(depth), &t.bins).unwrap();
    let r = t.build_bias(&mut g, &store, &bins).unwrap();
    let loss = g.sum(r).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(depth).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn windowed_bias_matches_per_window_builds() {
    let (store, t) = table(6, 2, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, h, w, win, shift) = (2, 4, 4, 2, 1);
    let bins: Vec<usize> = (0..b * h * w).map(|_| rng.random_range(0..6)).collect();
    let layout = WindowLayout::new(b, h, w, win, shift).unwrap();
    let mut g = Graph::new();
    let all = t.build_bias_windows(&mut g, &store, &bins, &layout).unwrap();
    let all = g.value(all).to_vec();
    let as_tensor = Tensor::new(vec![b, h, w, 1], bins.iter().map(|&v| v as f64).collect()).unwrap();
    let (parts, _) = window_partition(&as_tensor, win, shift).unwrap();
    let per = 2 * 16;
    for (k, wb) in parts.data().chunks(4).enumerate() {
        let wb: Vec<usize> = wb.iter().map(|&v| v as usize).collect();
        assert_eq!(&all[k * per..(k + 1) * per], &bias_of(&store, &t, &wb)[..]);
    }
}

#[test]
fn antisymmetry_is_exhaustive_for_small_tables() {
    for nb in 2..=16 {
        for a in 0..nb {
            for b in 0..nb {
                let (ab, ba) = (relative_index(a, b, nb).unwrap(), relative_index(b, a, nb).unwrap());
                assert_eq!(ab + ba, 2 * (nb - 1));
                assert!(ab <= 2 * nb - 2);
            }
        }
    }
}

proptest! {
    #[test]
    fn index_stays_in_table(nb in 2usize..300, a in any::<usize>(), b in any::<usize>()) {
        let (a, b) = (a % nb, b % nb);
        let row = relative_index(a, b, nb).unwrap();
        prop_assert!(row <= 2 * nb - 2);
        prop_assert_eq!(row as i64 - (nb as i64 - 1), raw_difference(a, b));
    }

    #[test]
    fn discretization_is_monotone(d_min in 0.0f64..10.0, span in 0.1f64..100.0, nb in 2usize..256, mut ds in prop::collection::vec(-20.0f64..140.0, 1..40)) {
        let cfg = BinConfig { d_min, d_max: d_min + span, num_bins: nb };
        ds.sort_by(f64::total_cmp);
        let bins = discretize(&ds, &cfg).unwrap();
        prop_assert!(bins.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(bins.iter().all(|&b| b < nb));
        prop_assert_eq!(cfg.bin(d_min), 0);
        prop_assert_eq!(cfg.bin(d_min + span), nb - 1);
    }

    #[test]
    fn bias_is_content_free_with_constant_diagonal(seed in any::<u64>(), bins in prop::collection::vec(0usize..32, 1..10)) {
        let (store, t) = table(32, 3, seed);
        let r = bias_of(&store, &t, &bins);
        let theta = store.get(t.theta).data();
        let n = bins.len();
        for h in 0..3 {
            for p in 0..n {
                prop_assert_eq!(r[(h * n + p) * n + p], theta[31 * 3 + h]);
            }
        }
        // the same raster from a different window builds the same R
        prop_assert_eq!(bias_of(&store, &t, &bins.clone()), r);
    }

    #[test]
    fn uniform_bin_shift_leaves_bias_unchanged(seed in any::<u64>(), bins in prop::collection::vec(0usize..20, 1..10), k in 0usize..12) {
        let (store, t) = table(32, 2, seed);
        let shifted: Vec<usize> = bins.iter().map(|b| b + k).collect();
        prop_assert_eq!(bias_of(&store, &t, &bins), bias_of(&store, &t, &shifted));
    }
}
