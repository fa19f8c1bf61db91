use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redt_core::attention::{mhsa_block, WindowLayout};
use redt_core::losses_metrics::{total_loss, DepthMap, LossForm, LossParams};
use redt_core::model::*;
use redt_core::numerics::gradcheck::relative_error;
use redt_core::numerics::{Graph, ParamStore, Tensor};
use redt_core::relbias::{discretize, BinConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        stage_widths: vec![8, 16, 16, 16],
        stage_depths: vec![2, 1, 1, 1],
        backbone_window: 4,
        backbone_head_dim: 4,
        mlp_ratio: 2,
        neck_channels: 8,
        head: HeadConfig { iterations: 2, blocks_per_iteration: 2, num_heads: 2, window: 4, shift: 2, cff_ratio: 1, deb_channels: 4 },
        bins: BinConfig { d_min: 1.0, d_max: 20.0, num_bins: 16 },
    }
}

fn build(cfg: ModelConfig, seed: u64) -> (Model, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::new(cfg, &mut store, &mut rng).unwrap();
    (model, store)
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![b, h, w, 3], (0..b * h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn zero_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
    for e in store.entries_mut() {
        if pred(&e.name) && e.kind != redt_core::numerics::ParamKind::Buffer && !e.name.ends_with(".gamma") {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn default_pyramid_and_map_shapes() {
    let (model, store) = build(ModelConfig::default(), 1);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &images(1, 64, 64, 2), BnMode::Eval).unwrap();
    let shapes: Vec<Vec<usize>> = out.pyramid.iter().map(|&f| g.shape(f).to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 16, 16, 32], vec![1, 8, 8, 64], vec![1, 4, 4, 128], vec![1, 2, 2, 256]]);
    assert_eq!(g.shape(out.neck), &[1, 16, 16, 32]);
    assert_eq!(out.depths.len(), 4);
    for &d in &out.depths {
        assert_eq!(g.shape(d), &[1, 16, 16, 1]);
        assert!(g.value(d).iter().all(|&v| (1.0..=20.0).contains(&v)));
    }
    assert_eq!(g.shape(out.full), &[1, 64, 64, 1]);
}

#[test]
fn forward_is_deterministic() {
    let (model, store) = build(tiny(), 3);
    let x = images(2, 32, 32, 4);
    let run = || {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &x, BnMode::Train).unwrap();
        out.depths.iter().flat_map(|&d| g.value(d).to_vec()).collect::<Vec<f64>>()
    };
    let a = run();
    assert_eq!(a, run());
    let (model2, store2) = build(tiny(), 3);
    let mut g = Graph::new();
    let out = model2.forward(&mut g, &store2, &x, BnMode::Train).unwrap();
    assert_eq!(a, out.depths.iter().flat_map(|&d| g.value(d).to_vec()).collect::<Vec<f64>>());
}

#[test]
fn zero_backbone_gives_finite_constant_features() {
    let (model, mut store) = build(tiny(), 5);
    zero_where(&mut store, |n| n.starts_with("backbone."));
    let mut g = Graph::new();
    let xv = g.input(&images(1, 32, 32, 6));
    let pyr = model.backbone.forward(&mut g, &store, xv).unwrap();
    for &f in &pyr {
        assert!(g.value(f).iter().all(|v| v.is_finite()));
        assert!(g.value(f).iter().all(|&v| v == g.value(f)[0]));
    }
}

#[test]
fn rejects_bad_resolution() {
    assert!(ModelConfig { height: 48, ..ModelConfig::default() }.validate().is_err());
    let (model, store) = build(tiny(), 1);
    let mut g = Graph::new();
    assert!(model.forward(&mut g, &store, &images(1, 64, 64, 1), BnMode::Eval).is_err());
}

#[test]
fn cnb_keeps_first_level_size_and_upsamples_others() {
    let (model, store) = build(tiny(), 7);
    let mut g = Graph::new();
    let xv = g.input(&images(2, 32, 32, 8));
    let pyr = model.backbone.forward(&mut g, &store, xv).unwrap();
    let mut updates = Vec::new();
    let levels = model.neck.levels(&mut g, &store, &pyr, BnMode::Train, &mut updates).unwrap();
    for &l in &levels {
        assert_eq!(g.shape(l), &[2, 8, 8, 8]);
    }
    assert_eq!(updates.len(), 8);
}

#[test]
fn bilinear_upsampling_keeps_constants_and_ramps() {
    let mut g = Graph::<f64>::new();
    let c = g.input(&Tensor::full(&[1, 2, 2, 3], 0.7));
    let up = g.upsample_bilinear(c, 16, 16).unwrap();
    assert!(g.value(up).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    let ramp: Vec<f64> = (0..16).map(|i| 0.5 * (i / 4) as f64 + 2.0 * (i % 4) as f64).collect();
    let r = g.input(&Tensor::new(vec![1, 4, 4, 1], ramp).unwrap());
    let up = g.upsample_bilinear(r, 8, 8).unwrap();
    // corners align, so output (y, x) samples the ramp at (y·3/7, x·3/7)
    for y in 0..8 {
        for x in 0..8 {
            let expect = 0.5 * y as f64 * 3.0 / 7.0 + 2.0 * x as f64 * 3.0 / 7.0;
            assert!((g.value(up)[y * 8 + x] - expect).abs() < 1e-6);
        }
    }
}

#[test]
fn neck_of_zero_levels_is_layer_norm_bias() {
    let (model, mut store) = build(tiny(), 9);
    let beta: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    store.get_mut(model.neck.norm.beta).data_mut().copy_from_slice(&beta);
    let mut g = Graph::new();
    let zeros: Vec<_> = (0..4).map(|_| g.input(&Tensor::zeros(&[1, 8, 8, 8]))).collect();
    let out = model.neck.fuse(&mut g, &store, &zeros).unwrap();
    assert_eq!(g.shape(out), &[1, 8, 8, 8]);
    for row in g.value(out).chunks(8) {
        assert_eq!(row, &beta[..]);
    }
}

#[test]
fn neck_is_order_sensitive() {
    let (model, store) = build(tiny(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let signal = Tensor::new(vec![1, 8, 8, 8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let fuse_with_signal_at = |k: usize| {
        let mut g = Graph::new();
        let parts: Vec<_> = (0..4).map(|i| if i == k { g.input(&signal) } else { g.input(&Tensor::zeros(&[1, 8, 8, 8])) }).collect();
        let out = model.neck.fuse(&mut g, &store, &parts).unwrap();
        g.value(out).to_vec()
    };
    assert_ne!(fuse_with_signal_at(0), fuse_with_signal_at(2));
}

#[test]
fn deb_readout_range() {
    let (model, _) = build(tiny(), 12);
    let deb = &model.head.debs[0];
    let mut g = Graph::<f64>::new();
    let z = g.input(&Tensor::new(vec![1, 1, 5, 1], vec![0.0, 800.0, -800.0, 3.0, -3.0]).unwrap());
    let d = deb.readout(&mut g, z).unwrap();
    let v = g.value(d);
    assert_eq!(v[0], 10.5);
    assert_eq!(v[1], 20.0);
    assert_eq!(v[2], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z = g.input(&Tensor::new(vec![1, 10, 10, 1], (0..100).map(|_| rng.random_range(-60.0..60.0)).collect()).unwrap());
    let d = deb.readout(&mut g, z).unwrap();
    assert!(g.value(d).iter().all(|&v| (1.0..=20.0).contains(&v)));
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    x.iter().enumerate().map(|(j, v)| (v - m) / (var + 1e-5).sqrt() * gamma[j] + beta[j]).collect()
}

#[test]
fn cff_matches_naive_reference_on_2x2() {
    let (model, mut store) = build(tiny(), 14);
    let cff = model.head.iterations[0][0].cff.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for id in [cff.norm.gamma, cff.norm.beta, cff.expand.bias.unwrap(), cff.dwconv.bias, cff.proj.bias.unwrap()] {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let c = 8;
    let x = Tensor::new(vec![1, 2, 2, c], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(&x);
    let out = cff.forward(&mut g, &store, xv).unwrap();

    let get = |id| store.get(id).data().to_vec();
    let (ew, eb) = (get(cff.expand.weight), get(cff.expand.bias.unwrap()));
    let (dw, db) = (get(cff.dwconv.weight), get(cff.dwconv.bias));
    let (pw, pb) = (get(cff.proj.weight), get(cff.proj.bias.unwrap()));
    let gated: Vec<Vec<f64>> = x
        .data()
        .chunks(c)
        .map(|t| {
            let y = layer_norm(t, &get(cff.norm.gamma), &get(cff.norm.beta));
            let e: Vec<f64> = (0..2 * c).map(|j| eb[j] + (0..c).map(|i| y[i] * ew[i * 2 * c + j]).sum::<f64>()).collect();
            (0..c).map(|j| e[j] / (1.0 + (-e[c + j]).exp())).collect()
        })
        .collect();
    for py in 0..2i64 {
        for px in 0..2i64 {
            let mut conv = db.clone();
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let (sy, sx) = (py + ky - 1, px + kx - 1);
                    if (0..2).contains(&sy) && (0..2).contains(&sx) {
                        for ch in 0..c {
                            conv[ch] += dw[(ky * 3 + kx) as usize * c + ch] * gated[(sy * 2 + sx) as usize][ch];
                        }
                    }
                }
            }
            let t = (py * 2 + px) as usize;
            for j in 0..c {
                let expect = x.data()[t * c + j] + pb[j] + (0..c).map(|i| conv[i] * pw[i * c + j]).sum::<f64>();
                assert!((g.value(out)[t * c + j] - expect).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn cff_with_zero_weights_is_identity_and_gate_halves() {
    let (model, mut store) = build(tiny(), 16);
    let cff = model.head.iterations[0][0].cff.clone();
    store.get_mut(cff.proj.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let x = images(1, 4, 4, 17).reshape(vec![1, 4, 2, 6]).unwrap();
    let x = Tensor::new(vec![1, 2, 2, 8], x.data()[..32].to_vec()).unwrap();
    let mut g = Graph::new();
    let xv = g.input(&x);
    let out = cff.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(out), x.data());
    let v = g.input(&Tensor::new(vec![1, 4], vec![3.0, -2.0, 0.0, 0.0]).unwrap());
    let gl = g.glu(v).unwrap();
    assert_eq!(g.value(gl), &[1.5, -1.0]);
}

#[test]
fn idle_iteration_reads_depth_from_unchanged_feature() {
    let (model, mut store) = build(tiny(), 18);
    zero_where(&mut store, |n| n.starts_with("head.iter0.") && (n.contains(".proj.weight")));
    let mut g = Graph::new();
    let feature = g.input(&images(1, 8, 8, 19).reshape(vec![1, 8, 8, 3]).map(|_| ()).map_or_else(|_| unreachable!(), |_| Tensor::zeros(&[1, 8, 8, 8])));
    let _ = feature;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let f = Tensor::new(vec![1, 8, 8, 8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let fv = g.input(&f);
    let d0 = model.head.debs[0].forward(&mut g, &store, fv).unwrap();
    let (refined, d1) = model.head.iteration(&mut g, &store, 0, fv, d0).unwrap();
    assert_eq!(g.value(refined), f.data());
    let direct = model.head.debs[1].forward(&mut g, &store, fv).unwrap();
    assert_eq!(g.value(d1), g.value(direct));
}

#[test]
fn zero_theta_equals_unbiased_attention() {
    let (model, store) = build(tiny(), 21);
    let block = &model.head.iterations[0][1];
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let f = Tensor::new(vec![2, 8, 8, 8], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let bins: Vec<usize> = (0..128).map(|_| rng.random_range(0..16)).collect();
    let mut g = Graph::new();
    let fv = g.input(&f);
    let with_r = block.forward(&mut g, &store, fv, &bins).unwrap();
    let cfg = block.attn.config;
    let layout = WindowLayout::new(2, 8, 8, cfg.window, cfg.shift).unwrap();
    let plain = mhsa_block(&mut g, &store, &block.attn, fv, &layout, None).unwrap();
    let plain = block.cff.forward(&mut g, &store, plain).unwrap();
    assert_eq!(g.value(with_r), g.value(plain));
}

#[test]
fn constant_depth_gives_constant_bias_per_head() {
    let (model, mut store) = build(tiny(), 23);
    let block = &model.head.iterations[0][0];
    let theta: Vec<f64> = (0..store.get(block.theta.theta).len()).map(|i| i as f64).collect();
    store.get_mut(block.theta.theta).data_mut().copy_from_slice(&theta);
    let layout = WindowLayout::new(1, 8, 8, 4, 0).unwrap();
    let bins = discretize(&vec![7.3f64; 64], &model.config.bins).unwrap();
    let mut g = Graph::new();
    let r = block.theta.build_bias_windows(&mut g, &store, &bins, &layout).unwrap();
    for (k, slice) in g.value(r).chunks(16 * 16).enumerate() {
        let h = k % 2;
        assert!(slice.iter().all(|&v| v == theta[15 * 2 + h]));
    }
}

#[test]
fn perturbing_depth_changes_no_bias_index() {
    let (model, store) = build(tiny(), 24);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &images(1, 32, 32, 25), BnMode::Eval).unwrap();
    let d = g.value(out.depths[0]).to_vec();
    let bins = discretize(&d, &model.config.bins).unwrap();
    let nudged: Vec<f64> = d.iter().map(|v| v + 1e-9).collect();
    let moved = discretize(&nudged, &model.config.bins).unwrap();
    let changed = bins.iter().zip(&moved).filter(|(a, b)| a != b).count();
    assert!(changed <= 1);
}

#[test]
fn depth_map_gets_gradient_only_from_its_own_loss() {
    let (model, store) = build(tiny(), 26);
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let gt = DepthMap::new(8, 8, (0..64).map(|_| rng.random_range(1.0..20.0)).collect(), (0..64).map(|_| rng.random_bool(0.5)).collect()).unwrap();
    let params = LossParams { form: LossForm::Conventional, ..LossParams::default() };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &images(1, 32, 32, 28), BnMode::Eval).unwrap();
    // loss on D_1 and D_2 only: D_0 reaches them solely through the bins
    let later = total_loss(&mut g, &out.depths[1..], std::slice::from_ref(&gt), &params).unwrap();
    let grads = g.backward(later.loss).unwrap();
    assert!(grads.wrt(out.depths[0]).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
    let all = total_loss(&mut g, &out.depths, std::slice::from_ref(&gt), &params).unwrap();
    let grads = g.backward(all.loss).unwrap();
    assert!(grads.wrt(out.depths[0]).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (model, mut store) = build(tiny(), 30);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // non-zero tables so their gradients pass through a non-trivial bias
    for e in store.entries_mut() {
        if e.name.ends_with(".theta_de") || e.name.ends_with(".pos_bias") {
            e.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let x = images(2, 32, 32, 32);
    let gts: Vec<DepthMap> = (0..2)
        .map(|_| DepthMap::new(8, 8, (0..64).map(|_| rng.random_range(1.0..20.0)).collect(), (0..64).map(|_| rng.random_bool(0.7)).collect()).unwrap())
        .collect();
    let params = LossParams { form: LossForm::Conventional, ..LossParams::default() };
    let loss_of = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &x, BnMode::Train).unwrap();
        let t = total_loss(&mut g, &out.depths, &gts, &params).unwrap();
        (g, t.loss)
    };
    let (g, loss) = loss_of(&store);
    let grads = g.backward(loss).unwrap();
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    grads.accumulate_into(&g, &mut analytic_store).unwrap();

    let trainable: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable()).collect();
    let mut picks: Vec<(redt_core::numerics::ParamId, usize)> = Vec::new();
    for name in ["head.iter0.block0.theta_de", "head.iter1.block1.theta_de", "backbone.stage0.block1.attn.pos_bias"] {
        let id = store.id(name).unwrap();
        // rows that were actually selected carry gradient
        let grad = analytic_store.get(id).grad.clone().unwrap();
        let hot: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
        assert!(!hot.is_empty(), "{name} received no gradient");
        for k in 0..4 {
            picks.push((id, hot[(k * 7919) % hot.len()]));
        }
    }
    while picks.len() < 50 {
        let id = trainable[rng.random_range(0..trainable.len())];
        picks.push((id, rng.random_range(0..store.get(id).len())));
    }
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, i) in picks {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + step;
        let (g, l) = loss_of(&store);
        let hi = g.scalar_value(l);
        store.get_mut(id).data_mut()[i] = orig - step;
        let (g, l) = loss_of(&store);
        let lo = g.scalar_value(l);
        store.get_mut(id).data_mut()[i] = orig;
        let fd = (hi - lo) / (2.0 * step);
        let an = analytic_store.get(id).grad.as_ref().map_or(0.0, |g| g[i]);
        let err = relative_error(an, fd);
        assert!(err < 1e-4, "{}[{i}]: analytic {an}, numeric {fd}", store.entry(id).name);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4);
}

#[test]
fn rel_bias_switch_freezes_and_zeroes_tables() {
    let (_, mut store) = build(tiny(), 33);
    let id = store.id("head.iter0.block0.theta_de").unwrap();
    store.get_mut(id).data_mut()[0] = 1.0;
    set_rel_bias(&mut store, false);
    assert!(store.entry(id).frozen);
    assert!(store.get(id).data().iter().all(|&v| v == 0.0));
    let frozen = store.entries().iter().filter(|e| e.frozen).count();
    assert_eq!(frozen, 4);
    set_rel_bias(&mut store, true);
    assert!(!store.entry(id).frozen);
}
