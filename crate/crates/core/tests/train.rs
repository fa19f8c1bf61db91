use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redt_core::data::{generate_scene, make_batch, sparsify_labels, SceneConfig, SceneSample};
use redt_core::losses_metrics::{LossForm, LossParams};
use redt_core::model::{BnMode, HeadConfig, Model, ModelConfig};
use redt_core::numerics::{LRSchedule, ParamStore};
use redt_core::relbias::BinConfig;
use redt_core::train::{accumulate_gradients, TrainSettings, Trainer};

fn tiny() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        stage_widths: vec![8, 16, 16, 16],
        stage_depths: vec![1, 1, 1, 1],
        backbone_window: 4,
        backbone_head_dim: 4,
        mlp_ratio: 2,
        neck_channels: 8,
        head: HeadConfig { iterations: 2, blocks_per_iteration: 1, num_heads: 2, window: 4, shift: 2, cff_ratio: 1, deb_channels: 4 },
        bins: BinConfig { d_min: 1.0, d_max: 20.0, num_bins: 16 },
    }
}

fn scenes(n: u64) -> Vec<SceneSample> {
    let cfg = SceneConfig { height: 32, width: 32, ..SceneConfig::default() };
    (0..n)
        .map(|i| {
            let mut s = generate_scene(100 + i, &cfg).unwrap();
            sparsify_labels(&mut s, 0.3, i).unwrap();
            s
        })
        .collect()
}

fn build() -> (Model, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let model = Model::new(tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    (model, store)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = scenes(4);
    let (model, mut store) = build();
    let init = store.clone();
    let schedule = LRSchedule { lr_start: 0.0, lr_max: 0.0, lr_end: 0.0, total_iters: 1, warmup_fraction: 0.25 };
    let settings = TrainSettings { schedule, bn_train: false, ..TrainSettings::default() };
    let mut trainer = Trainer::new(settings, &store).unwrap();
    let refs: Vec<&SceneSample> = data.iter().collect();
    let batch = make_batch::<f64>(&refs).unwrap();
    let stats = trainer.step(&model, &mut store, &[batch]).unwrap();
    assert!(stats.grad_norm > 0.0);
    for (a, b) in store.entries().iter().zip(init.entries()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn two_micro_batches_match_one_doubled_batch() {
    let data = scenes(4);
    let (model, store) = build();
    let loss = LossParams { form: LossForm::Conventional, ..LossParams::default() };
    let refs: Vec<&SceneSample> = data.iter().collect();

    let mut whole = store.clone();
    whole.zero_grads();
    let full = make_batch::<f64>(&refs).unwrap();
    accumulate_gradients(&model, &mut whole, &full, &loss, BnMode::Eval, 1.0).unwrap();

    let mut split = store.clone();
    split.zero_grads();
    for half in refs.chunks(2) {
        let b = make_batch::<f64>(half).unwrap();
        accumulate_gradients(&model, &mut split, &b, &loss, BnMode::Eval, 0.5).unwrap();
    }
    let mut compared = 0;
    for (a, b) in whole.entries().iter().zip(split.entries()) {
        match (&a.tensor.grad, &b.tensor.grad) {
            (Some(ga), Some(gb)) => {
                for (x, y) in ga.iter().zip(gb) {
                    assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{}: {x} vs {y}", a.name);
                }
                compared += 1;
            }
            (None, None) => {}
            _ => panic!("{} has a gradient on one side only", a.name),
        }
    }
    assert!(compared > 10);
}

#[test]
fn training_reduces_loss_on_a_fixed_batch() {
    let data = scenes(2);
    let (model, mut store) = build();
    let schedule = LRSchedule { lr_start: 1e-3, lr_max: 1e-3, lr_end: 1e-3, total_iters: 30, warmup_fraction: 0.25 };
    let settings = TrainSettings { schedule, loss: LossParams { form: LossForm::Conventional, ..LossParams::default() }, ..TrainSettings::default() };
    let mut trainer = Trainer::new(settings, &store).unwrap();
    let refs: Vec<&SceneSample> = data.iter().collect();
    let batch = make_batch::<f64>(&refs).unwrap();
    let first = trainer.step(&model, &mut store, std::slice::from_ref(&batch)).unwrap().loss;
    let mut last = first;
    for _ in 1..30 {
        last = trainer.step(&model, &mut store, std::slice::from_ref(&batch)).unwrap().loss;
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn empty_step_is_rejected() {
    let (model, mut store) = build();
    let mut trainer = Trainer::new(TrainSettings::default(), &store).unwrap();
    assert!(trainer.step(&model, &mut store, &[]).is_err());
}
