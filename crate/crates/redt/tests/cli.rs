use std::fs;
use std::path::Path;
use std::process::Command;

use redt::dataset::{load_split, Split};
use redt::formats::decode_checkpoint;
use redt::pipeline::{evaluate, init_model, OraclePredictor, PER_MAP_CSV, RANGES_CSV};
use redt::RunConfig;
use redt_core::model::{HeadConfig, ModelConfig};
use redt_core::relbias::BinConfig;

fn redt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_redt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = redt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        stage_widths: vec![8, 16, 16, 16],
        stage_depths: vec![1, 1, 1, 1],
        backbone_window: 4,
        backbone_head_dim: 4,
        mlp_ratio: 2,
        neck_channels: 8,
        head: HeadConfig { iterations: 3, blocks_per_iteration: 1, num_heads: 2, window: 4, shift: 2, cff_ratio: 1, deb_channels: 4 },
        bins: BinConfig { d_min: 1.0, d_max: 20.0, num_bins: 16 },
    }
}

/// Small dataset plus a config file for the tiny model.
fn setup(root: &Path, iters: u64) -> (String, String) {
    let data = root.join("data");
    ok(&["gen", "--out", data.to_str().unwrap(), "--scenes", "6", "--test-scenes", "3", "--size", "32x32", "--seed", "3"]);
    let cfg = RunConfig {
        dataset: data.clone(),
        model: tiny_model(),
        total_iters: iters,
        batch_size: 2,
        loss_form: redt_core::losses_metrics::LossForm::Conventional,
        ..RunConfig::default()
    };
    let path = root.join("run.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    (data.to_str().unwrap().to_string(), path.to_str().unwrap().to_string())
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_validates_size() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--out", d.to_str().unwrap(), "--scenes", "8", "--test-scenes", "2", "--seed", "7"]);
    }
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
    let bad = redt(&["gen", "--out", t.path().join("c").to_str().unwrap(), "--size", "48x48"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = redt(&["gen"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn gen_lists_every_training_scene() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    ok(&["gen", "--out", d.to_str().unwrap(), "--size", "64x64", "--scenes", "512", "--test-scenes", "0"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train"].as_array().unwrap().len(), 512);
}

#[test]
fn zero_learning_rate_checkpoint_equals_initialization() {
    let t = tempfile::tempdir().unwrap();
    let (_, cfg_path) = setup(t.path(), 1);
    let mut cfg: RunConfig = serde_json::from_slice(&fs::read(&cfg_path).unwrap()).unwrap();
    cfg.schedule.lr_start = 0.0;
    cfg.schedule.lr_max = 0.0;
    cfg.schedule.lr_end = 0.0;
    fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = t.path().join("run");
    ok(&["train", "--config", &cfg_path, "--out", out.to_str().unwrap()]);
    let (_, init) = init_model(&cfg).unwrap();
    let saved = decode_checkpoint(&fs::read(out.join("checkpoint.ckpt")).unwrap()).unwrap();
    assert_eq!(saved.len(), init.len());
    for ((name, t), e) in saved.iter().zip(init.entries()) {
        assert_eq!(name, &e.name);
        // running statistics still move in a training-mode forward pass
        if !name.contains("running_") {
            assert_eq!(t.data(), e.tensor.data(), "{name}");
        }
    }
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss,loss_d0,loss_d1,loss_d2,loss_d3,grad_norm,clamped\n"));
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn train_eval_report_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(t.path(), 3);
    let before = tree_bytes(&Path::new(&data).join("test"));
    let run = t.path().join("run");
    ok(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--dclip", "10", "--log-every", "0"]);
    assert_eq!(tree_bytes(&Path::new(&data).join("test")), before);
    let saved: RunConfig = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.d_clip, Some(10.0));

    let ev = t.path().join("eval");
    ok(&["eval", "--run", run.to_str().unwrap(), "--out", ev.to_str().unwrap(), "--ranges", "0,10,20"]);
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("abs_rel,rmse,rmse_log,log10,sq_rel,silog,d1,d2,d3\n"));
    let ranges = fs::read_to_string(ev.join(RANGES_CSV)).unwrap();
    assert_eq!(ranges.lines().count(), 3);
    assert_eq!(fs::read_to_string(ev.join(PER_MAP_CSV)).unwrap().lines().count(), 5);

    let svg = t.path().join("plot.svg");
    let text = ok(&["report", "--out", svg.to_str().unwrap(), ev.join(RANGES_CSV).to_str().unwrap()]);
    assert!(text.contains("rmse"));
    let svg = fs::read_to_string(svg).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    assert_eq!(redt(&["report", "--out", t.path().join("x.svg").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(t.path(), 1);
    let run = t.path().join("run");
    ok(&["train", "--config", &cfg, "--out", run.to_str().unwrap(), "--log-every", "0"]);
    let mut c: RunConfig = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    c.model.neck_channels = 16;
    fs::write(run.join("config.json"), serde_json::to_string(&c).unwrap()).unwrap();
    let out = redt(&["eval", "--run", run.to_str().unwrap(), "--out", t.path().join("e").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`neck.proj.weight`: model [64, 16] vs file [32, 8]"), "{err}");
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let t = tempfile::tempdir().unwrap();
    let (data, _) = setup(t.path(), 1);
    let (_, samples) = load_split(Path::new(&data), Split::Train).unwrap();
    let r = evaluate(&mut OraclePredictor { maps: 4 }, &samples, &[0.0, 10.0, 20.5]).unwrap();
    assert_eq!(r.per_map_rmse, vec![0.0; 4]);
    let m = &r.report;
    assert_eq!((m.abs_rel, m.rmse, m.rmse_log, m.log10, m.sq_rel, m.silog), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    assert_eq!(m.per_range.len(), 2);
}

#[test]
fn ablation_pairs_differ_only_in_theta() {
    let t = tempfile::tempdir().unwrap();
    let (_, cfg) = setup(t.path(), 2);
    let out = t.path().join("abl");
    let text = ok(&["ablate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "1,2", "--dclip", "10"]);
    assert!(text.contains("pairs 2"), "{text}");
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let load = |d: &str| decode_checkpoint(&fs::read(out.join(d).join("checkpoint.ckpt")).unwrap()).unwrap();
    let (on, off) = (load("seed1_on"), load("seed1_off"));
    assert_eq!(on.len(), off.len());
    for ((na, a), (nb, b)) in on.iter().zip(&off) {
        assert_eq!((na, a.shape()), (nb, b.shape()));
        if na.ends_with(".theta_de") {
            assert!(b.data().iter().all(|&v| v == 0.0));
            assert!(a.data().iter().any(|&v| v != 0.0));
        }
    }
}
