use infomask::colearning::{
    adam_update, batch_for_step, cosine_lr, forward_objective, load_checkpoint, run_training, step_rng, AdamState,
    PlanSource, TrainConfig, Trainer,
};
use infomask::data::{gen_dataset, Batch, Dataset};
use infomask::encoders::{EncoderConfig, Forward, ModelParams};
use infomask::numerics::{Tape, Tensor};
use infomask::objectives::LossWeights;
use infomask::Error;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 8,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        mlp_ratio: 2,
        n_frames: 3,
        text_layers: 1,
        embed_dim: 16,
        temporal_layers: 1,
        temporal_heads: 2,
        disc_hidden: 8,
        ..EncoderConfig::default()
    }
}

fn tiny(steps: u64) -> TrainConfig {
    TrainConfig { encoder: tiny_encoder(), batch_size: 4, steps, seed: 3, ..TrainConfig::default() }
}

fn tiny_data() -> Dataset {
    gen_dataset(8, 1, &tiny_encoder()).unwrap()
}

fn bits(ts: impl IntoIterator<Item = Tensor>) -> Vec<Vec<u64>> {
    ts.into_iter().map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn param_bits(p: &ModelParams) -> Vec<Vec<u64>> {
    bits(p.store.entries().iter().map(|e| e.tensor.clone()))
}

fn batch0(cfg: &TrainConfig, data: &Dataset) -> Batch {
    data.batch(&batch_for_step(data.len(), cfg.batch_size, cfg.seed, 0).unwrap()).unwrap()
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let cfg = tiny(10);
    let mut params = ModelParams::init(&cfg.encoder, 0).unwrap();
    let before = params.clone();
    let grads: Vec<Tensor> = params
        .store
        .entries()
        .iter()
        .enumerate()
        .map(|(k, e)| Tensor::full(e.tensor.shape().to_vec(), if k % 2 == 0 { 0.5 } else { -2.0 }))
        .collect();
    let mut opt = AdamState::new(&params);
    adam_update(&mut params, &grads, &mut opt, 1e-3, 1e-3).unwrap();
    for (k, (a, b)) in before.store.entries().iter().zip(params.store.entries()).enumerate() {
        if b.name == "log_tau" {
            continue;
        }
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((y - x - sign * 1e-3).abs() < 1e-9, "{}: {x} -> {y}", b.name);
        }
    }
    assert_eq!(opt.step, 1);
}

#[test]
fn lr_reaches_zero_at_horizon() {
    assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
    assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
    assert_eq!(cosine_lr(1e-3, 10, 10), 0.0);
}

#[test]
fn gradient_count_must_match() {
    let mut params = ModelParams::init(&tiny_encoder(), 0).unwrap();
    let mut opt = AdamState::new(&params);
    let mut grads: Vec<Tensor> =
        params.store.entries().iter().map(|e| Tensor::zeros(e.tensor.shape().to_vec())).collect();
    grads.pop();
    let before = param_bits(&params);
    assert!(matches!(adam_update(&mut params, &grads, &mut opt, 1e-3, 1e-3), Err(Error::Contract(_))));
    assert_eq!(param_bits(&params), before);
    assert_eq!(opt.step, 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny(4);
    let data = tiny_data();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..2 {
        let idx = batch_for_step(data.len(), cfg.batch_size, cfg.seed, t.step).unwrap();
        t.train_step(&data.batch(&idx).unwrap()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.save(&path).unwrap();
    let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
    assert_eq!(ck.step, 2);
    assert_eq!(ck.opt.step, t.opt.step);
    assert_eq!(param_bits(&ck.params), param_bits(&t.params));
    assert_eq!(bits(ck.opt.m.clone()), bits(t.opt.m.clone()));
    assert_eq!(bits(ck.opt.v.clone()), bits(t.opt.v.clone()));
    // aliases come back as aliases
    assert_eq!(ck.params.role_ids("spatial_encoder"), ck.params.role_ids("co_encoder"));
    assert_eq!(
        ck.params.role_ids("h_completer.video_encoder"),
        ck.params.role_ids("l_completer.video_encoder")
    );
    // saving again reproduces the file byte for byte
    let again = dir.path().join("b.ckpt");
    Trainer::from_checkpoint(ck).save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let cfg = tiny(4);
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));

    let mut t = Trainer::new(cfg.clone()).unwrap();
    run_training(&mut t, &data, Some(&full)).unwrap();

    // stop after two steps, keeping the four-step schedule
    let cfg_full = TrainConfig { horizon: Some(4), ..cfg.clone() };
    let mut t2 = Trainer::new(cfg_full.clone()).unwrap();
    for _ in 0..2 {
        let idx = batch_for_step(data.len(), cfg.batch_size, cfg.seed, t2.step).unwrap();
        t2.train_step(&data.batch(&idx).unwrap()).unwrap();
    }
    std::fs::create_dir_all(&part).unwrap();
    let mid = part.join("mid.ckpt");
    t2.save(&mid).unwrap();
    let mut resumed = Trainer::from_checkpoint(load_checkpoint(&mid, Some(&cfg_full)).unwrap());
    let tail = run_training(&mut resumed, &data, None).unwrap();

    let mut reference = Trainer::new(cfg_full).unwrap();
    let all = run_training(&mut reference, &data, None).unwrap();
    assert_eq!(tail.losses, all.losses[2..]);
    assert_eq!(param_bits(&resumed.params), param_bits(&reference.params));
    // horizon = steps gives the same schedule as leaving it unset
    assert_eq!(param_bits(&t.params), param_bits(&reference.params));
}

#[test]
fn resume_appends_traces() {
    let cfg = TrainConfig { horizon: Some(3), ..tiny(1) };
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    run_training(&mut t, &data, Some(dir.path())).unwrap();
    t.config.steps = 3;
    run_training(&mut t, &data, Some(dir.path())).unwrap();
    let losses = std::fs::read_to_string(dir.path().join("losses.jsonl")).unwrap();
    let steps: Vec<u64> =
        losses.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2]);
    let csv = std::fs::read_to_string(dir.path().join("attention.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("step,meanW_top30,meanW_bot30"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn mismatched_config_is_refused() {
    let cfg = tiny(2);
    let t = Trainer::new(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    t.save(&path).unwrap();
    let other = TrainConfig { r_h: 0.6, ..cfg };
    assert!(matches!(load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));

    // truncated file
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    assert!(load_checkpoint(&path, None).is_err());

    // manifest from a different geometry
    let wide = TrainConfig { encoder: EncoderConfig { d_model: 32, ..tiny_encoder() }, ..tiny(2) };
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let (head, _) = text.split_once('\n').unwrap();
    let mut manifest: serde_json::Value = serde_json::from_str(head).unwrap();
    manifest["config"] = serde_json::to_value(&wide).unwrap();
    manifest["config_hash"] = serde_json::Value::String(infomask::data::json_hash(&wide).unwrap());
    let mut forged = serde_json::to_vec(&manifest).unwrap();
    forged.push(b'\n');
    forged.extend_from_slice(&bytes[head.len() + 1..]);
    std::fs::write(&path, forged).unwrap();
    assert!(matches!(load_checkpoint(&path, None), Err(Error::Checkpoint(_))));
}

#[test]
fn zero_weights_reproduce_the_baseline() {
    let data = tiny_data();
    let zero = TrainConfig { weights: LossWeights { alpha: 0.0, beta: 0.0, gamma: 0.0 }, ..tiny(3) };
    let baseline = TrainConfig { h_branch: false, l_branch: false, ..tiny(3) };
    let mut a = Trainer::new(zero).unwrap();
    let mut b = Trainer::new(baseline).unwrap();
    let ra = run_training(&mut a, &data, None).unwrap();
    let rb = run_training(&mut b, &data, None).unwrap();
    let totals = |r: &infomask::colearning::TrainArtifacts| -> Vec<u64> {
        r.losses.iter().map(|l| l.total.to_bits()).collect()
    };
    assert_eq!(totals(&ra), totals(&rb));
    assert!(ra.losses.iter().all(|l| l.total == l.vtc));
    assert_eq!(param_bits(&a.params), param_bits(&b.params));
}

#[test]
fn fixed_seed_is_deterministic() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        let mut t = Trainer::new(tiny(2)).unwrap();
        run_training(&mut t, &data, Some(&dir.path().join(run))).unwrap();
    }
    for f in ["losses.jsonl", "attention.csv", "step000002.ckpt"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn sequential_mode_trains() {
    let data = tiny_data();
    let cfg = TrainConfig { sequential_branches: true, ..tiny(2) };
    let mut t = Trainer::new(cfg).unwrap();
    let art = run_training(&mut t, &data, None).unwrap();
    assert_eq!(art.losses.len(), 2);
    assert_eq!(t.opt.step, 8);
}

/// Per-loss backward: which parameters each loss component reaches.
#[test]
fn gradient_paths() {
    let cfg = tiny(1);
    let data = tiny_data();
    let batch = batch0(&cfg, &data);
    let params = ModelParams::init(&cfg.encoder, 5).unwrap();
    let disc: Vec<usize> = params.role_ids("discriminator").unwrap().iter().map(|i| i.index()).collect();
    let recon: Vec<usize> = params.role_ids("reconstructor").unwrap().iter().map(|i| i.index()).collect();
    let spatial: Vec<usize> = params.role_ids("spatial_encoder").unwrap().iter().map(|i| i.index()).collect();

    let grads_of = |grl: bool, pick: usize| -> Vec<Tensor> {
        let tape = Tape::new();
        let fw = Forward::new(&tape, &params, true);
        let mut rng = step_rng(cfg.seed, 0);
        let out = forward_objective(&fw, &batch, &cfg, PlanSource::Sample(&mut rng), grl).unwrap();
        let p = out.parts;
        let loss = [p.vtc, p.vtc_h, p.vvc_h, p.vtc_l, p.vvc_l, p.adv][pick];
        fw.param_grads(&tape.backward(loss).unwrap())
    };
    let nonzero = |g: &Tensor| g.data().iter().any(|v| *v != 0.0);

    for pick in 0..5 {
        let g = grads_of(true, pick);
        assert!(disc.iter().all(|&k| !nonzero(&g[k])), "component {pick} reached the discriminator");
        assert!(spatial.iter().any(|&k| nonzero(&g[k])));
        let reaches_recon = recon.iter().any(|&k| nonzero(&g[k]));
        assert_eq!(reaches_recon, pick == 1 || pick == 2, "component {pick}");
    }
    let with = grads_of(true, 5);
    let without = grads_of(false, 5);
    assert!(disc.iter().all(|&k| nonzero(&with[k])));
    for k in 0..with.len() {
        let scale = if disc.contains(&k) { 1.0 } else { -cfg.grl_lambda };
        for (a, b) in with[k].data().iter().zip(without[k].data()) {
            assert!((a - scale * b).abs() <= 1e-10, "{}: {a} vs {b}", params.store.entries()[k].name);
        }
    }
    // the reconstructor is never on the adversarial path
    assert!(recon.iter().all(|&k| !nonzero(&with[k])));
}

#[test]
fn sharing_law_holds_after_steps() {
    let data = tiny_data();
    let mut t = Trainer::new(tiny(2)).unwrap();
    run_training(&mut t, &data, None).unwrap();
    let p = &t.params;
    assert_eq!(p.role_ids("spatial_encoder"), p.role_ids("co_encoder"));
    assert_eq!(p.role_ids("h_completer.video_encoder"), p.role_ids("l_completer.video_encoder"));
    let tau = p.tau();
    assert!((0.001..=0.5).contains(&tau));
}

#[test]
fn batch_larger_than_dataset_is_a_config_error() {
    let data = tiny_data();
    let mut t = Trainer::new(TrainConfig { batch_size: 16, ..tiny(1) }).unwrap();
    assert!(matches!(run_training(&mut t, &data, None), Err(Error::Config(_))));
}
