use super::*;
use crate::data::{compute_norm_stats, generate_synthetic, SyntheticRecipe};

struct Fixture {
    series: NormalizedSeries,
    state: TrainState,
}

fn fixture(stage: Stage, horizon: usize, seed: u64) -> Fixture {
    let grid = GridSpec::uniform(16, 32, vec![0.0, 50.0]).unwrap();
    let layout = ChannelLayout::ocean(2);
    let store = generate_synthetic(&SyntheticRecipe::routing_default(seed), &grid, &layout, 40).unwrap();
    let norm = compute_norm_stats(&store, store.timestamps[0]..store.timestamps[28]).unwrap();
    let series = store.normalized(&norm).unwrap();
    let cfg = TrainConfig {
        stage,
        horizon,
        iterations: 8,
        batch_size: 2,
        peak_lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let state = TrainState::init(NetConfig::toy(), LossConfig::default(), cfg, grid, layout, norm).unwrap();
    Fixture { series, state }
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let cfg = TrainConfig {
        iterations: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg), 2.5e-4);
    assert_eq!(lr_at(1000, &cfg), 1e-8);
    assert_eq!(lr_at(5000, &cfg), 1e-8);
    assert!((lr_at(500, &cfg) - (2.5e-4 + 1e-8) / 2.0).abs() < 1e-18);
    let mut prev = f64::INFINITY;
    for s in 0..=1000 {
        let lr = lr_at(s, &cfg);
        assert!(lr <= prev);
        if s > 0 {
            // continuity: steps change by at most the largest cosine slope
            assert!(prev - lr <= std::f64::consts::PI / 2.0 * 2.5e-4 / 1000.0 + 1e-18);
        }
        prev = lr;
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::default();
    for bad in [
        TrainConfig { iterations: 0, ..base.clone() },
        TrainConfig { floor_lr: 1.0, ..base.clone() },
        TrainConfig { batch_size: 0, ..base.clone() },
        TrainConfig { beta2: 1.0, ..base.clone() },
        TrainConfig { horizon: 0, ..base.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"iterations": 3, "bogus": 1}"#);
    assert!(parsed.is_err());
}

#[test]
fn no_steps_leaves_initial_state() {
    let f = fixture(Stage::Pretrain, 1, 1);
    let t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    assert_eq!(t.into_state(), f.state);
}

#[test]
fn runs_are_deterministic_and_thread_count_invariant() {
    let f = fixture(Stage::Pretrain, 1, 2);
    let mut a = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap().with_workers(1);
    let mut b = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap().with_workers(3);
    a.run(|_, _| Ok(())).unwrap();
    b.run(|_, _| Ok(())).unwrap();
    assert_eq!(a.history(), b.history());
    assert_eq!(a.state(), b.state());
    assert_eq!(a.state().iteration, 8);
    let rows: Vec<f64> = a.state().selection.values().rows().into_iter().map(|r| r.sum()).collect();
    assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-12));
    assert_ne!(a.state().selection.values(), f.state.selection.values());
}

#[test]
fn horizon_one_finetune_equals_pretrain() {
    let pre = fixture(Stage::Pretrain, 4, 3);
    let mut ft_state = pre.state.clone();
    ft_state.train_config.stage = Stage::Finetune;
    ft_state.train_config.horizon = 1;
    let a = Trainer::new(pre.state.clone(), &pre.series, 0..28).unwrap();
    let b = Trainer::new(ft_state, &pre.series, 0..28).unwrap();
    let mut ga = vec![0.0; a.state().params.len()];
    let mut gb = ga.clone();
    let oa = a.sample_gradient(10, None, &mut ga).unwrap();
    let ob = b.sample_gradient(10, None, &mut gb).unwrap();
    assert!((oa.loss - ob.loss).abs() < 1e-12);
    assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() <= 1e-6 * x.abs().max(1e-12)));
}

#[test]
fn finetune_feeds_merged_predictions_back() {
    let f = fixture(Stage::Finetune, 3, 4);
    let t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    let mut g = vec![0.0; f.state.params.len()];
    let o = t.sample_gradient(10, None, &mut g).unwrap();
    assert_eq!(o.step_inputs.len(), 3);
    assert_eq!(o.step_inputs[0], f.series.states[7..11].to_vec());
    assert_eq!(o.step_inputs[1][3], o.merged[0]);
    assert_eq!(o.step_inputs[2][2], o.merged[0]);
    assert_eq!(o.step_inputs[2][3], o.merged[1]);
    assert_ne!(o.step_inputs[1][3], f.series.states[11]);
    assert_eq!(o.step_inputs[1][..3], f.series.states[8..11]);
}

#[test]
fn later_rollout_steps_contribute_gradient() {
    let f = fixture(Stage::Finetune, 2, 5);
    let t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    let n = f.state.params.len();
    let (mut full, mut first) = (vec![0.0; n], vec![0.0; n]);
    t.sample_gradient(12, Some(&[0.5, 0.5]), &mut full).unwrap();
    t.sample_gradient(12, Some(&[0.5, 0.0]), &mut first).unwrap();
    let diff = full.iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-8, "{diff}");
}

#[test]
fn rollout_gradient_matches_central_differences() {
    let mut f = fixture(Stage::Finetune, 2, 6);
    // a wide smoothing constant keeps the loss smooth at the difference step
    f.state.loss_config.epsilon = 0.3;
    // move zero-initialized branches off zero so every path carries gradient
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for p in f.state.params.iter_mut() {
        *p += 0.05 * (r.random::<f64>() - 0.5);
    }
    let t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    let mut g = vec![0.0; f.state.params.len()];
    t.sample_gradient(12, None, &mut g).unwrap();
    let h = 1e-5;
    // loss roundoff over 2h is ~1e-10, so tiny gradients are compared absolutely
    let floor = 1e-6;
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    let picks: Vec<usize> = order[..4].iter().copied().chain((0..8).map(|_| r.random_range(0..g.len()))).collect();
    for i in picks {
        let mut s = f.state.clone();
        s.params[i] += h;
        let up = Trainer::new(s.clone(), &f.series, 0..28).unwrap().sample_gradient(12, None, &mut vec![0.0; g.len()]).unwrap().loss;
        s.params[i] -= 2.0 * h;
        let down = Trainer::new(s, &f.series, 0..28).unwrap().sample_gradient(12, None, &mut vec![0.0; g.len()]).unwrap().loss;
        let fd = (up - down) / (2.0 * h);
        let den = g[i].abs().max(fd.abs()).max(floor);
        assert!((g[i] - fd).abs() / den < 1e-3, "param {i}: {} vs {fd}", g[i]);
    }
}

#[test]
fn non_finite_loss_names_iteration() {
    let mut f = fixture(Stage::Pretrain, 1, 7);
    let mut t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    t.step().unwrap();
    let mut s = t.into_state();
    s.params[0] = f64::NAN;
    f.state = s;
    let mut t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    match t.step() {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_a_fixpoint() {
    let f = fixture(Stage::Pretrain, 1, 8);
    let mut t = Trainer::new(f.state.clone(), &f.series, 0..28).unwrap();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    let h1 = save_checkpoint(t.state(), &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(&loaded, t.state());
    let h2 = save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    write_manifest(&loaded, &p2, &h2).unwrap();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["sha256"], h2);
    assert_eq!(m["iteration"], 3);
}

#[test]
fn truncated_or_corrupt_checkpoint_fails() {
    let f = fixture(Stage::Pretrain, 1, 9);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    save_checkpoint(&f.state, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    std::fs::write(&p, &flipped).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    let mut wrong = bytes.clone();
    wrong[8] = 99;
    std::fs::write(&p, &wrong).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    std::fs::write(&p, &bytes[..10]).unwrap();
    assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
}

#[test]
fn resumed_finetune_matches_uninterrupted_run() {
    let pre = fixture(Stage::Pretrain, 1, 10);
    let ft_cfg = TrainConfig {
        stage: Stage::Finetune,
        horizon: 2,
        iterations: 6,
        batch_size: 1,
        seed: 77,
        ..TrainConfig::default()
    };
    let start = pre.state.next_stage(ft_cfg).unwrap();
    let mut whole = Trainer::new(start.clone(), &pre.series, 0..28).unwrap();
    whole.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::new(start, &pre.series, 0..28).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.ckpt");
    save_checkpoint(first.state(), &p).unwrap();
    let mut second = Trainer::new(load_checkpoint(&p).unwrap(), &pre.series, 0..28).unwrap();
    second.run(|_, _| Ok(())).unwrap();
    let resumed: Vec<f64> = first.history().iter().chain(second.history()).map(|r| r.loss).collect();
    let straight: Vec<f64> = whole.history().iter().map(|r| r.loss).collect();
    assert_eq!(resumed.len(), straight.len());
    for (a, b) in resumed.iter().zip(&straight) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert_eq!(second.state().params, whole.state().params);
}

#[test]
fn log_is_append_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train_log.csv");
    let r = LogRecord {
        iteration: 0,
        lr: 1e-3,
        loss: 0.5,
        stage: Stage::Pretrain,
    };
    append_log(&p, &[r.clone()]).unwrap();
    append_log(&p, &[LogRecord { iteration: 1, ..r }]).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "iteration,lr,loss,stage");
    assert!(lines[2].starts_with("1,") && lines[2].ends_with(",pretrain"));
}
