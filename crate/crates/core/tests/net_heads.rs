use airtrack_core::net::{load_model, param_count, save_model, HeadKind, ModelConfig, PairBatch, PoseNet};
use airtrack_core::tensor::{ParamStore, Scalar, Tape, Tensor};
use rand::Rng;

fn config(head: HeadKind, size: usize) -> ModelConfig {
    ModelConfig {
        input_size: [size, size],
        head,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn frames(n: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = airtrack_core::seed::rng(seed);
    (0..n)
        .map(|_| (0..3 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn batch<T: Scalar>(seqs: &[Vec<Vec<f64>>], size: usize) -> PairBatch<T> {
    let cast: Vec<Vec<Vec<T>>> = seqs
        .iter()
        .map(|s| s.iter().map(|f| f.iter().map(|&v| T::of(v)).collect()).collect())
        .collect();
    let refs: Vec<Vec<&[T]>> = cast.iter().map(|s| s.iter().map(Vec::as_slice).collect()).collect();
    PairBatch::sequences(&refs, 3, size, size).unwrap()
}

fn run<T: Scalar>(net: &PoseNet, store: &ParamStore<T>, input: &PairBatch<T>, seed: u64) -> (Vec<usize>, Vec<f64>) {
    let mut store = store.clone();
    let mut tape = Tape::new(false);
    let y = net.forward(&mut tape, &mut store, input, seed).unwrap();
    (tape.shape(y).to_vec(), tape.value(y).to_f64_vec())
}

fn step(out: &[f64], t: usize) -> &[f64] {
    &out[6 * t..6 * t + 6]
}

#[test]
fn output_shapes_at_default_size() {
    for head in HeadKind::ALL {
        let (net, mut store) = PoseNet::new::<f64>(&config(head, 64)).unwrap();
        let input = batch::<f64>(&[frames(11, 64, 1)], 64);
        let mut tape = Tape::new(false);
        let x = tape.input(input.frames.clone());
        let feats = net.backbone_features(&mut tape, &mut store, x).unwrap();
        assert_eq!(tape.shape(feats), &[11, 32, 8, 8]);
        let (shape, out) = run(&net, &store, &input, 0);
        assert_eq!(shape, vec![1, 10, 6], "{head}");
        assert!(out.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn single_step_gives_one_vector() {
    for head in HeadKind::ALL {
        let (net, store) = PoseNet::new::<f64>(&config(head, 16)).unwrap();
        let (shape, _) = run(&net, &store, &batch::<f64>(&[frames(2, 16, 2)], 16), 0);
        assert_eq!(shape, vec![1, 1, 6]);
    }
}

#[test]
fn swapping_the_pair_changes_the_output() {
    for head in HeadKind::ALL {
        let (net, store) = PoseNet::new::<f64>(&config(head, 16)).unwrap();
        let f = frames(2, 16, 3);
        let (_, ab) = run(&net, &store, &batch::<f64>(&[f.clone()], 16), 0);
        let (_, ba) = run(&net, &store, &batch::<f64>(&[vec![f[1].clone(), f[0].clone()]], 16), 0);
        let diff: f64 = ab.iter().zip(&ba).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "{head}: {diff}");
    }
}

#[test]
fn eval_mode_ignores_the_dropout_seed() {
    for head in HeadKind::ALL {
        let (net, store) = PoseNet::new::<f64>(&config(head, 16)).unwrap();
        let input = batch::<f64>(&[frames(4, 16, 4)], 16);
        assert_eq!(run(&net, &store, &input, 1).1, run(&net, &store, &input, 2).1);
    }
}

#[test]
fn static_head_is_order_equivariant() {
    let (net, store) = PoseNet::new::<f64>(&config(HeadKind::Static, 16)).unwrap();
    let f = frames(5, 16, 5);
    let base = batch::<f64>(&[f], 16);
    let (_, out) = run(&net, &store, &base, 0);
    let perm = [2, 0, 3, 1];
    let pairs = perm.iter().map(|&t| base.pairs[t]).collect();
    let shuffled = PairBatch::new(base.frames.clone(), pairs, 1, 4).unwrap();
    let (_, out2) = run(&net, &store, &shuffled, 0);
    for (k, &t) in perm.iter().enumerate() {
        assert_eq!(step(&out2, k), step(&out, t));
    }
}

#[test]
fn zero_final_weights_give_the_bias() {
    let (net, mut store) = PoseNet::new::<f64>(&config(HeadKind::Static, 16)).unwrap();
    let w = store.find("head.fc.weight").unwrap();
    store.value_mut(w).fill(0.0);
    let b = store.find("head.fc.bias").unwrap();
    let bias = store.value(b).to_f64_vec();
    let (_, out) = run(&net, &store, &batch::<f64>(&[frames(4, 16, 6)], 16), 0);
    for t in 0..3 {
        assert_eq!(step(&out, t), bias.as_slice());
    }
}

/// Perturbs frame `k`, which feeds pairs `k - 1` and `k`, and returns the
/// steps whose prediction changed.
fn changed_steps(head: HeadKind, steps: usize, k: usize) -> Vec<usize> {
    let (net, store) = PoseNet::new::<f64>(&config(head, 16)).unwrap();
    let f = frames(steps + 1, 16, 7);
    let (_, out) = run(&net, &store, &batch::<f64>(&[f.clone()], 16), 0);
    let mut g = f;
    g[k] = frames(1, 16, 8).remove(0);
    let (_, out2) = run(&net, &store, &batch::<f64>(&[g], 16), 0);
    (0..steps).filter(|&t| step(&out, t) != step(&out2, t)).collect()
}

#[test]
fn recurrent_heads_are_causal() {
    for head in [HeadKind::Recurrent, HeadKind::ConvRecurrent] {
        assert!(head.is_causal());
        assert_eq!(changed_steps(head, 6, 3), vec![2, 3, 4, 5], "{head}");
    }
}

#[test]
fn static_head_only_sees_its_own_pair() {
    assert_eq!(changed_steps(HeadKind::Static, 6, 3), vec![2, 3]);
}

#[test]
fn temporal_head_looks_ahead() {
    assert!(!HeadKind::Temporal3d.is_causal());
    let changed = changed_steps(HeadKind::Temporal3d, 6, 4);
    assert!(changed.iter().any(|&t| t < 3), "{changed:?}");
}

#[test]
fn unit_time_kernel_matches_static_at_matched_weights() {
    let stat_cfg = config(HeadKind::Static, 16);
    let (stat, stat_store) = PoseNet::new::<f64>(&stat_cfg).unwrap();
    let temp_cfg = ModelConfig {
        head: HeadKind::Temporal3d,
        time_kernel: 1,
        ..stat_cfg.clone()
    };
    let (temp, mut temp_store) = PoseNet::new::<f64>(&temp_cfg).unwrap();
    for (name, value) in stat_store.params().chain(stat_store.buffers()) {
        temp_store.set_named(name, value.clone()).unwrap();
    }
    let c = temp_cfg.fused_channels;
    // identity 1x3x3 convolutions (centre tap) and eval-mode norms that map
    // x to x; inputs are post-ReLU so the extra ReLUs are identities too
    let mut eye = Tensor::zeros(&[c, c, 1, 3, 3]);
    for i in 0..c {
        eye.data_mut()[(i * c + i) * 9 + 4] = 1.0;
    }
    for i in 0..2 {
        temp_store.set_named(&format!("head.conv3d.{i}.weight"), eye.clone()).unwrap();
        temp_store
            .set_named(&format!("head.conv3d.{i}.norm.running_var"), Tensor::full(&[c], 1.0 - 1e-5))
            .unwrap();
    }
    let input = batch::<f64>(&[frames(5, 16, 9), frames(5, 16, 10)], 16);
    let (_, a) = run(&stat, &stat_store, &input, 0);
    let (_, b) = run(&temp, &temp_store, &input, 0);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn parameter_counts_follow_layer_arithmetic() {
    let conv = |i: usize, o: usize, groups: usize| o * (i / groups) * 9 + 2 * o;
    let trunk = conv(3, 8, 1) + conv(8, 16, 1) + conv(16, 32, 1) + conv(64, 16, 1) + conv(16, 16, 4);
    let flat = 16 * 8 * 8;
    let expect = |head: HeadKind| match head {
        HeadKind::Static => trunk + flat * 6 + 6,
        HeadKind::Recurrent => trunk + (flat + 32 + 1) * 128 + 32 * 6 + 6,
        HeadKind::ConvRecurrent => trunk + (16 + 32) * 128 * 9 + 128 + 32 * 64 * 6 + 6,
        HeadKind::Temporal3d => trunk + 2 * (16 * 16 * 27 + 32) + flat * 6 + 6,
    };
    let mut counts = Vec::new();
    for head in HeadKind::ALL {
        let (_, store) = PoseNet::new::<f32>(&config(head, 64)).unwrap();
        assert_eq!(param_count(&store), expect(head), "{head}");
        counts.push(param_count(&store));
    }
    assert!(counts[0] < counts[1]);
    assert!(trunk <= 50_000);
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    for head in HeadKind::ALL {
        let cfg = config(head, 16);
        let (net, store) = PoseNet::new::<f32>(&cfg).unwrap();
        save_model(&cfg, &store, &ckpt).unwrap();
        let (net2, store2) = load_model::<f32>(&ckpt).unwrap();
        assert_eq!(net2.config, cfg);
        let input = batch::<f32>(&[frames(4, 16, 12)], 16);
        assert_eq!(run(&net, &store, &input, 0).1, run(&net2, &store2, &input, 0).1);
    }
}
