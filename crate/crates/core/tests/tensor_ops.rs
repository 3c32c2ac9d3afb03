use airtrack_core::tensor::gradcheck::op_suite;
use airtrack_core::tensor::{Adam, LstmCell, ParamStore, Tape, Tensor};
use airtrack_core::Error;
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in [0, 1] {
        for (name, report) in op_suite(seed).unwrap() {
            assert!(report.checked > 0, "{name}");
            assert!(report.max_rel_err <= 1e-4, "{name}: {} ({})", report.max_rel_err, report.worst);
        }
    }
}

#[test]
fn matmul_with_identity() {
    let mut tape = Tape::new(false);
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn mean_of_squares_gradient() {
    let mut tape = Tape::new(true);
    let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = tape.square(x);
    let m = tape.mean(sq);
    let g = tape.backward(m).unwrap();
    assert!(close(g.get(x).unwrap().data(), &[2.0 / 3.0, 4.0 / 3.0, 2.0], 1e-15));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::<f64>::new(false);
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::<f64>::new(true);
    let x = tape.input(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut tape = Tape::new(false);
    let xs: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 1.0).collect();
    let x = tape.constant(t(&[1, 1, 3, 4], &xs));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 4]);
    assert_eq!(tape.value(y).data(), &xs[..]);
}

#[test]
fn conv2d_edge_filter_fixture() {
    let mut tape = Tape::new(false);
    #[rustfmt::skip]
    let x = tape.constant(t(&[1, 1, 4, 4], &[
        1.0, 2.0, 0.0, 1.0,
        0.0, 1.0, 3.0, 2.0,
        2.0, 0.0, 1.0, 1.0,
        1.0, 1.0, 0.0, 2.0,
    ]));
    #[rustfmt::skip]
    let w = tape.constant(t(&[1, 1, 3, 3], &[
        1.0, 0.0, -1.0,
        2.0, 0.0, -2.0,
        1.0, 0.0, -1.0,
    ]));
    let y = tape.conv2d(x, w, None, 1, 0, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[-4.0, -2.0, 0.0, -4.0]);
}

#[test]
fn conv2d_output_size_and_bad_geometry() {
    let mut tape = Tape::<f64>::new(false);
    let x = tape.constant(Tensor::zeros(&[2, 3, 9, 7]));
    let w = tape.constant(Tensor::zeros(&[5, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1, 1).unwrap();
    // floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 2 - 3) / 2) + 1 = 4
    assert_eq!(tape.shape(y), &[2, 5, 5, 4]);
    let big = tape.constant(Tensor::zeros(&[1, 3, 12, 12]));
    assert!(matches!(tape.conv2d(x, big, None, 1, 0, 1), Err(Error::Shape(_))));
    let wrong_c = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, wrong_c, None, 1, 0, 1), Err(Error::Shape(_))));
}

#[test]
fn conv3d_depth_one_kernel_is_conv2d_per_slice() {
    let mut rng = airtrack_core::seed::rng(3);
    let (n, c, d, h, w, o) = (2, 3, 4, 5, 5, 2);
    let xs: Vec<f64> = (0..n * c * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ws: Vec<f64> = (0..o * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bs = [0.25, -0.5];
    let mut tape = Tape::new(false);
    let x = tape.constant(t(&[n, c, d, h, w], &xs));
    let k3 = tape.constant(t(&[o, c, 1, 3, 3], &ws));
    let b = tape.constant(t(&[o], &bs));
    let y3 = tape.conv3d(x, k3, Some(b), [1, 1, 1], [0, 1, 1], 1).unwrap();
    assert_eq!(tape.shape(y3), &[n, o, d, h, w]);
    let k2 = tape.constant(t(&[o, c, 3, 3], &ws));
    let y3v = tape.value(y3).clone();
    for z in 0..d {
        // gather slice z as (N, C, H, W)
        let mut sl = Vec::new();
        for s in 0..n {
            for ch in 0..c {
                let base = ((s * c + ch) * d + z) * h * w;
                sl.extend_from_slice(&xs[base..base + h * w]);
            }
        }
        let xz = tape.constant(t(&[n, c, h, w], &sl));
        let y2 = tape.conv2d(xz, k2, Some(b), 1, 1, 1).unwrap();
        let y2v = tape.value(y2).data();
        for s in 0..n {
            for oc in 0..o {
                let a = &y3v.data()[((s * o + oc) * d + z) * h * w..][..h * w];
                let e = &y2v[(s * o + oc) * h * w..][..h * w];
                assert!(close(a, e, 1e-12), "slice {z}");
            }
        }
    }
}

#[test]
fn conv3d_ones_kernel_sums() {
    let mut tape = Tape::new(false);
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let x = tape.constant(t(&[1, 1, 2, 2, 2], &xs));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
    let y = tape.conv3d(x, k, None, [1, 1, 1], [0, 0, 0], 1).unwrap();
    assert_eq!(tape.value(y).data(), &[36.0]);
    // 'same' time padding keeps the depth
    let x = tape.constant(Tensor::full(&[1, 1, 5, 2, 2], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 1, 1], 1.0));
    let y = tape.conv3d(x, k, None, [1, 1, 1], [1, 0, 0], 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 5, 2, 2]);
    let per_step: Vec<f64> = tape.value(y).data().chunks(4).map(|c| c[0]).collect();
    assert_eq!(per_step, vec![2.0, 3.0, 3.0, 3.0, 2.0]);
}

#[test]
fn grouped_conv_restricts_connectivity() {
    // with 2 groups, output channel 0 only sees input channels 0..2
    let mut tape = Tape::new(true);
    let x = tape.input(Tensor::full(&[1, 4, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(&[2, 2, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 1, 2).unwrap();
    let y0 = tape.slice(y, 1, 0, 1).unwrap();
    let s = tape.sum(y0);
    let g = tape.backward(s).unwrap();
    let gx = g.get(x).unwrap().data();
    assert!(gx[..18].iter().all(|&v| v > 0.0));
    assert!(gx[18..].iter().all(|&v| v == 0.0));
}

#[test]
fn channel_shuffle_examples() {
    let mut tape = Tape::new(false);
    let x = tape.constant(t(&[1, 4, 1], &[0.0, 1.0, 2.0, 3.0]));
    let same = tape.channel_shuffle(x, 1).unwrap();
    assert_eq!(tape.value(same).data(), &[0.0, 1.0, 2.0, 3.0]);
    let y = tape.channel_shuffle(x, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0, 1.0, 3.0]);
    assert!(matches!(tape.channel_shuffle(x, 3), Err(Error::Shape(_))));

    let vals: Vec<f64> = (0..24).map(f64::from).collect();
    let x = tape.constant(t(&[2, 6, 2], &vals));
    let a = tape.channel_shuffle(x, 2).unwrap();
    let back = tape.channel_shuffle(a, 3).unwrap();
    assert_eq!(tape.value(back).data(), &vals[..]);
}

fn batch_stats(data: &[f64], n: usize, c: usize, inner: usize) -> Vec<(f64, f64)> {
    (0..c)
        .map(|ci| {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| data[(s * c + ci) * inner..][..inner].iter().copied())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            (m, v)
        })
        .collect()
}

#[test]
fn batch_norm_normalizes() {
    let mut rng = airtrack_core::seed::rng(11);
    let (n, c, inner) = (4, 3, 5);
    let xs: Vec<f64> = (0..n * c * inner).map(|_| rng.gen_range(-3.0..5.0)).collect();
    let mut tape = Tape::new(true);
    let x = tape.constant(t(&[n, c, inner], &xs));
    let g = tape.constant(Tensor::full(&[c], 1.0));
    let b = tape.constant(Tensor::zeros(&[c]));
    let mut rm = Tensor::zeros(&[c]);
    let mut rv = Tensor::full(&[c], 1.0);
    let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5).unwrap();
    for (m, v) in batch_stats(tape.value(y).data(), n, c, inner) {
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-4, "{v}");
    }
    // running stats moved 10% towards the batch statistics (unbiased variance)
    let m_count = (n * inner) as f64;
    for (ci, (m, v)) in batch_stats(&xs, n, c, inner).into_iter().enumerate() {
        assert!((rm.data()[ci] - 0.1 * m).abs() < 1e-12);
        assert!((rv.data()[ci] - (0.9 + 0.1 * v * m_count / (m_count - 1.0))).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_leaves_normalized_batch_unchanged() {
    // "normalized" in the layer's own sense: zero mean and var + eps = 1
    let eps: f64 = 1e-5;
    let raw = [1.0, -1.0, 2.0, -2.0, 0.5, -0.5];
    let m = raw.iter().sum::<f64>() / 6.0;
    let v = raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 6.0;
    let xs: Vec<f64> = raw.iter().map(|x| (x - m) / v.sqrt() * (1.0 - eps).sqrt()).collect();
    let mut tape = Tape::new(true);
    let x = tape.constant(t(&[6, 1], &xs));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (mut rm, mut rv) = (Tensor::zeros(&[1]), Tensor::full(&[1], 1.0));
    let y = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, eps).unwrap();
    assert!(close(tape.value(y).data(), &xs, 1e-6));
}

#[test]
fn batch_norm_modes() {
    let mut tape = Tape::<f64>::new(true);
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let (mut rm, mut rv) = (Tensor::zeros(&[2]), Tensor::full(&[2], 1.0));
    let err = tape.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5);
    assert!(matches!(err, Err(Error::Precondition(_))));

    let mut eval = Tape::<f64>::new(false);
    let x = eval.constant(t(&[1, 2], &[1.0, 2.0]));
    let g = eval.constant(t(&[2], &[2.0, 1.0]));
    let b = eval.constant(t(&[2], &[0.5, 0.0]));
    let mut rm = t(&[2], &[0.0, 1.0]);
    let mut rv = t(&[2], &[4.0 - 1e-5, 1.0 - 1e-5]);
    let y = eval.batch_norm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5).unwrap();
    assert!(close(eval.value(y).data(), &[2.0 * 0.5 + 0.5, 1.0], 1e-12));
    // eval mode leaves running stats alone
    assert_eq!(rm.data(), &[0.0, 1.0]);
}

#[test]
fn lstm_zero_weights_give_zero_hidden() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = airtrack_core::seed::rng(1);
    let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        store.value_mut(id).fill(0.0);
    }
    let mut tape = Tape::new(false);
    let x = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.5, 9.0]));
    let s0 = cell.zero_state(&mut tape, 2);
    let s1 = cell.step(&mut tape, &store, x, s0).unwrap();
    assert!(tape.value(s1.h).data().iter().all(|&v| v == 0.0));
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn lstm_saturated_forget_gate_keeps_cell() {
    let (inp, hid) = (3, 2);
    let mut store = ParamStore::<f64>::new();
    let mut rng = airtrack_core::seed::rng(2);
    let cell = LstmCell::new(&mut store, "lstm", inp, hid, &mut rng);
    // silence the forget-gate columns and saturate its bias
    for id in [cell.wx, cell.wh] {
        let rows = store.value(id).shape()[0];
        let v = store.value_mut(id).data_mut();
        for r in 0..rows {
            for j in hid..2 * hid {
                v[r * 4 * hid + j] = 0.0;
            }
        }
    }
    store.value_mut(cell.b).data_mut()[hid..2 * hid].fill(50.0);

    let xs = [0.3, -0.7, 1.1];
    let h0 = [0.2, -0.4];
    let c0 = [1.5, -0.25];
    let mut tape = Tape::new(false);
    let x = tape.constant(t(&[1, inp], &xs));
    let state = airtrack_core::tensor::LstmState {
        h: tape.constant(t(&[1, hid], &h0)),
        c: tape.constant(t(&[1, hid], &c0)),
    };
    let s1 = cell.step(&mut tape, &store, x, state).unwrap();

    let (wx, wh, b) = (store.value(cell.wx).data(), store.value(cell.wh).data(), store.value(cell.b).data());
    let z = |j: usize| {
        b[j] + (0..inp).map(|r| xs[r] * wx[r * 4 * hid + j]).sum::<f64>()
            + (0..hid).map(|r| h0[r] * wh[r * 4 * hid + j]).sum::<f64>()
    };
    for k in 0..hid {
        let expect = c0[k] + sigmoid(z(k)) * z(2 * hid + k).tanh();
        assert!((tape.value(s1.c).data()[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn dropout_modes_and_rate() {
    let mut tape = Tape::<f64>::new(true);
    let x = tape.constant(Tensor::full(&[100_000], 1.0));
    assert_eq!(tape.dropout(x, 0.0, 5).unwrap(), x);
    let y = tape.dropout(x, 0.3, 5).unwrap();
    let kept = tape.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64;
    let n = 100_000.0;
    let sigma = (n * 0.7 * 0.3f64).sqrt();
    assert!((kept - 0.7 * n).abs() <= 3.0 * sigma, "kept {kept}");
    assert!(tape
        .value(y)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
    assert!(tape.dropout(x, 1.0, 5).is_err());

    let mut eval = Tape::<f64>::new(false);
    let x = eval.constant(Tensor::full(&[10], 2.0));
    let y = eval.dropout(x, 0.5, 5).unwrap();
    assert_eq!(eval.value(y).data(), &[2.0; 10]);
}

#[test]
fn acos_clamped_stays_finite_at_the_boundary() {
    let mut tape = Tape::new(true);
    let x = tape.input(t(&[3], &[1.0, -1.0, 1.0 + 1e-12]));
    let y = tape.acos_clamped(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(tape.value(y).all_finite());
    assert!(g.get(x).unwrap().all_finite());
}

#[test]
fn adam_counts_steps_and_zeroes_grads() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", t(&[2], &[1.0, -1.0]));
    let mut adam = Adam::new(&store, 0.01);
    for k in 1..=3 {
        let mut tape = Tape::new(true);
        let v = tape.param(&store, p);
        let sq = tape.square(v);
        let l = tape.sum(sq);
        tape.backward_into(l, &mut store).unwrap();
        adam.step(&mut store);
        assert_eq!(adam.steps(), k);
        assert!(store.grad(p).data().iter().all(|&g| g == 0.0));
    }
    assert!(store.value(p).data()[0] < 1.0);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let mut rng = airtrack_core::seed::rng(9);
        let conv = airtrack_core::tensor::Conv2dLayer::new(&mut store, "c", 3, 4, 3, 2, 1, 1, true, &mut rng);
        let mut tape = Tape::new(true);
        let xs: Vec<f64> = (0..2 * 3 * 8 * 8).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let x = tape.constant(Tensor::from_f64(&[2, 3, 8, 8], &xs).unwrap());
        let y = conv.forward(&mut tape, &store, x).unwrap();
        let y = tape.dropout(y, 0.2, 4).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}
