use airtrack_core::airway::{camera_pose_at, centerline_path, generate_patient, LobeLabel, PatientSpec};
use airtrack_core::net::{HeadKind, ModelConfig, PairBatch, PoseNet};
use airtrack_core::render::{render, CameraIntrinsics};
use airtrack_core::tensor::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn bench_render(c: &mut Criterion) {
    let tree = generate_patient(&PatientSpec::new(1)).unwrap();
    let path = centerline_path(&tree, LobeLabel::UpperRight, 0).unwrap();
    let pose = camera_pose_at(&path, 0.3 * path.total_length, 4.0, 0.0).unwrap();
    let mut group = c.benchmark_group("render");
    group.sample_size(20);
    for size in [32, 64] {
        let cam = CameraIntrinsics {
            width: size,
            height: size,
            ..CameraIntrinsics::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(size), &cam, |b, cam| {
            b.iter(|| render(&tree, black_box(&pose), cam).unwrap())
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::<f32>::full(&[8, 16, 32, 32], 0.5);
    let w = Tensor::<f32>::full(&[32, 16, 3, 3], 0.01);
    c.bench_function("conv2d 8x16x32x32 -> 32, fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new(true);
            let xv = tape.input(x.clone());
            let wv = tape.input(w.clone());
            let y = tape.conv2d(xv, wv, None, 2, 1, 1).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward 1x10 pairs 64x64");
    group.sample_size(10);
    for head in HeadKind::ALL {
        let cfg = ModelConfig {
            head,
            ..ModelConfig::default()
        };
        let (net, store) = PoseNet::new::<f32>(&cfg).unwrap();
        let frame = vec![0.1f32; 3 * 64 * 64];
        let seq: Vec<&[f32]> = (0..11).map(|_| frame.as_slice()).collect();
        let input = PairBatch::sequences(&[seq], 3, 64, 64).unwrap();
        group.bench_function(head.name(), |b| {
            b.iter(|| {
                let mut store = store.clone();
                let mut tape = Tape::<f32>::new(false);
                black_box(net.forward(&mut tape, &mut store, &input, 0).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_conv, bench_forward);
criterion_main!(benches);
