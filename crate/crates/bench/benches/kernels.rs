use std::hint::black_box;

use artiqc_core::artsim::add_motion;
use artiqc_core::diffnet::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use artiqc_core::encoder::{self, encode, EncoderConfig};
use artiqc_core::flow::{log_density, FlowModel};
use artiqc_core::phantom;
use artiqc_core::volio::center_slices;
use artiqc_core::Embedding;
use criterion::{criterion_group, criterion_main, Criterion};

fn signal(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.37 + phase).sin()).collect()
}

fn conv(c: &mut Criterion) {
    let g = ConvGeom { in_c: 16, in_h: 32, in_w: 32, out_c: 8, kernel: 3, stride: 1, pad: 1 };
    let x = signal(g.in_len(), 0.0);
    let w = signal(g.out_c * g.in_c * 9, 1.0);
    let b = vec![0.1; g.out_c];
    let grad_out = signal(g.out_len(), 2.0);
    let mut out = vec![0.0; g.out_len()];
    c.bench_function("conv2d_forward 16x32x32 -> 8", |bench| {
        bench.iter(|| conv2d_forward(&g, black_box(&x), &w, Some(&b), &mut out))
    });
    let (mut gx, mut gw, mut gb) = (vec![0.0; g.in_len()], vec![0.0; w.len()], vec![0.0; g.out_c]);
    c.bench_function("conv2d_backward 16x32x32 -> 8", |bench| {
        bench.iter(|| conv2d_backward(&g, black_box(&x), &w, &grad_out, Some(&mut gx), &mut gw, Some(&mut gb)))
    });
}

fn encoder_forward(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let params = encoder::init_params(&cfg, 0).unwrap();
    let volume = phantom::generate([64, 64, 16], 1).unwrap().volume;
    let slice = center_slices(&volume, 1, cfg.input_size).unwrap().remove(0);
    c.bench_function("encode 64x64 default encoder", |bench| {
        bench.iter(|| encode(black_box(&slice), &params, &cfg).unwrap())
    });
    c.bench_function("add_motion 64x64", |bench| bench.iter(|| add_motion(black_box(&slice), 0.6, 3).unwrap()));
}

fn flow_density(c: &mut Criterion) {
    let model = FlowModel::randomized(4, 0.3);
    let points: Vec<Embedding> = (0..256).map(|i| Embedding([(i as f64 * 0.1).sin() * 2.0, (i as f64 * 0.07).cos() * 2.0])).collect();
    c.bench_function("flow log_density x256", |bench| {
        bench.iter(|| points.iter().map(|m| log_density(&model, black_box(m))).sum::<f64>())
    });
}

criterion_group!(benches, conv, encoder_forward, flow_density);
criterion_main!(benches);
