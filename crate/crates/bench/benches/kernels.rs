use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dgfn_core::deform::{deform_conv_backward, deform_conv_forward};
use dgfn_core::dgconv::{dgconv_backward, dgconv_forward};
use dgfn_core::{
    BackwardMode, DGConvParams, GaborBank, LayerShape, ModelSpec, Network, OffsetField,
    OrientedFeature, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 32;
const CHANNELS: usize = 16;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn plain_kernels(c: &mut Criterion) {
    let mut r = rng();
    let x = Tensor::uniform(&[CHANNELS, SIDE, SIDE], 1.0, &mut r).unwrap();
    let w = Tensor::uniform(&[CHANNELS, CHANNELS, 3, 3], 0.1, &mut r).unwrap();
    let off =
        OffsetField::new(Tensor::uniform(&[18, SIDE, SIDE], 0.5, &mut r).unwrap(), 3).unwrap();
    let y = deform_conv_forward(&x, &w, &off, 1, 1).unwrap();
    let gy = Tensor::uniform(y.shape(), 1.0, &mut r).unwrap();

    c.bench_function("conv2d_naive 16x32x32 -> 16", |b| {
        b.iter(|| dgfn_core::tensor::conv2d_naive(black_box(&x), &w, 1, 1).unwrap())
    });
    c.bench_function("deform_conv_forward 16x32x32 -> 16", |b| {
        b.iter(|| deform_conv_forward(black_box(&x), &w, &off, 1, 1).unwrap())
    });
    c.bench_function("deform_conv_backward 16x32x32 -> 16", |b| {
        b.iter(|| deform_conv_backward(black_box(&gy), &x, &w, &off, 1, 1).unwrap())
    });
}

fn dgconv_kernels(c: &mut Criterion) {
    let mut r = rng();
    let shape = LayerShape::new(4, 4, 3, 4, 4).unwrap();
    let (sigma, lambda) = GaborBank::default_params(3);
    let bank = Arc::new(GaborBank::new(4, 3, sigma, lambda).unwrap());
    let p = DGConvParams::init(&shape, bank, &mut r).unwrap();
    let x =
        OrientedFeature::new(Tensor::uniform(&[4, 4, SIDE, SIDE], 1.0, &mut r).unwrap()).unwrap();
    let (y, cache) = dgconv_forward(&x, &p, 1, 1).unwrap();
    let gy =
        OrientedFeature::new(Tensor::uniform(y.tensor().shape(), 1.0, &mut r).unwrap()).unwrap();

    c.bench_function("dgconv_forward U4 V4 N4 M4 32x32", |b| {
        b.iter(|| dgconv_forward(black_box(&x), &p, 1, 1).unwrap())
    });
    for (name, mode) in [
        ("exact", BackwardMode::Exact),
        ("paper", BackwardMode::Paper),
    ] {
        c.bench_function(&format!("dgconv_backward {name} U4 V4 N4 M4 32x32"), |b| {
            b.iter(|| dgconv_backward(black_box(&gy), &cache, &p, mode).unwrap())
        });
    }
}

fn network_step(c: &mut Criterion) {
    let mut r = rng();
    let net = Network::new(&ModelSpec::default(), &mut r).unwrap();
    let image = Tensor::uniform(&[1, SIDE, SIDE], 1.0, &mut r).unwrap();
    c.bench_function("network loss_and_grads default 32x32", |b| {
        b.iter(|| {
            net.loss_and_grads(black_box(&image), &[1], None, BackwardMode::Exact)
                .unwrap()
        })
    });
}

criterion_group!(benches, plain_kernels, dgconv_kernels, network_step);
criterion_main!(benches);
