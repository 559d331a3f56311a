use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scratchcnn::gradcheck::naive_conv;
use scratchcnn::layers::conv2d_im2col;
use scratchcnn_bench::{conv_operands, conv_shapes};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv");
    group.sample_size(10);
    for shape in conv_shapes() {
        let (x, k, b) = conv_operands(&shape, 0);
        let (s, p) = (shape.stride, shape.padding);
        group.bench_with_input(BenchmarkId::new("im2col", shape), &shape, |bench, _| {
            bench.iter(|| conv2d_im2col(&x, &k, &b, s, p).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("naive", shape), &shape, |bench, _| {
            bench.iter(|| naive_conv(&x, &k, &b, s, p).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
