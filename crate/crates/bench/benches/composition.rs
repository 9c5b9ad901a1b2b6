use composer_lab::composition::{apply_inference_path, apply_training_path, merge};
use composer_lab::{Tape, Var};
use composer_lab_bench::linear_case;
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("linear_paths");
    for r in [4usize, 8, 16, 32] {
        let (w, u, x) = linear_case(64, r, 256, 1).unwrap();
        let x = Var::constant(x);
        let wv = Var::constant(w.clone());
        let merged = merge(&w, &u).unwrap();
        group.bench_with_input(BenchmarkId::new("merge", r), &r, |b, _| b.iter(|| merge(black_box(&w), &u).unwrap()));
        group.bench_with_input(BenchmarkId::new("training_path", r), &r, |b, _| {
            b.iter(|| apply_training_path(&Tape::inference(), black_box(&x), &wv, Some(&u)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("inference_path", r), &r, |b, _| {
            b.iter(|| apply_inference_path(&Tape::inference(), black_box(&x), &merged).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, paths);
criterion_main!(benches);
