use composer_lab::bench::toy_frechet;
use composer_lab::data::SyntheticDataset;
use composer_lab::{SeededRng, Tape};
use composer_lab_bench::fixture;
use criterion::{criterion_group, criterion_main, Criterion};

fn generation(c: &mut Criterion) {
    let f = fixture(0).unwrap();
    let mut group = c.benchmark_group("generation");
    group.sample_size(10);
    group.bench_function("composer_generate_one_class", |b| {
        b.iter(|| f.composer.generate(&Tape::inference(), &f.net, &[3]).unwrap())
    });
    let sets = f.composer.generate(&Tape::inference(), &f.net, &[3]).unwrap();
    let set = sets[0].detach();
    for (name, updates) in [("sample_static_s50", None), ("sample_composer_s50", Some(&set))] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = SeededRng::new(1);
                f.net.sample_loop(3, 10, 50, updates, None, &mut rng, None).unwrap()
            })
        });
    }
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let real = SyntheticDataset::generate(1, 512, 10, 16).unwrap();
    let fake = SyntheticDataset::generate(2, 100, 10, 16).unwrap();
    c.bench_function("toy_frechet_512_vs_100", |b| b.iter(|| toy_frechet(&real.images, &fake.images).unwrap()));
}

criterion_group!(benches, generation, frechet);
criterion_main!(benches);
