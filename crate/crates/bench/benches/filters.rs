use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bkf_bench::Fixture;
use bkf_core::bknet::{bknet_step, BknetState};
use bkf_core::filters::{arcsin_covariance, bkf_predict, bkf_update, rbkf_predict, rbkf_update, reduced_arcsin_covariance};
use bkf_core::{run_filter, GainNetwork, NetworkConfig, Variant};

const ADC_COUNTS: [usize; 4] = [1, 8, 32, 128];

fn predict(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict");
    for adc in ADC_COUNTS {
        let f = Fixture::lorenz(adc, 20).unwrap();
        g.bench_with_input(BenchmarkId::new("bkf", adc), &f, |b, f| b.iter(|| bkf_predict(&f.state, &f.model).unwrap()));
        g.bench_with_input(BenchmarkId::new("rbkf", adc), &f, |b, f| {
            b.iter(|| rbkf_predict(&f.state, &f.model, &f.projection).unwrap())
        });
    }
    g.finish();
}

fn update(c: &mut Criterion) {
    let mut g = c.benchmark_group("update");
    for adc in ADC_COUNTS {
        let f = Fixture::lorenz(adc, 20).unwrap();
        let full = bkf_predict(&f.state, &f.model).unwrap();
        let r = f.bits(&full).unwrap();
        g.bench_with_input(BenchmarkId::new("bkf", adc), &adc, |b, _| b.iter(|| bkf_update(&full, &r).unwrap()));

        let reduced = rbkf_predict(&f.state, &f.model, &f.projection).unwrap();
        let r_star = f.projection.apply(&f.bits(&reduced).unwrap()).unwrap();
        g.bench_with_input(BenchmarkId::new("rbkf", adc), &adc, |b, _| {
            b.iter(|| rbkf_update(&reduced, &r_star, &f.projection).unwrap())
        });
    }
    g.finish();
}

fn arcsin(c: &mut Criterion) {
    let mut g = c.benchmark_group("arcsin");
    for adc in [8, 64] {
        let f = Fixture::lorenz(adc, 20).unwrap();
        let p = bkf_predict(&f.state, &f.model).unwrap().p;
        g.bench_with_input(BenchmarkId::new("full", adc), &p, |b, p| b.iter(|| arcsin_covariance(p).unwrap()));
        g.bench_with_input(BenchmarkId::new("reduced", adc), &p, |b, p| {
            b.iter(|| reduced_arcsin_covariance(p, &f.projection).unwrap())
        });
    }
    g.finish();
}

fn sequence(c: &mut Criterion) {
    let mut g = c.benchmark_group("sequence_200");
    g.sample_size(10);
    for adc in [1, 64] {
        let f = Fixture::lorenz(adc, 200).unwrap();
        for v in [Variant::Bkf, Variant::Rbkf] {
            g.bench_with_input(BenchmarkId::new(v.name(), adc), &f, |b, f| {
                b.iter(|| run_filter(&f.model, &f.bank, v, &f.sequence, &f.sigma0).unwrap())
            });
        }
    }
    g.finish();
}

fn bknet(c: &mut Criterion) {
    let f = Fixture::lorenz(1, 20).unwrap();
    let net = GainNetwork::new(NetworkConfig::new(3, 3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let start = BknetState::new(&net, f.state.x.clone(), &f.sigma0).unwrap();
    let prior = bkf_predict(&f.state, &f.model).unwrap();
    let r = f.bits(&prior).unwrap();
    c.bench_function("bknet_step", |b| {
        b.iter(|| {
            let mut s = start.clone();
            bknet_step(&mut s, &r, &f.model, &net).unwrap();
            s
        })
    });
}

criterion_group!(benches, predict, update, arcsin, sequence, bknet);
criterion_main!(benches);
