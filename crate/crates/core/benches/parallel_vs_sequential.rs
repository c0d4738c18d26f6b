//! Sequential vs rayon execution of the data-parallel hot spots.
//!
//! Without the `parallel` feature both arms run the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crckd::dataio::{augment_batch, make_blobs, Augment, FeatureKind};
use crckd::models::{ModelSpec, MeanTeacher};
use crckd::par::{map_range, Exec};
use crckd::tensor::kernels;
use crckd::trainer::{evaluate, Method, TrainConfig, Trainer};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_256x256x128");
    let (m, k, n) = (256, 256, 128);
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.007).cos()).collect();
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| kernels::matmul(black_box(&a), black_box(&b), m, k, n, exec))
        });
    }
    g.finish();
}

fn augment(c: &mut Criterion) {
    let mut g = c.benchmark_group("augment_batch");
    let ds = make_blobs(1, 3, &[800, 300, 100], 256, 1.0).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for (name, exec) in MODES {
        g.bench_function(name, |bench| {
            bench.iter(|| augment_batch(&ds, &idx, Augment::Jitter { sigma: 0.1 }, 7, 0, exec))
        });
    }
    g.finish();
}

fn eval(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate_2000");
    let ds = make_blobs(2, 3, &[1200, 500, 300], 32, 1.0).unwrap();
    let spec = ModelSpec {
        input: FeatureKind::Vector { dim: 32 },
        hidden: 128,
        feature_dim: 64,
        proj_dim: 32,
        classes: 3,
    };
    let model = MeanTeacher::init(spec, 3).unwrap();
    for (name, exec) in MODES {
        g.bench_function(name, |bench| bench.iter(|| evaluate(&model.student, &ds, exec).unwrap()));
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("ablation_sweep");
    g.sample_size(10);
    let base = TrainConfig::parse(
        "epochs = 2\nramp_t = 1\nbatch_size = 32\nk_p = 4\nk_n = 32\nhidden = 32\n\
         feature_dim = 16\nproj_dim = 8\nclasses = 3\nblob_counts = 160,60,20\n\
         blob_dim = 8\nholdout = 40\ncheckpoint_every = 0\n",
        None,
    )
    .unwrap();
    let jobs: Vec<TrainConfig> = [Method::B1, Method::B2, Method::Full]
        .into_iter()
        .flat_map(|m| {
            let base = base.clone();
            (0..2).map(move |s| {
                let mut cfg = base.clone();
                cfg.method = m;
                cfg.seed = s;
                cfg
            })
        })
        .collect();
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("6_runs", name), &exec, |bench, &exec| {
            bench.iter(|| {
                map_range(jobs.len(), exec, |j| {
                    Trainer::new(jobs[j].clone()).unwrap().fit(None, None).unwrap().final_eval
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, augment, eval, sweep);
criterion_main!(benches);
