use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;

use geophony::datasets::threshold_sweep;
use geophony::features::{FeatureConfig, LogMelExtractor, LogMelSpectrogram};
use geophony::nn::{CnnModel, Input, ModelConfig, Task};
use geophony::rng::rng_from;
use geophony::synth::{synth_clip, AcousticConfig};
use geophony::weather::Variable;
use geophony::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn acoustic() -> AcousticConfig {
    AcousticConfig {
        sample_rate: 16_000,
        clip_seconds: 10.0,
        ..Default::default()
    }
}

fn clips(n: u64) -> Vec<Vec<i16>> {
    let cfg = acoustic();
    (0..n)
        .map(|i| {
            let mut r = rng_from(1, &[i]);
            synth_clip((i % 3) as f64, 2.0, 5.0, 80.0, &cfg, &mut r).unwrap().samples
        })
        .collect()
}

fn features(c: &mut Criterion) {
    let audio = clips(16);
    let ex = LogMelExtractor::new(&FeatureConfig::default(), acoustic().sample_rate).unwrap();
    let mut g = c.benchmark_group("log_mel_16_clips");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&audio, |s| ex.log_mel(black_box(s)).unwrap()))
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let audio = clips(16);
    let ex = LogMelExtractor::new(&FeatureConfig { n_mels: 64, ..Default::default() }, acoustic().sample_rate).unwrap();
    let specs: Vec<LogMelSpectrogram> = audio.iter().map(|s| ex.log_mel(s).unwrap()).collect();
    let batch: Vec<Input> = specs.iter().map(Input::from_spectrogram).collect();
    let targets: Vec<Vec<f64>> = (0..batch.len()).map(|i| vec![(i % 2) as f64]).collect();
    let cfg = ModelConfig::individual(Variable::Rain, Task::Classification, 64).with_channels([8, 8, 16, 16], 32);
    let model = CnnModel::init(cfg, 3).unwrap();
    let mut g = c.benchmark_group("gradient_batch_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.loss_and_gradient(black_box(&batch), &targets, exec).unwrap())
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let mut r = rng_from(4, &[]);
    let values: Vec<f64> = (0..20_000).map(|_| r.random::<f64>() * 8.0).collect();
    let labels: Vec<bool> = values.iter().map(|&v| r.random::<f64>() < v / 8.0).collect();
    let mut g = c.benchmark_group("threshold_sweep_20k");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| threshold_sweep(black_box(&values), &labels, 0.001, exec).unwrap())
        });
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let cfg = acoustic();
    let ids: Vec<u64> = (0..8).collect();
    let mut g = c.benchmark_group("synth_8_clips");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&ids, |&i| {
                    let mut r = rng_from(2, &[i]);
                    synth_clip(1.0, 3.0, 5.0, 80.0, &cfg, &mut r).unwrap()
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, features, gradient, sweep, synthesis);
criterion_main!(benches);
