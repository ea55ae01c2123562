use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use avse_core::dsp::{StftConfig, StftPlan};
use avse_core::embed::synthetic_embeddings;
use avse_core::engine::{run_offline, synthetic_audio, SessionConfig};
use avse_core::masknet::{MaskNet, ModelConfig, ModelWeights};
use avse_core::mixgen::{mix_waveforms, MixtureSpec};
use avse_core::{exec, Execution, Waveform};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_stft(c: &mut Criterion) {
    let plan = StftPlan::new(StftConfig::default()).unwrap();
    let x = synthetic_audio(16_000 * 30, 1);
    let mut g = c.benchmark_group("stft_30s");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| plan.stft(&x, mode)));
    }
    g.finish();
}

fn offline_enhance(c: &mut Criterion) {
    let net = MaskNet::from_weights(&ModelWeights::random(ModelConfig::tiny(), 1).unwrap()).unwrap();
    let x = Waveform::new(synthetic_audio(16_000 * 10, 2), 16_000).unwrap();
    let emb = synthetic_embeddings(250, 512, 0).unwrap();
    let mut g = c.benchmark_group("offline_enhance_10s");
    g.sample_size(10);
    for (name, mode) in MODES {
        let cfg = SessionConfig {
            execution: mode,
            ..SessionConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_offline(&cfg, &net, &x, &emb).unwrap())
        });
    }
    g.finish();
}

fn mixture_batch(c: &mut Criterion) {
    // In-memory sources so the comparison measures mixing, not disk reads.
    let target = Waveform::new(synthetic_audio(16_000 * 8, 3), 16_000).unwrap();
    let noise = Waveform::new(synthetic_audio(16_000 * 8, 4), 16_000).unwrap();
    let specs: Vec<MixtureSpec> = (0..64)
        .map(|i| MixtureSpec {
            target_path: "t.wav".into(),
            interferer_path: "n.wav".into(),
            snr_db: -5.0 + 10.0 * i as f64 / 63.0,
            target_offset_s: 0.01 * i as f64,
            interferer_offset_s: 0.02 * i as f64,
            duration_s: 5.0,
            seed: i,
        })
        .collect();
    let mut g = c.benchmark_group("mixture_batch_64");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::map_slice(mode, &specs, |s| mix_waveforms(&target, &noise, s).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, batch_stft, offline_enhance, mixture_batch);
criterion_main!(benches);
