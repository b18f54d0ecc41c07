use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tfmask_bench::tablet_mixture;
use tfmask_core::array::{align, steering_delays};
use tfmask_core::beamformer::{estimate_noise_covariance, mvdr_weights};
use tfmask_core::localizer::srp_phat;
use tfmask_core::masking::{msc, pdm, pdm_mask, welch_cross_spectra};
use tfmask_core::stft::{stft_analyze, stft_synthesize};
use tfmask_core::{enhance_utterance, ChannelStatus, EnhancementConfig};

fn stages(c: &mut Criterion) {
    let cfg = EnhancementConfig::default();
    let wave = tablet_mixture();
    let spec = stft_analyze(&wave, &cfg.stft).unwrap();
    let grid = cfg.grid.build(&cfg.geometry).unwrap();
    let status = ChannelStatus::all_ok(wave.channel_count());
    let channels = status.usable();
    let loc = srp_phat(&spec, &cfg.geometry, &grid, &status).unwrap().location;
    let aligned = align(&spec, &loc).unwrap();
    let fs = f64::from(wave.sample_rate());

    let mut g = c.benchmark_group("4s_6ch");
    g.sample_size(10);
    g.bench_function("stft_analyze", |b| b.iter(|| stft_analyze(black_box(&wave), &cfg.stft).unwrap()));
    g.bench_function("stft_synthesize", |b| b.iter(|| stft_synthesize(black_box(&spec)).unwrap()));
    g.bench_function("srp_phat_504", |b| {
        b.iter(|| srp_phat(black_box(&spec), &cfg.geometry, &grid, &status).unwrap())
    });
    g.bench_function("mvdr", |b| {
        b.iter(|| {
            let cov = estimate_noise_covariance(black_box(&spec), &status, &cfg.covariance).unwrap();
            mvdr_weights(&cov, &loc).unwrap()
        })
    });
    g.bench_function("msc", |b| {
        b.iter(|| msc(&welch_cross_spectra(black_box(&aligned), &channels, cfg.welch_halfwidth).unwrap()))
    });
    g.bench_function("pdm", |b| {
        b.iter(|| pdm_mask(&pdm(black_box(&aligned), &channels, &[]).unwrap(), fs))
    });
    g.bench_function("steering_delays", |b| {
        b.iter(|| steering_delays(&cfg.geometry, black_box(grid.candidates()[0])).unwrap())
    });
    g.bench_function("enhance_utterance", |b| b.iter(|| enhance_utterance(&cfg, black_box(&wave)).unwrap()));
    g.finish();
}

criterion_group!(benches, stages);
criterion_main!(benches);
