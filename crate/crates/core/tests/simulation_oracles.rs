//! Simulated scenes checked against geometric and statistical predictions.

mod common;

use std::f64::consts::PI;

use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tfmask_core::array::{align, steering_delays};
use tfmask_core::calibration::{
    offline_calibrate, online_calibrate, wrap_phase, CalibrationFilter, DEFAULT_OFFLINE_PASSES,
};
use tfmask_core::localizer::{direction_to_position, srp_phat, GridConfig};
use tfmask_core::masking::{msc, pdm, welch_cross_spectra, DEFAULT_WELCH_HALF_WIDTH};
use tfmask_core::simulation::{
    diffuse_coherence_analytic, diffuse_field, InterfererSpec, NoiseColor, SignalSource,
};
use tfmask_core::stft::stft_analyze;
use tfmask_core::{
    simulate_scene, ArrayGeometry, CalibrationContext, ChannelStatus, EnhancementConfig,
    MultichannelWave, StftConfig,
};

use common::{tablet_scene, talker};

fn context() -> CalibrationContext {
    let cfg = EnhancementConfig::default();
    CalibrationContext {
        stft: cfg.stft,
        geometry: cfg.geometry.clone(),
        grid: cfg.grid.build(&cfg.geometry).unwrap(),
        failure: cfg.failure,
        max_passes: DEFAULT_OFFLINE_PASSES,
    }
}

fn band_median_abs_phase(filter: &CalibrationFilter, ch: usize) -> f64 {
    // 250 Hz .. 4 kHz at 15.625 Hz per bin.
    let mut v: Vec<f64> = (16..=256)
        .map(|k| wrap_phase(filter.phase()[(ch, k)]).abs())
        .collect();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn aligned_far_field_source_is_in_phase() {
    let geometry = ArrayGeometry::tablet();
    let mut spec = tablet_scene(11, 2.0, 30.0, None);
    spec.source_position = direction_to_position(geometry.centroid(), 30.0, 10.0, 5.0);
    let scene = simulate_scene(&spec).unwrap();
    let config = StftConfig::default();
    let x = stft_analyze(&scene.mixture, &config).unwrap();
    let target = stft_analyze(&scene.target_images, &config).unwrap();
    let noise = stft_analyze(&scene.noise_images, &config).unwrap();
    let loc = steering_delays(&geometry, spec.source_position).unwrap();
    let aligned = align(&x, &loc).unwrap();
    let aligned_target = align(&target, &loc).unwrap();

    // Noise-free images (bins within 20 dB of the peak) isolate the alignment
    // itself. On the mixture, per-bin noise 20 dB down still moves each phase by up
    // to atan(0.1) ~ 0.1 rad, so the typical (median) deviation is checked there.
    let (mut noisy, mut clean) = (Vec::new(), Vec::new());
    let reference = target.channel(0).iter().map(|v| v.norm_sqr()).fold(0.0, f64::max);
    for ch in 1..6 {
        for ((t, k), a) in aligned.channel(ch).indexed_iter() {
            let snr = |c: usize| {
                target.channel(c)[(t, k)].norm_sqr() / noise.channel(c)[(t, k)].norm_sqr()
            };
            if snr(0) > 100.0 && snr(ch) > 100.0 {
                noisy.push((a * aligned.channel(0)[(t, k)].conj()).arg().abs());
            }
            // Padded edge frames do not follow the delay model.
            if t < 4 || t + 4 >= aligned.frames() {
                continue;
            }
            let b = aligned_target.channel(ch)[(t, k)];
            let b0 = aligned_target.channel(0)[(t, k)];
            if b.norm_sqr().min(b0.norm_sqr()) > 1e-2 * reference {
                clean.push((b * b0.conj()).arg().abs());
            }
        }
    }
    noisy.sort_by(f64::total_cmp);
    clean.sort_by(f64::total_cmp);
    assert!(noisy.len() > 1000, "{} qualifying bins", noisy.len());
    let median = noisy[noisy.len() / 2];
    assert!(median < 0.05, "median phase difference {median}");
    let p99 = clean[clean.len() * 99 / 100];
    assert!(p99 < 0.05, "noise-free 99th percentile {p99}");
}

#[test]
fn localizer_returns_the_true_grid_point_without_noise() {
    let cfg = EnhancementConfig::default();
    let grid = cfg.grid.build(&cfg.geometry).unwrap();
    for (i, (az, el)) in [(30.0, 10.0), (-45.0, 0.0), (0.0, -20.0), (150.0, 20.0)]
        .into_iter()
        .enumerate()
    {
        let mut spec = tablet_scene(20 + i as u64, 1.5, 0.0, None);
        spec.diffuse_snr_db = None;
        spec.source_position = talker(&cfg.geometry, az, el);
        let wave = simulate_scene(&spec).unwrap().mixture;
        let x = stft_analyze(&wave, &cfg.stft).unwrap();
        let loc = srp_phat(&x, &cfg.geometry, &grid, &ChannelStatus::all_ok(6)).unwrap();
        let expected = grid
            .candidates()
            .iter()
            .position(|p| common::max_abs_diff(p.iter().copied(), spec.source_position) < 1e-12)
            .unwrap();
        assert_eq!(loc.candidate, expected, "source at az {az} el {el}");
    }
}

#[test]
fn localizer_snaps_off_grid_source_to_nearest_candidate() {
    let cfg = EnhancementConfig::default();
    let grid = cfg.grid.build(&cfg.geometry).unwrap();
    let g = GridConfig::default();
    for (i, (az, el)) in [(31.5, 10.0), (-43.0, 2.0), (1.0, -17.5), (58.0, 8.0)]
        .into_iter()
        .enumerate()
    {
        let mut spec = tablet_scene(40 + i as u64, 2.0, 20.0, None);
        spec.source_position = talker(&cfg.geometry, az, el);
        let wave = simulate_scene(&spec).unwrap().mixture;
        let x = stft_analyze(&wave, &cfg.stft).unwrap();
        let loc = srp_phat(&x, &cfg.geometry, &grid, &ChannelStatus::all_ok(6)).unwrap();
        let near_az = (az / g.azimuth_step_deg).round() * g.azimuth_step_deg;
        let near_el = (el / g.elevation_step_deg).round() * g.elevation_step_deg;
        let nearest = talker(&cfg.geometry, near_az, near_el);
        let d = common::max_abs_diff(loc.location.position, nearest);
        assert!(d < 1e-12, "az {az} el {el}: got {:?}, nearest {nearest:?}", loc.location.position);
    }
}

#[test]
fn phase_difference_of_interferer_matches_geometry() {
    // Two microphones, steered to a target that is silent; only the interferer sounds.
    let geometry = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [0.08, 0.0, 0.0]]).unwrap();
    let target_pos = direction_to_position(geometry.centroid(), 0.0, 0.0, 1.0);
    let interferer_pos = direction_to_position(geometry.centroid(), 60.0, 0.0, 1.0);
    let mut spec = tablet_scene(60, 2.0, 40.0, None);
    spec.geometry = geometry.clone();
    spec.source = SignalSource::WhiteNoise { duration: 2.0 };
    spec.source_position = interferer_pos;
    let wave = simulate_scene(&spec).unwrap().mixture;
    let x = stft_analyze(&wave, &StftConfig::default()).unwrap();
    let target = steering_delays(&geometry, target_pos).unwrap();
    let interferer = steering_delays(&geometry, interferer_pos).unwrap();
    let field = pdm(&align(&x, &target).unwrap(), &[0, 1], &[]).unwrap();
    let dtau = interferer.delays[1] - target.delays[1];
    let mut worst = 0.0f64;
    for k in 13..=448 {
        // 200 Hz .. 7 kHz
        let f = field.bin_frequencies[k];
        let predicted = wrap_phase(2.0 * PI * f * dtau).abs();
        let mut col: Vec<f64> = field.values.index_axis(Axis(1), k).to_vec();
        col.sort_by(f64::total_cmp);
        worst = worst.max((col[col.len() / 2] - predicted).abs());
    }
    assert!(worst < 0.1, "worst median deviation {worst}");
}

#[test]
fn diffuse_coherence_mask_at_one_kilohertz() {
    let d = 0.05;
    let geometry = ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [d, 0.0, 0.0]]).unwrap();
    let config = StftConfig::default();
    let len = 20 * 16000;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let field = diffuse_field(&geometry, len, 16000, 512, NoiseColor::White, &mut rng);
    let x = stft_analyze(&MultichannelWave::new(field, 16000).unwrap(), &config).unwrap();
    let k = 64; // 1 kHz
    let mean_at = |spec, k| {
        let m = msc(&welch_cross_spectra(spec, &[0, 1], DEFAULT_WELCH_HALF_WIDTH).unwrap());
        m.gains().index_axis(Axis(1), k).mean().unwrap()
    };
    let raw = mean_at(&x, k);
    // Finite averaging adds a floor; measure it on independent channels through the
    // same analysis and undo it as `(m - b) / (1 - b)`.
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let independent = diffuse_field(
        &ArrayGeometry::new(vec![[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]).unwrap(),
        len,
        16000,
        512,
        NoiseColor::White,
        &mut rng,
    );
    let floor_spec =
        stft_analyze(&MultichannelWave::new(independent, 16000).unwrap(), &config).unwrap();
    // At 100 m spacing the analytic coherence at 5 kHz is ~1e-4.
    let floor = mean_at(&floor_spec, 320);
    let corrected = (raw - floor) / (1.0 - floor);
    let expected = diffuse_coherence_analytic(1000.0, d, 343.0).powi(2);
    assert!((expected - 0.750).abs() < 1e-3);
    assert!(raw > expected, "finite averaging biases upwards: {raw}");
    assert!((corrected - expected).abs() < 0.1, "raw {raw}, floor {floor}, corrected {corrected}");
}

#[test]
fn calibrated_array_needs_no_correction() {
    let ctx = context();
    let scenes: Vec<MultichannelWave> = (0..10)
        .map(|i| simulate_scene(&tablet_scene(100 + i, 3.0, 20.0, None)).unwrap().mixture)
        .collect();
    let (stage1, _) = offline_calibrate(|| scenes.iter().cloned().map(Ok), &ctx).unwrap();
    for ch in 0..6 {
        let e = band_median_abs_phase(&stage1, ch);
        assert!(e < 0.05, "offline channel {ch}: {e}");
    }
    let extra = simulate_scene(&tablet_scene(120, 3.0, 20.0, None)).unwrap().mixture;
    let stage2 = online_calibrate(&extra, &stage1, &ctx).unwrap();
    for ch in 0..6 {
        let e = band_median_abs_phase(&stage2, ch);
        assert!(e < 0.05, "online channel {ch}: {e}");
    }
}

#[test]
fn interferer_scene_keeps_images_separate() {
    let geometry = ArrayGeometry::tablet();
    let mut spec = tablet_scene(130, 1.0, 10.0, None);
    spec.interferer = Some(InterfererSpec {
        source: SignalSource::Tone {
            duration: 0.5,
            frequency: 700.0,
        },
        position: talker(&geometry, -70.0, 0.0),
        snr_db: 3.0,
    });
    let s = simulate_scene(&spec).unwrap();
    let interferer = s.interferer_images.unwrap();
    assert_eq!(interferer.len(), s.mixture.len());
    // The shorter interferer is zero-padded, up to the spread of its delayed tail.
    let tail = interferer.channel(0).iter().skip(8500).map(|v| v.abs()).fold(0.0, f64::max);
    let head = interferer.channel(0).iter().take(8000).map(|v| v.abs()).fold(0.0, f64::max);
    assert!(tail < 1e-3 * head, "tail {tail} head {head}");
    let p = |w: &MultichannelWave| w.channel(0).iter().map(|v| v * v).sum::<f64>();
    let snr = 10.0 * (p(&s.target_images) / p(&interferer)).log10();
    assert!((snr - 3.0).abs() < 1e-9);
}
