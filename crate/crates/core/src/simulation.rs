//! Synthetic multichannel scenes with exactly known ground truth.
//!
//! Point sources are rendered with band-limited fractional delays (phase ramps on
//! a zero-padded whole-signal FFT) and `1/r` attenuation. The diffuse field is a
//! superposition of independent equal-power plane waves from directions drawn
//! uniformly on the sphere, synthesized directly in the frequency domain.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::array::{distance, ArrayGeometry, Position};
use crate::audio::MultichannelWave;
use crate::error::{Error, Result};

/// Minimum number of plane waves in a diffuse field.
pub const MIN_PLANE_WAVES: usize = 64;

/// Source signal of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SignalSource {
    Samples { samples: Vec<f64> },
    /// Harmonic syllables with formant envelopes, pauses and occasional fricatives.
    SpeechLike { duration: f64 },
    WhiteNoise { duration: f64 },
    Tone { duration: f64, frequency: f64 },
}

impl SignalSource {
    pub fn render(&self, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let fs = f64::from(sample_rate);
        let len = |d: f64| (d * fs).round().max(0.0) as usize;
        match self {
            SignalSource::Samples { samples } => samples.clone(),
            SignalSource::SpeechLike { duration } => speech_like(len(*duration), sample_rate, rng),
            SignalSource::WhiteNoise { duration } => (0..len(*duration))
                .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect::<Vec<f64>>(),
            SignalSource::Tone {
                duration,
                frequency,
            } => (0..len(*duration))
                .map(|n| 0.3 * (2.0 * PI * frequency * n as f64 / fs).sin())
                .collect(),
        }
    }
}

/// Deterministic speech-like test signal.
pub fn speech_like(len: usize, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = f64::from(sample_rate);
    let mut out = vec![0.0; len];
    let mut pos = (0.05 * fs) as usize;
    let f0_base = rng.random_range(100.0..200.0);
    while pos < len {
        let syl_len = (rng.random_range(0.12..0.32) * fs) as usize;
        let end = (pos + syl_len).min(len);
        let f0 = f0_base * rng.random_range(0.85..1.2);
        let glide = rng.random_range(-0.15..0.15);
        let formants = [
            rng.random_range(300.0..850.0),
            rng.random_range(900.0..2300.0),
            rng.random_range(2300.0..3200.0),
        ];
        let level = rng.random_range(0.5..1.0);
        let n = (end - pos) as f64;
        let mut phases = vec![0.0f64; 64];
        for (i, t) in (pos..end).enumerate() {
            let frac = i as f64 / n;
            let env = (PI * frac).sin().powf(0.7) * level;
            let f = f0 * (1.0 + glide * frac);
            let mut v = 0.0;
            for (h, ph) in phases.iter_mut().enumerate() {
                let fh = f * (h + 1) as f64;
                if fh > 0.45 * fs || fh > 5000.0 {
                    break;
                }
                *ph += 2.0 * PI * fh / fs;
                let gain: f64 = formants
                    .iter()
                    .enumerate()
                    .map(|(j, &fm)| {
                        let bw = 80.0 + 60.0 * j as f64;
                        (-(fh - fm).powi(2) / (2.0 * bw * bw)).exp() / (j + 1) as f64
                    })
                    .sum::<f64>()
                    + 0.02;
                v += gain * ph.sin();
            }
            out[t] += 0.15 * env * v;
        }
        // Occasional fricative: differentiated noise burst after the vowel.
        if rng.random_bool(0.3) && end < len {
            let fric = ((rng.random_range(0.04..0.1) * fs) as usize).min(len - end);
            let mut prev = 0.0;
            for i in 0..fric {
                let w: f64 = StandardNormal.sample(rng);
                let env = (PI * i as f64 / fric as f64).sin();
                out[end + i] += 0.02 * env * (w - prev);
                prev = w;
            }
        }
        let gap = if rng.random_bool(0.2) {
            rng.random_range(0.3..0.6)
        } else {
            rng.random_range(0.04..0.15)
        };
        pos = end + (gap * fs) as usize;
    }
    // Peak 0.25 leaves headroom for added noise in 16-bit files.
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.25 / peak);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseColor {
    #[default]
    White,
    /// Power falling as `1/f` above 50 Hz.
    Pink,
}

/// Phase response mismatch injected into the microphones.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SensorPhase {
    #[default]
    None,
    /// Frequency-independent offset per channel, radians.
    Constant { offsets: Vec<f64> },
    /// Offsets sampled at `frequencies` (Hz, ascending), interpolated linearly and
    /// held constant outside the range. `phases[channel][i]` pairs with
    /// `frequencies[i]`.
    Profile {
        frequencies: Vec<f64>,
        phases: Vec<Vec<f64>>,
    },
}

impl SensorPhase {
    /// Offset of `channel` at `freq` Hz.
    pub fn at(&self, channel: usize, freq: f64) -> f64 {
        match self {
            SensorPhase::None => 0.0,
            SensorPhase::Constant { offsets } => offsets.get(channel).copied().unwrap_or(0.0),
            SensorPhase::Profile {
                frequencies,
                phases,
            } => {
                let p = match phases.get(channel) {
                    Some(p) if !p.is_empty() => p,
                    _ => return 0.0,
                };
                let i = frequencies.partition_point(|&f| f <= freq);
                if i == 0 {
                    p[0]
                } else if i >= frequencies.len() {
                    p[frequencies.len() - 1]
                } else {
                    let (f0, f1) = (frequencies[i - 1], frequencies[i]);
                    let w = (freq - f0) / (f1 - f0);
                    p[i - 1] * (1.0 - w) + p[i] * w
                }
            }
        }
    }

    fn is_none(&self) -> bool {
        matches!(self, SensorPhase::None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfererSpec {
    pub source: SignalSource,
    pub position: Position,
    /// Target-to-interferer power ratio at channel 0, dB.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub geometry: ArrayGeometry,
    #[serde(default = "default_rate")]
    pub sample_rate: u32,
    pub source: SignalSource,
    pub source_position: Position,
    /// Target-to-diffuse power ratio at channel 0, dB; absent means no diffuse noise.
    #[serde(default)]
    pub diffuse_snr_db: Option<f64>,
    #[serde(default)]
    pub diffuse_color: NoiseColor,
    #[serde(default = "default_plane_waves")]
    pub plane_waves: usize,
    #[serde(default)]
    pub interferer: Option<InterfererSpec>,
    #[serde(default)]
    pub sensor_phase: SensorPhase,
    pub seed: u64,
}

fn default_rate() -> u32 {
    16000
}

fn default_plane_waves() -> usize {
    512
}

impl SceneSpec {
    /// Speech-like talker in front of the tablet array with diffuse noise.
    pub fn tablet_default(seed: u64) -> Self {
        Self {
            geometry: ArrayGeometry::tablet(),
            sample_rate: default_rate(),
            source: SignalSource::SpeechLike { duration: 4.0 },
            source_position: crate::localizer::direction_to_position(
                ArrayGeometry::tablet().centroid(),
                20.0,
                10.0,
                0.4,
            ),
            diffuse_snr_db: Some(0.0),
            diffuse_color: NoiseColor::White,
            plane_waves: default_plane_waves(),
            interferer: None,
            sensor_phase: SensorPhase::None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        let check_pos = |p: &Position| -> Result<()> {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("non-finite source position".into()));
            }
            if self.geometry.mic_positions.iter().any(|m| distance(m, p) < 1e-6) {
                return Err(Error::InvalidConfig("source coincides with a microphone".into()));
            }
            Ok(())
        };
        check_pos(&self.source_position)?;
        if let Some(i) = &self.interferer {
            check_pos(&i.position)?;
            if !i.snr_db.is_finite() {
                return Err(Error::InvalidConfig("interferer SNR must be finite".into()));
            }
        }
        if let Some(snr) = self.diffuse_snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidConfig("diffuse SNR must be finite".into()));
            }
            if self.plane_waves < MIN_PLANE_WAVES {
                return Err(Error::InvalidConfig(format!(
                    "diffuse field needs at least {MIN_PLANE_WAVES} plane waves"
                )));
            }
        }
        Ok(())
    }
}

/// Rendered scene. `mixture = target_images + noise_images` unless sensor phase
/// offsets are injected, which only touch the mixture.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mixture: MultichannelWave,
    pub target_images: MultichannelWave,
    /// Diffuse field plus interferer.
    pub noise_images: MultichannelWave,
    pub interferer_images: Option<MultichannelWave>,
}

fn fft_real(x: &[f64], n: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(n)
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    buf
}

/// Signed frequency of FFT bin `k` of an `n`-point transform.
fn signed_freq(k: usize, n: usize, fs: f64) -> f64 {
    if k <= n / 2 {
        k as f64 * fs / n as f64
    } else {
        (k as f64 - n as f64) * fs / n as f64
    }
}

/// Renders a point source at every microphone: delay `r_m / c`, gain `r_0 / r_m`.
pub fn render_point_source(
    signal: &[f64],
    position: Position,
    geometry: &ArrayGeometry,
    sample_rate: u32,
) -> Array2<f64> {
    let fs = f64::from(sample_rate);
    let len = signal.len();
    let dists: Vec<f64> = geometry
        .mic_positions
        .iter()
        .map(|m| distance(m, &position))
        .collect();
    let max_delay = dists.iter().copied().fold(0.0, f64::max) / geometry.speed_of_sound;
    let n = (len + (max_delay * fs).ceil() as usize + 256).next_power_of_two();
    let mut planner = FftPlanner::new();
    let spectrum = fft_real(signal, n, &mut planner);
    let inverse = planner.plan_fft_inverse(n);
    let mut out = Array2::zeros((dists.len(), len));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (m, &r) in dists.iter().enumerate() {
        let delay = r / geometry.speed_of_sound;
        let gain = dists[0] / r / n as f64;
        for (k, b) in buf.iter_mut().enumerate() {
            let f = signed_freq(k, n, fs);
            *b = spectrum[k] * Complex64::from_polar(gain, -2.0 * PI * f * delay);
        }
        inverse.process(&mut buf);
        out.row_mut(m)
            .iter_mut()
            .zip(&buf)
            .for_each(|(o, v)| *o = v.re);
    }
    out
}

/// Isotropic noise at every microphone, unit mean power per channel in expectation.
pub fn diffuse_field(
    geometry: &ArrayGeometry,
    len: usize,
    sample_rate: u32,
    plane_waves: usize,
    color: NoiseColor,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let fs = f64::from(sample_rate);
    let n = len.next_power_of_two().max(2);
    let bins = n / 2 + 1;
    let m = geometry.channel_count();
    let c = geometry.speed_of_sound;
    let shape: Vec<f64> = (0..bins)
        .map(|k| match color {
            NoiseColor::White => 1.0,
            NoiseColor::Pink => {
                let f = (k as f64 * fs / n as f64).max(50.0);
                (1000.0 / f).sqrt()
            }
        })
        .collect();
    let mut spectra = vec![vec![Complex64::new(0.0, 0.0); bins]; m];
    let amp = (1.0 / plane_waves as f64).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
    let mut draws = vec![Complex64::new(0.0, 0.0); bins];
    for _ in 0..plane_waves {
        let z: f64 = rng.random_range(-1.0..=1.0);
        let az: f64 = rng.random_range(0.0..2.0 * PI);
        let rho = (1.0 - z * z).sqrt();
        let dir = [rho * az.cos(), rho * az.sin(), z];
        for (k, d) in draws.iter_mut().enumerate() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *d = Complex64::new(re, im) * (amp * shape[k]);
        }
        draws[0] = Complex64::new(0.0, 0.0);
        draws[bins - 1] = Complex64::new(0.0, 0.0);
        for (mic, spec) in geometry.mic_positions.iter().zip(spectra.iter_mut()) {
            // A wave arriving from `dir` reaches microphones further along `dir` first.
            let tau = -(dir[0] * mic[0] + dir[1] * mic[1] + dir[2] * mic[2]) / c;
            let step = Complex64::from_polar(1.0, -2.0 * PI * fs / n as f64 * tau);
            let mut phasor = Complex64::new(1.0, 0.0);
            for (k, (s, d)) in spec.iter_mut().zip(&draws).enumerate() {
                *s += d * phasor;
                phasor *= step;
                if k % 4096 == 4095 {
                    phasor /= phasor.norm();
                }
            }
        }
    }
    let mut planner = FftPlanner::new();
    let inverse = planner.plan_fft_inverse(n);
    let mut out = Array2::zeros((m, len));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    // Each filled bin has unit expected power (times the colour shape); the real
    // part of the one-sided inverse carries half of the total.
    let total: f64 = shape[1..bins - 1].iter().map(|s| s * s).sum();
    let norm = (2.0 / total).sqrt();
    for (ch, spec) in spectra.iter().enumerate() {
        buf.fill(Complex64::new(0.0, 0.0));
        buf[..bins].copy_from_slice(spec);
        inverse.process(&mut buf);
        out.row_mut(ch)
            .iter_mut()
            .zip(&buf)
            .for_each(|(o, v)| *o = v.re * norm);
    }
    out
}

/// Applies per-channel phase offsets with a zero-padded FFT.
pub fn apply_sensor_phase(samples: &mut Array2<f64>, phase: &SensorPhase, sample_rate: u32) {
    if phase.is_none() {
        return;
    }
    let fs = f64::from(sample_rate);
    let len = samples.ncols();
    let n = (2 * len).next_power_of_two();
    let mut planner = FftPlanner::new();
    let inverse = planner.plan_fft_inverse(n);
    for (ch, mut row) in samples.axis_iter_mut(Axis(0)).enumerate() {
        let mut spec = fft_real(row.as_slice().expect("contiguous row"), n, &mut planner);
        for (k, s) in spec.iter_mut().enumerate() {
            if k == 0 || k == n / 2 {
                continue;
            }
            let f = signed_freq(k, n, fs);
            let phi = phase.at(ch, f.abs()) * f.signum();
            *s *= Complex64::from_polar(1.0, phi);
        }
        inverse.process(&mut spec);
        row.iter_mut()
            .zip(&spec)
            .for_each(|(o, v)| *o = v.re / n as f64);
    }
}

fn channel_power(x: &Array2<f64>, ch: usize) -> f64 {
    x.row(ch).iter().map(|v| v * v).sum::<f64>() / x.ncols().max(1) as f64
}

fn scale_to_snr(noise: &mut Array2<f64>, target_power: f64, snr_db: f64) {
    let p = channel_power(noise, 0);
    if p > 0.0 {
        *noise *= (target_power / (p * 10f64.powf(snr_db / 10.0))).sqrt();
    }
}

/// Renders a scene. Identical specs give identical samples.
pub fn simulate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let fs = spec.sample_rate;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(k);
        rng
    };
    let signal = spec.source.render(fs, &mut stream(1));
    let len = signal.len();
    if len == 0 {
        return Err(Error::InvalidConfig("source signal is empty".into()));
    }
    let target = render_point_source(&signal, spec.source_position, &spec.geometry, fs);
    let target_power = channel_power(&target, 0);
    let mut noise = Array2::<f64>::zeros(target.dim());

    let interferer_images = match &spec.interferer {
        Some(i) => {
            let mut sig = i.source.render(fs, &mut stream(2));
            sig.resize(len, 0.0);
            let mut img = render_point_source(&sig, i.position, &spec.geometry, fs);
            scale_to_snr(&mut img, target_power, i.snr_db);
            noise += &img;
            Some(img)
        }
        None => None,
    };
    if let Some(snr) = spec.diffuse_snr_db {
        let mut diffuse = diffuse_field(
            &spec.geometry,
            len,
            fs,
            spec.plane_waves,
            spec.diffuse_color,
            &mut stream(3),
        );
        scale_to_snr(&mut diffuse, target_power, snr);
        noise += &diffuse;
    }
    let mut mixture = &target + &noise;
    apply_sensor_phase(&mut mixture, &spec.sensor_phase, fs);
    Ok(Scene {
        mixture: MultichannelWave::new(mixture, fs)?,
        target_images: MultichannelWave::new(target, fs)?,
        noise_images: MultichannelWave::new(noise, fs)?,
        interferer_images: interferer_images
            .map(|i| MultichannelWave::new(i, fs))
            .transpose()?,
    })
}

/// Coherence of an isotropic field between two points `d` metres apart:
/// `sin(x) / x` with `x = 2 pi f d / c`.
pub fn diffuse_coherence_analytic(freq: f64, d: f64, c: f64) -> f64 {
    let x = 2.0 * PI * freq * d / c;
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(d: f64) -> ArrayGeometry {
        ArrayGeometry::new(vec![[0.0; 3], [d, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn analytic_coherence_values() {
        assert_eq!(diffuse_coherence_analytic(1000.0, 0.0, 343.0), 1.0);
        // x = 2 pi 1000 0.05 / 343 = 0.915916; sin(x)/x computed independently.
        let x: f64 = 2.0 * PI * 50.0 / 343.0;
        assert!((x - 0.915_916).abs() < 1e-6);
        let g = diffuse_coherence_analytic(1000.0, 0.05, 343.0);
        assert!((g - 0.8659).abs() < 1e-3, "{g}");
        // First zero at x = pi.
        let f_zero = 343.0 / (2.0 * 0.05);
        assert!(diffuse_coherence_analytic(f_zero, 0.05, 343.0).abs() < 1e-12);
    }

    #[test]
    fn point_source_delay_matches_geometry() {
        // An impulse lands at r / c seconds.
        let mut sig = vec![0.0; 2000];
        sig[100] = 1.0;
        let g = ArrayGeometry::new(vec![[0.0; 3], [0.343, 0.0, 0.0]]).unwrap();
        let img = render_point_source(&sig, [-0.343, 0.0, 0.0], &g, 16000);
        let argmax = |ch: usize| {
            img.row(ch)
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        };
        assert_eq!(argmax(0).0, 116);
        assert_eq!(argmax(1).0, 132);
        assert!((argmax(0).1 - 1.0).abs() < 1e-9);
        assert!((argmax(1).1 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn diffuse_field_has_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = diffuse_field(&pair(0.05), 32000, 16000, 64, NoiseColor::White, &mut rng);
        for ch in 0..2 {
            let p = channel_power(&d, ch);
            assert!((p - 1.0).abs() < 0.1, "{p}");
        }
    }

    #[test]
    fn noiseless_mixture_equals_target() {
        let mut spec = SceneSpec::tablet_default(3);
        spec.diffuse_snr_db = None;
        spec.source = SignalSource::SpeechLike { duration: 0.5 };
        let s = simulate_scene(&spec).unwrap();
        assert_eq!(s.mixture, s.target_images);
        assert!(s.noise_images.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixture_is_sum_of_images() {
        let mut spec = SceneSpec::tablet_default(4);
        spec.source = SignalSource::SpeechLike { duration: 0.5 };
        spec.plane_waves = 64;
        let s = simulate_scene(&spec).unwrap();
        let sum = s.target_images.samples() + s.noise_images.samples();
        assert_eq!(s.mixture.samples(), &sum);
    }

    #[test]
    fn same_seed_same_scene() {
        let mut spec = SceneSpec::tablet_default(5);
        spec.source = SignalSource::SpeechLike { duration: 0.5 };
        spec.plane_waves = 64;
        let a = simulate_scene(&spec).unwrap();
        let b = simulate_scene(&spec).unwrap();
        assert_eq!(a.mixture, b.mixture);
        spec.seed = 6;
        let c = simulate_scene(&spec).unwrap();
        assert_ne!(a.mixture, c.mixture);
    }

    #[test]
    fn requested_snr_is_met() {
        let mut spec = SceneSpec::tablet_default(7);
        spec.source = SignalSource::SpeechLike { duration: 1.0 };
        spec.diffuse_snr_db = Some(5.0);
        spec.plane_waves = 64;
        let s = simulate_scene(&spec).unwrap();
        let pt = channel_power(s.target_images.samples(), 0);
        let pn = channel_power(s.noise_images.samples(), 0);
        assert!((10.0 * (pt / pn).log10() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn constant_sensor_phase_rotates_tone() {
        let fs = 16000;
        let len = 8000;
        let tone: Vec<f64> = (0..len)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / fs as f64).cos())
            .collect();
        let mut x = Array2::from_shape_vec((1, len), tone).unwrap();
        apply_sensor_phase(&mut x, &SensorPhase::Constant { offsets: vec![0.5] }, fs);
        // cos(wt) -> cos(wt + 0.5) away from the edges.
        for n in 2000..2100 {
            let expected = (2.0 * PI * 1000.0 * n as f64 / fs as f64 + 0.5).cos();
            assert!((x[(0, n)] - expected).abs() < 1e-3);
        }
    }

    #[test]
    fn phase_profile_interpolates() {
        let p = SensorPhase::Profile {
            frequencies: vec![0.0, 1000.0],
            phases: vec![vec![0.0, 1.0]],
        };
        assert!((p.at(0, 500.0) - 0.5).abs() < 1e-12);
        assert_eq!(p.at(0, 4000.0), 1.0);
        assert_eq!(p.at(3, 100.0), 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SceneSpec::tablet_default(1);
        spec.source_position = spec.geometry.mic_positions[0];
        assert!(simulate_scene(&spec).is_err());
        let mut spec = SceneSpec::tablet_default(1);
        spec.plane_waves = 10;
        assert!(simulate_scene(&spec).is_err());
    }

    #[test]
    fn speech_like_has_pauses_and_bounded_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = speech_like(48000, 16000, &mut rng);
        assert!(s.iter().all(|v| v.abs() < 1.0));
        let frame_energy: Vec<f64> = s.chunks(256).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let max = frame_energy.iter().copied().fold(0.0, f64::max);
        let quiet = frame_energy.iter().filter(|&&e| e < 1e-4 * max).count();
        assert!(quiet > frame_energy.len() / 10, "{quiet}");
    }
}
