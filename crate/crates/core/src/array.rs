//! Array geometry, steering delays, STFT-domain delay alignment and the
//! microphone failure detector.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Axis;
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelWave;
use crate::error::{Error, Result};
use crate::stft::Spectrogram;

pub type Position = [f64; 3];

pub(crate) fn distance(a: &Position, b: &Position) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Microphone positions plus the channels left out of pair statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayGeometry {
    /// Metres, one entry per channel.
    pub mic_positions: Vec<Position>,
    /// m/s.
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
    /// Zero-based channel indices excluded from phase-difference pairs.
    #[serde(default)]
    pub pdm_excluded: BTreeSet<usize>,
}

fn default_speed_of_sound() -> f64 {
    343.0
}

impl ArrayGeometry {
    pub fn new(mic_positions: Vec<Position>) -> Result<Self> {
        let g = Self {
            mic_positions,
            speed_of_sound: default_speed_of_sound(),
            pdm_excluded: BTreeSet::new(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Six-microphone tablet frame (19 cm x 10 cm), channel index 1 facing backwards
    /// and excluded from phase-difference pairs.
    pub fn tablet() -> Self {
        Self {
            mic_positions: vec![
                [-0.10, 0.095, 0.0],
                [0.0, 0.095, -0.02],
                [0.10, 0.095, 0.0],
                [-0.10, -0.095, 0.0],
                [0.0, -0.095, 0.0],
                [0.10, -0.095, 0.0],
            ],
            speed_of_sound: default_speed_of_sound(),
            pdm_excluded: BTreeSet::from([1]),
        }
    }

    pub fn channel_count(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn centroid(&self) -> Position {
        let n = self.mic_positions.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for d in 0..3 {
                c[d] += p[d] / n;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.len() < 2 {
            return Err(Error::InvalidConfig(
                "array geometry needs at least two microphones".into(),
            ));
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite microphone position".into()));
        }
        if !(self.speed_of_sound.is_finite() && self.speed_of_sound > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "speed of sound must be positive, got {}",
                self.speed_of_sound
            )));
        }
        if let Some(&bad) = self
            .pdm_excluded
            .iter()
            .find(|&&c| c >= self.mic_positions.len())
        {
            return Err(Error::InvalidConfig(format!(
                "pdm_excluded channel {bad} out of range"
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("geometry serializes")
    }
}

/// Per-channel outcome of failure detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStatus {
    pub failed: Vec<bool>,
    /// Broadband RMS relative to the median channel RMS, dB.
    pub rms_deviation_db: Vec<f64>,
    /// Best peak normalized cross-correlation against any other candidate channel.
    pub metric: Vec<f64>,
}

impl ChannelStatus {
    /// Every channel usable.
    pub fn all_ok(channels: usize) -> Self {
        Self {
            failed: vec![false; channels],
            rms_deviation_db: vec![0.0; channels],
            metric: vec![1.0; channels],
        }
    }

    pub fn channel_count(&self) -> usize {
        self.failed.len()
    }

    pub fn usable(&self) -> Vec<usize> {
        (0..self.failed.len()).filter(|&i| !self.failed[i]).collect()
    }
}

/// Thresholds of the failure detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureConfig {
    pub max_rms_deviation_db: f64,
    pub min_correlation: f64,
    pub max_lag_seconds: f64,
}

impl Default for FailureConfig {
    fn default() -> Self {
        Self {
            max_rms_deviation_db: 20.0,
            min_correlation: 0.3,
            max_lag_seconds: 0.010,
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Peak of `|sum_n x[n] y[n + l]| / sqrt(Ex Ey)` over `|l| <= max_lag`, for every pair.
fn peak_correlations(wave: &MultichannelWave, max_lag: usize) -> Vec<Vec<f64>> {
    let n_ch = wave.channel_count();
    let len = wave.len();
    let n_fft = (len + max_lag + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let energies: Vec<f64> = (0..n_ch)
        .map(|c| wave.channel(c).iter().map(|v| v * v).sum())
        .collect();
    let spectra: Vec<Vec<Complex64>> = (0..n_ch)
        .map(|c| {
            let mut buf: Vec<Complex64> = wave
                .channel(c)
                .iter()
                .map(|&v| Complex64::new(v, 0.0))
                .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
                .take(n_fft)
                .collect();
            fwd.process(&mut buf);
            buf
        })
        .collect();
    let mut out = vec![vec![0.0; n_ch]; n_ch];
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for i in 0..n_ch {
        out[i][i] = if energies[i] > 0.0 { 1.0 } else { 0.0 };
        for j in (i + 1)..n_ch {
            let denom = (energies[i] * energies[j]).sqrt();
            if denom <= 0.0 {
                continue;
            }
            for (b, (x, y)) in buf.iter_mut().zip(spectra[i].iter().zip(&spectra[j])) {
                *b = x.conj() * y;
            }
            inv.process(&mut buf);
            let lag = max_lag.min(n_fft / 2 - 1);
            let peak = (0..=lag)
                .flat_map(|l| [buf[l], buf[(n_fft - l) % n_fft]])
                .map(|v| v.re.abs())
                .fold(0.0, f64::max)
                / n_fft as f64
                / denom;
            out[i][j] = peak;
            out[j][i] = peak;
        }
    }
    out
}

/// Flags failed microphones.
///
/// A channel fails when its RMS deviates from the median channel RMS by more than
/// `max_rms_deviation_db`, or when its peak normalized cross-correlation with every
/// other channel that passed the level test stays below `min_correlation`.
pub fn detect_failures(
    wave: &MultichannelWave,
    geometry: &ArrayGeometry,
    config: &FailureConfig,
) -> Result<ChannelStatus> {
    let n_ch = wave.channel_count();
    if n_ch < 2 {
        return Err(Error::TooFewChannels {
            needed: 2,
            available: n_ch,
        });
    }
    if n_ch != geometry.channel_count() {
        return Err(Error::ShapeMismatch(format!(
            "wave has {n_ch} channels, geometry has {}",
            geometry.channel_count()
        )));
    }
    let len = wave.len().max(1) as f64;
    let rms: Vec<f64> = wave
        .samples()
        .axis_iter(Axis(0))
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / len).sqrt())
        .collect();
    let med = median(&rms);
    let rms_deviation_db: Vec<f64> = rms
        .iter()
        .map(|&r| {
            if r == med {
                0.0
            } else {
                20.0 * (r / med).log10()
            }
        })
        .collect();
    let mut failed: Vec<bool> = rms_deviation_db
        .iter()
        .map(|d| d.is_nan() || d.abs() > config.max_rms_deviation_db)
        .collect();

    let max_lag = (config.max_lag_seconds * f64::from(wave.sample_rate())).round() as usize;
    let corr = peak_correlations(wave, max_lag);
    let level_ok: Vec<usize> = (0..n_ch).filter(|&i| !failed[i]).collect();
    let mut metric = vec![0.0; n_ch];
    for i in 0..n_ch {
        let best = level_ok
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| corr[i][j])
            .fold(f64::NEG_INFINITY, f64::max);
        metric[i] = if best.is_finite() { best } else { 0.0 };
        if best.is_finite() && best < config.min_correlation {
            failed[i] = true;
        }
    }
    if failed.iter().all(|&f| f) {
        return Err(Error::NoUsableChannels);
    }
    Ok(ChannelStatus {
        failed,
        rms_deviation_db,
        metric,
    })
}

/// Estimated talker position with per-channel delays relative to channel 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLocation {
    pub position: Position,
    /// Seconds; positive when the wavefront reaches the channel after channel 0.
    pub delays: Vec<f64>,
}

/// `tau_i = (|p - m_i| - |p - m_0|) / c`.
pub fn steering_delays(geometry: &ArrayGeometry, position: Position) -> Result<SourceLocation> {
    let dists: Vec<f64> = geometry
        .mic_positions
        .iter()
        .map(|m| distance(&position, m))
        .collect();
    if let Some(i) = dists.iter().position(|&d| d < 1e-9) {
        return Err(Error::InvalidConfig(format!(
            "source position coincides with microphone {i}"
        )));
    }
    let c = geometry.speed_of_sound;
    let delays = dists.iter().map(|d| (d - dists[0]) / c).collect();
    Ok(SourceLocation { position, delays })
}

/// Rotates channel `i`, bin `k` by `exp(+j 2 pi f_k tau_i)` so that a wave from the
/// steered position is phase-aligned with channel 0.
pub fn align(spec: &Spectrogram, loc: &SourceLocation) -> Result<Spectrogram> {
    if spec.channels() != loc.delays.len() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} channels, location has {} delays",
            spec.channels(),
            loc.delays.len()
        )));
    }
    let freqs = spec.bin_frequencies();
    let mut out = spec.clone();
    for (ch, mut plane) in out.coeffs_mut().axis_iter_mut(Axis(0)).enumerate() {
        let tau = loc.delays[ch];
        if tau == 0.0 {
            continue;
        }
        let rot: Vec<Complex64> = freqs
            .iter()
            .map(|f| Complex64::from_polar(1.0, 2.0 * PI * f * tau))
            .collect();
        for mut row in plane.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&rot).for_each(|(x, r)| *x *= r);
        }
    }
    Ok(out)
}
