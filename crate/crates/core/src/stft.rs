//! STFT analysis and weighted overlap-add synthesis.
//!
//! Frames are centred: the signal is reflect-padded by half a window on the left so
//! that frame `t` is centred on input sample `t * hop`, and the frame count is
//! `ceil(len / hop)`. Synthesis normalizes by the accumulated analysis x synthesis
//! window product, which reduces to the COLA constant away from the padded edges.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::MultichannelWave;
use crate::error::{Error, Result};

/// Analysis/synthesis taper. The same taper is used on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    /// Periodic square-root Hann, `sin(pi n / N)`.
    SqrtHann,
    /// Periodic Hann, `sin^2(pi n / N)`.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        let n = len as f64;
        (0..len)
            .map(|i| {
                let s = (std::f64::consts::PI * i as f64 / n).sin();
                match self {
                    Window::SqrtHann => s,
                    Window::Hann => s * s,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    pub window: Window,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 1024,
            hop: 256,
            window: Window::SqrtHann,
            fft_size: 1024,
        }
    }
}

const COLA_TOLERANCE: f64 = 1e-8;

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Maximum relative deviation of the overlapped analysis x synthesis product
    /// from its mean.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window.coefficients(self.window_length);
        let sums: Vec<f64> = (0..self.hop)
            .map(|n| w.iter().skip(n).step_by(self.hop).map(|v| v * v).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if mean <= 0.0 {
            return f64::INFINITY;
        }
        sums.iter()
            .map(|s| (s - mean).abs() / mean)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig(
                "window_length and hop must be positive".into(),
            ));
        }
        if self.hop > self.window_length {
            return Err(Error::InvalidConfig(format!(
                "hop {} exceeds window length {}",
                self.hop, self.window_length
            )));
        }
        if self.fft_size < self.window_length || !self.fft_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} must be even and at least the window length {}",
                self.fft_size, self.window_length
            )));
        }
        let dev = self.cola_deviation();
        if dev > COLA_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "{:?} window of {} samples with hop {} is not COLA (deviation {dev:.3e})",
                self.window, self.window_length, self.hop
            )));
        }
        Ok(())
    }

    fn left_pad(&self) -> usize {
        self.window_length / 2
    }

    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// One-sided complex STFT coefficients indexed `(channel, frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    coeffs: Array3<Complex64>,
    config: StftConfig,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    pub fn from_coeffs(
        coeffs: Array3<Complex64>,
        config: StftConfig,
        sample_rate: u32,
        signal_len: usize,
    ) -> Result<Self> {
        if coeffs.dim().2 != config.bins() {
            return Err(Error::ShapeMismatch(format!(
                "{} bins given, fft_size {} implies {}",
                coeffs.dim().2,
                config.fft_size,
                config.bins()
            )));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self {
            coeffs,
            config,
            sample_rate,
            signal_len,
        })
    }

    /// Same metadata, new coefficients.
    pub fn with_coeffs(&self, coeffs: Array3<Complex64>) -> Result<Self> {
        Self::from_coeffs(coeffs, self.config, self.sample_rate, self.signal_len)
    }

    pub fn channels(&self) -> usize {
        self.coeffs.dim().0
    }

    pub fn frames(&self) -> usize {
        self.coeffs.dim().1
    }

    pub fn bins(&self) -> usize {
        self.coeffs.dim().2
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    /// Centre frequency of bin `k` in Hz.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        k as f64 * f64::from(self.sample_rate) / self.config.fft_size as f64
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        (0..self.bins()).map(|k| self.bin_frequency(k)).collect()
    }

    pub fn coeffs(&self) -> &Array3<Complex64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Array3<Complex64> {
        self.coeffs
    }

    /// `(frame, bin)` view of one channel.
    pub fn channel(&self, ch: usize) -> ArrayView2<'_, Complex64> {
        self.coeffs.index_axis(Axis(0), ch)
    }

    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channels()) {
            return Err(Error::ShapeMismatch(format!(
                "channel {bad} out of range for {} channels",
                self.channels()
            )));
        }
        self.with_coeffs(self.coeffs.select(Axis(0), channels))
    }

    /// Single-channel spectrogram from a `(frame, bin)` matrix.
    pub fn single_channel(&self, data: Array2<Complex64>) -> Result<Self> {
        if data.dim() != (self.frames(), self.bins()) {
            return Err(Error::ShapeMismatch(format!(
                "expected ({}, {}), got {:?}",
                self.frames(),
                self.bins(),
                data.dim()
            )));
        }
        self.with_coeffs(data.insert_axis(Axis(0)))
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

/// STFT of every channel.
pub fn stft_analyze(wave: &MultichannelWave, config: &StftConfig) -> Result<Spectrogram> {
    config.validate()?;
    let len = wave.len();
    if len < config.window_length {
        return Err(Error::TooShort {
            len,
            window: config.window_length,
        });
    }
    let window = config.window.coefficients(config.window_length);
    let plans = Plans::new(config.fft_size);
    let frames = config.frame_count(len);
    let bins = config.bins();
    let pad = config.left_pad() as isize;
    let mut coeffs = Array3::<Complex64>::zeros((wave.channel_count(), frames, bins));
    let mut buf = vec![Complex64::new(0.0, 0.0); config.fft_size];
    for ch in 0..wave.channel_count() {
        let x = wave.channel(ch);
        for t in 0..frames {
            let start = (t * config.hop) as isize - pad;
            buf.fill(Complex64::new(0.0, 0.0));
            for (n, w) in window.iter().enumerate() {
                let idx = reflect_index(start + n as isize, len);
                buf[n] = Complex64::new(x[idx] * w, 0.0);
            }
            plans.forward.process(&mut buf);
            coeffs
                .slice_mut(s![ch, t, ..])
                .iter_mut()
                .zip(&buf[..bins])
                .for_each(|(c, v)| *c = *v);
        }
    }
    Spectrogram::from_coeffs(coeffs, *config, wave.sample_rate(), len)
}

/// Inverse STFT with weighted overlap-add. Output length equals the analysed length.
pub fn stft_synthesize(spec: &Spectrogram) -> Result<MultichannelWave> {
    let config = spec.config();
    config.validate()?;
    if spec.bins() != config.bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, config implies {}",
            spec.bins(),
            config.bins()
        )));
    }
    let len = spec.signal_len();
    if spec.frames() != config.frame_count(len) {
        return Err(Error::ShapeMismatch(format!(
            "{} frames cannot describe a {len}-sample signal with hop {}",
            spec.frames(),
            config.hop
        )));
    }
    let window = config.window.coefficients(config.window_length);
    let plans = Plans::new(config.fft_size);
    let pad = config.left_pad();
    let padded_len = (spec.frames().saturating_sub(1)) * config.hop + config.window_length;
    let mut norm = vec![0.0; padded_len];
    for t in 0..spec.frames() {
        for (n, w) in window.iter().enumerate() {
            norm[t * config.hop + n] += w * w;
        }
    }
    let n_fft = config.fft_size;
    let scale = 1.0 / n_fft as f64;
    let mut out = Array2::<f64>::zeros((spec.channels(), len));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut acc = vec![0.0; padded_len];
    for ch in 0..spec.channels() {
        acc.fill(0.0);
        for t in 0..spec.frames() {
            let frame = spec.coeffs.slice(s![ch, t, ..]);
            for (k, v) in frame.iter().enumerate() {
                buf[k] = *v;
            }
            for k in 1..n_fft / 2 {
                buf[n_fft - k] = frame[k].conj();
            }
            // The one-sided representation cannot carry imaginary DC/Nyquist parts.
            buf[0].im = 0.0;
            buf[n_fft / 2].im = 0.0;
            plans.inverse.process(&mut buf);
            let offset = t * config.hop;
            for (n, w) in window.iter().enumerate() {
                acc[offset + n] += buf[n].re * scale * w;
            }
        }
        for i in 0..len {
            let nv = norm[pad + i];
            out[(ch, i)] = if nv > 1e-12 { acc[pad + i] / nv } else { 0.0 };
        }
    }
    MultichannelWave::new(out, spec.sample_rate())
}

/// Writes the raw spectrogram dump: six little-endian `u32` header fields
/// `{channels, frames, bins, sample_rate, window_length, hop}` followed by
/// `(re, im)` float32 pairs in `(channel, frame, bin)` order.
pub fn write_spectrogram_dump(spec: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = [
        spec.channels(),
        spec.frames(),
        spec.bins(),
        spec.sample_rate() as usize,
        spec.config().window_length,
        spec.config().hop,
    ];
    for h in header {
        let v = u32::try_from(h)
            .map_err(|_| Error::InvalidConfig(format!("header value {h} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for c in spec.coeffs().iter() {
        w.write_all(&(c.re as f32).to_le_bytes())?;
        w.write_all(&(c.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump written by [`write_spectrogram_dump`]. The window is assumed to be
/// square-root Hann and the FFT size is inferred from the bin count.
pub fn read_spectrogram_dump(path: impl AsRef<Path>) -> Result<Spectrogram> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0usize; 6];
    let mut word = [0u8; 4];
    for h in header.iter_mut() {
        r.read_exact(&mut word)?;
        *h = u32::from_le_bytes(word) as usize;
    }
    let [channels, frames, bins, sample_rate, window_length, hop] = header;
    if bins < 2 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("bin count {bins} too small"),
        });
    }
    let config = StftConfig {
        window_length,
        hop,
        window: Window::SqrtHann,
        fft_size: 2 * (bins - 1),
    };
    let mut data = Vec::with_capacity(channels * frames * bins);
    for _ in 0..channels * frames * bins {
        r.read_exact(&mut word)?;
        let re = f32::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let im = f32::from_le_bytes(word);
        data.push(Complex64::new(f64::from(re), f64::from(im)));
    }
    let coeffs = Array3::from_shape_vec((channels, frames, bins), data).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    let sample_rate = u32::try_from(sample_rate).unwrap_or(u32::MAX);
    Spectrogram::from_coeffs(coeffs, config, sample_rate, frames * hop)
}
