//! Coherence- and phase-difference-based time-frequency masks.
//!
//! The coherence mask averages the magnitude-squared coherence over all channel
//! pairs, with the spectral densities estimated by a Welch-style average of
//! `2K + 1` neighbouring STFT frames around each frame. The phase-difference
//! mask maps the pair-averaged absolute phase difference of the steered channels
//! through `min(1, 1 - tanh(pdm - alpha(f)))` with `alpha(f) = 0.4 + 0.3 f / fs`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calibration::{compensate, CalibrationFilter};
use crate::error::{Error, Result};
use crate::stft::Spectrogram;

/// Default Welch half-width in frames.
pub const DEFAULT_WELCH_HALF_WIDTH: usize = 4;

/// Real gains in `[0, 1]` indexed `(frame, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    gains: Array2<f64>,
}

impl Mask {
    pub fn new(gains: Array2<f64>) -> Result<Self> {
        if let Some(v) = gains.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!("mask gain {v} outside [0, 1]")));
        }
        Ok(Self { gains })
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self {
            gains: Array2::ones((frames, bins)),
        }
    }

    pub fn gains(&self) -> &Array2<f64> {
        &self.gains
    }

    pub fn dim(&self) -> (usize, usize) {
        self.gains.dim()
    }

    pub fn mean(&self) -> f64 {
        self.gains.mean().unwrap_or(0.0)
    }

    /// Mean gain within each `[lo, hi)` Hz band; empty bands report `NaN`.
    pub fn band_means(&self, freqs: &[f64], edges: &[f64]) -> Vec<f64> {
        edges
            .windows(2)
            .map(|e| {
                let cols: Vec<usize> = (0..freqs.len())
                    .filter(|&k| freqs[k] >= e[0] && freqs[k] < e[1])
                    .collect();
                if cols.is_empty() {
                    return f64::NAN;
                }
                self.gains.select(Axis(1), &cols).mean().unwrap_or(f64::NAN)
            })
            .collect()
    }

    /// Float32 little-endian dump with a `{frames, bins}` `u32` header.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let (frames, bins) = self.dim();
        for h in [frames, bins] {
            let v = u32::try_from(h)
                .map_err(|_| Error::InvalidConfig(format!("mask dimension {h} exceeds u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for g in self.gains.iter() {
            w.write_all(&(*g as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dump(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let frames = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let bins = u32::from_le_bytes(word) as usize;
        let mut data = Vec::with_capacity(frames * bins);
        for _ in 0..frames * bins {
            r.read_exact(&mut word)?;
            data.push(f64::from(f32::from_le_bytes(word)));
        }
        let gains = Array2::from_shape_vec((frames, bins), data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::new(gains)
    }
}

/// Locally averaged auto- and cross-spectral densities.
#[derive(Debug, Clone)]
pub struct CrossSpectra {
    /// Original channel indices.
    pub channels: Vec<usize>,
    /// Auto densities `S_xx`, one `(frame, bin)` array per entry of `channels`.
    pub auto: Vec<Array2<f64>>,
    /// `(a, b)` positions into `channels` with `a < b`.
    pub pairs: Vec<(usize, usize)>,
    /// Cross densities `S_ab = <X_a conj(X_b)>`, one per pair.
    pub cross: Vec<Array2<Complex64>>,
}

/// Average over frames `t - K ..= t + K`, truncated at the edges and divided by the
/// number of frames actually summed.
fn sliding_mean<T>(data: &Array2<T>, half_width: usize) -> Array2<T>
where
    T: Copy + Default + std::ops::AddAssign + std::ops::Div<f64, Output = T>,
{
    let (frames, bins) = data.dim();
    let mut out = Array2::from_elem((frames, bins), T::default());
    for t in 0..frames {
        let lo = t.saturating_sub(half_width);
        let hi = (t + half_width).min(frames - 1);
        let count = (hi - lo + 1) as f64;
        let mut row = out.row_mut(t);
        for u in lo..=hi {
            row.iter_mut()
                .zip(data.row(u))
                .for_each(|(o, v)| *o += *v);
        }
        row.mapv_inplace(|v| v / count);
    }
    out
}

/// Welch estimate of all pairwise spectral densities of the `included` channels.
pub fn welch_cross_spectra(
    spec: &Spectrogram,
    included: &[usize],
    half_width: usize,
) -> Result<CrossSpectra> {
    if included.len() < 2 {
        return Err(Error::TooFewChannels {
            needed: 2,
            available: included.len(),
        });
    }
    if let Some(&bad) = included.iter().find(|&&c| c >= spec.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "channel {bad} not in a {}-channel spectrogram",
            spec.channels()
        )));
    }
    let auto = included
        .iter()
        .map(|&c| sliding_mean(&spec.channel(c).mapv(|v| v.norm_sqr()), half_width))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..included.len())
        .flat_map(|a| ((a + 1)..included.len()).map(move |b| (a, b)))
        .collect();
    let cross = pairs
        .iter()
        .map(|&(a, b)| {
            let xa = spec.channel(included[a]);
            let xb = spec.channel(included[b]);
            let prod = Zip::from(&xa).and(&xb).map_collect(|p, q| p * q.conj());
            sliding_mean(&prod, half_width)
        })
        .collect();
    Ok(CrossSpectra {
        channels: included.to_vec(),
        auto,
        pairs,
        cross,
    })
}

fn coherence(sxy: Complex64, sxx: f64, syy: f64) -> f64 {
    let den = sxx * syy;
    if den > 0.0 {
        (sxy.norm_sqr() / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Pair-averaged magnitude-squared coherence `|S_xy|^2 / (S_xx S_yy)`.
/// Bins with a zero density get coherence 0.
pub fn msc(cross: &CrossSpectra) -> Mask {
    let dim = cross.auto[0].dim();
    let mut acc = Array2::<f64>::zeros(dim);
    for (&(a, b), sxy) in cross.pairs.iter().zip(&cross.cross) {
        Zip::from(&mut acc)
            .and(sxy)
            .and(&cross.auto[a])
            .and(&cross.auto[b])
            .for_each(|o, &s, &pa, &pb| *o += coherence(s, pa, pb));
    }
    let n = cross.pairs.len() as f64;
    acc.mapv_inplace(|v| (v / n).clamp(0.0, 1.0));
    Mask { gains: acc }
}

/// Long-term coherence per bin between channels `i` and `j`, averaging the
/// periodograms over every frame.
pub fn long_term_coherence(spec: &Spectrogram, i: usize, j: usize) -> Vec<f64> {
    let xi = spec.channel(i);
    let xj = spec.channel(j);
    (0..spec.bins())
        .map(|k| {
            let (mut sxy, mut sxx, mut syy) = (Complex64::new(0.0, 0.0), 0.0, 0.0);
            for t in 0..spec.frames() {
                let (a, b) = (xi[(t, k)], xj[(t, k)]);
                sxy += a * b.conj();
                sxx += a.norm_sqr();
                syy += b.norm_sqr();
            }
            coherence(sxy, sxx, syy)
        })
        .collect()
}

/// Mean absolute inter-channel phase difference, radians in `[0, pi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdmField {
    pub values: Array2<f64>,
    pub bin_frequencies: Vec<f64>,
}

/// Phase-difference measurement over all pairs of the `included` channels of an
/// already steered spectrogram. Calibration filters, if any, are compensated first.
pub fn pdm(
    aligned: &Spectrogram,
    included: &[usize],
    calibration: &[CalibrationFilter],
) -> Result<PdmField> {
    if included.len() < 2 {
        return Err(Error::TooFewChannels {
            needed: 2,
            available: included.len(),
        });
    }
    if let Some(&bad) = included.iter().find(|&&c| c >= aligned.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "channel {bad} not in a {}-channel spectrogram",
            aligned.channels()
        )));
    }
    let compensated;
    let spec = if calibration.is_empty() {
        aligned
    } else {
        compensated = compensate(aligned, calibration)?;
        &compensated
    };
    let mut acc = Array2::<f64>::zeros((spec.frames(), spec.bins()));
    let mut pairs = 0usize;
    for (a, &i) in included.iter().enumerate() {
        for &j in &included[a + 1..] {
            Zip::from(&mut acc)
                .and(&spec.channel(i))
                .and(&spec.channel(j))
                .for_each(|o, x, y| *o += (x * y.conj()).arg().abs());
            pairs += 1;
        }
    }
    acc.mapv_inplace(|v| (v / pairs as f64).clamp(0.0, std::f64::consts::PI));
    Ok(PdmField {
        values: acc,
        bin_frequencies: spec.bin_frequencies(),
    })
}

/// Frequency-dependent bias `0.4 + 0.3 f / fs`.
pub fn alpha_bias(freq: f64, sample_rate: f64) -> f64 {
    0.4 + 0.3 * freq / sample_rate
}

/// `min(1, 1 - tanh(pdm - alpha(f)))`.
pub fn pdm_gain(pdm_value: f64, freq: f64, sample_rate: f64) -> f64 {
    (1.0 - (pdm_value - alpha_bias(freq, sample_rate)).tanh()).min(1.0)
}

pub fn pdm_mask(field: &PdmField, sample_rate: f64) -> Mask {
    let mut gains = field.values.clone();
    for mut row in gains.axis_iter_mut(Axis(0)) {
        row.iter_mut()
            .zip(&field.bin_frequencies)
            .for_each(|(g, &f)| *g = pdm_gain(*g, f, sample_rate));
    }
    Mask { gains }
}

/// `max(floor, msc * pdm)`; an absent mask counts as all ones.
pub fn combine_masks(
    frames: usize,
    bins: usize,
    msc: Option<&Mask>,
    pdm: Option<&Mask>,
    floor: f64,
) -> Result<Mask> {
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::InvalidConfig(format!("mask floor {floor} outside [0, 1)")));
    }
    for m in [msc, pdm].into_iter().flatten() {
        if m.dim() != (frames, bins) {
            return Err(Error::ShapeMismatch(format!(
                "mask is {:?}, spectrogram is ({frames}, {bins})",
                m.dim()
            )));
        }
    }
    let mut gains = Array2::<f64>::ones((frames, bins));
    for m in [msc, pdm].into_iter().flatten() {
        gains *= m.gains();
    }
    gains.mapv_inplace(|g| g.max(floor));
    Ok(Mask { gains })
}

/// Elementwise gain on a single-channel spectrogram.
pub fn apply_mask(spec: &Spectrogram, mask: &Mask) -> Result<Spectrogram> {
    if spec.channels() != 1 || mask.dim() != (spec.frames(), spec.bins()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} cannot filter a {}x{}x{} spectrogram",
            mask.dim(),
            spec.channels(),
            spec.frames(),
            spec.bins()
        )));
    }
    let mut out = spec.clone();
    Zip::from(out.coeffs_mut().index_axis_mut(Axis(0), 0))
        .and(mask.gains())
        .for_each(|y, &g| *y *= g);
    Ok(out)
}

/// Filters the beamformer output with the combined mask.
pub fn combine_and_apply(
    beamformed: &Spectrogram,
    msc: Option<&Mask>,
    pdm: Option<&Mask>,
    floor: f64,
) -> Result<(Spectrogram, Mask)> {
    let gain = combine_masks(beamformed.frames(), beamformed.bins(), msc, pdm, floor)?;
    Ok((apply_mask(beamformed, &gain)?, gain))
}

/// Which masks the pipeline applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSelection {
    pub msc: bool,
    pub pdm: bool,
}

impl Default for MaskSelection {
    fn default() -> Self {
        Self {
            msc: true,
            pdm: true,
        }
    }
}
