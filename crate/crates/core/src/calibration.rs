//! Two-stage phase self-calibration of the microphone array.
//!
//! Each channel's transfer function towards a delay-and-sum reference is fitted by
//! per-bin least squares over a batch of frames, `H_i = sum conj(X_i) R / sum |X_i|^2`,
//! and only its phase is kept. The offline stage pools high-SNR frames of many
//! utterances; the online stage fits the residual on every frame of one utterance
//! after the offline correction has been applied. Phases are gauged so that
//! channel 0 is never corrected.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{align, detect_failures, ArrayGeometry, ChannelStatus, FailureConfig, SourceLocation};
use crate::audio::MultichannelWave;
use crate::error::{Error, Result};
use crate::localizer::{srp_phat, SearchGrid};
use crate::stft::{stft_analyze, Spectrogram, StftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Offline,
    Online,
}

impl Stage {
    fn code(self) -> u32 {
        match self {
            Stage::Offline => 0,
            Stage::Online => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Stage::Offline),
            1 => Some(Stage::Online),
            _ => None,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Phase-only correction per `(channel, bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationFilter {
    phase: Array2<f64>,
    pub stage: Stage,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl CalibrationFilter {
    pub fn new(phase: Array2<f64>, stage: Stage, sample_rate: u32, fft_size: usize) -> Result<Self> {
        if phase.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("non-finite phase".into()));
        }
        if phase.ncols() != fft_size / 2 + 1 {
            return Err(Error::ShapeMismatch(format!(
                "{} phase bins for fft size {fft_size}",
                phase.ncols()
            )));
        }
        Ok(Self {
            phase: phase.mapv(wrap_phase),
            stage,
            sample_rate,
            fft_size,
        })
    }

    /// All-zero filter.
    pub fn neutral(channels: usize, stage: Stage, sample_rate: u32, fft_size: usize) -> Self {
        Self {
            phase: Array2::zeros((channels, fft_size / 2 + 1)),
            stage,
            sample_rate,
            fft_size,
        }
    }

    pub fn phase(&self) -> &Array2<f64> {
        &self.phase
    }

    pub fn channels(&self) -> usize {
        self.phase.nrows()
    }

    pub fn bins(&self) -> usize {
        self.phase.ncols()
    }

    /// Header of five little-endian `u32` `{channels, bins, stage, sample_rate,
    /// fft_size}` (stage 0 = offline, 1 = online), then `channels x bins` float32
    /// phases in channel-major order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = [
            self.channels() as u32,
            self.bins() as u32,
            self.stage.code(),
            self.sample_rate,
            self.fft_size as u32,
        ];
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for p in self.phase.iter() {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut word = [0u8; 4];
        let mut header = [0u32; 5];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u32::from_le_bytes(word);
        }
        let [channels, bins, stage, sample_rate, fft_size] = header;
        let stage = Stage::from_code(stage).ok_or_else(|| bad(format!("unknown stage {stage}")))?;
        if bins as usize != fft_size as usize / 2 + 1 {
            return Err(bad(format!("{bins} bins inconsistent with fft size {fft_size}")));
        }
        let n = channels as usize * bins as usize;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            data.push(f64::from(f32::from_le_bytes(word)));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let phase = Array2::from_shape_vec((channels as usize, bins as usize), data)
            .map_err(|e| bad(e.to_string()))?;
        Self::new(phase, stage, sample_rate, fft_size as usize)
    }
}

/// Multiplies channel `i`, bin `k` by `exp(+j sum_f phase_f(i, k))`.
pub fn compensate(spec: &Spectrogram, filters: &[CalibrationFilter]) -> Result<Spectrogram> {
    if filters.is_empty() {
        return Ok(spec.clone());
    }
    let mut total = Array2::<f64>::zeros((spec.channels(), spec.bins()));
    for f in filters {
        if f.channels() != spec.channels() || f.bins() != spec.bins() {
            return Err(Error::ShapeMismatch(format!(
                "calibration filter is {}x{}, spectrogram has {} channels and {} bins",
                f.channels(),
                f.bins(),
                spec.channels(),
                spec.bins()
            )));
        }
        total += f.phase();
    }
    let rot = total.mapv(|p| Complex64::from_polar(1.0, p));
    let mut out = spec.clone();
    for (ch, mut plane) in out.coeffs_mut().axis_iter_mut(Axis(0)).enumerate() {
        let r = rot.row(ch);
        for mut row in plane.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(r.iter()).for_each(|(x, c)| *x *= c);
        }
    }
    Ok(out)
}

/// Delay-and-sum reference: mean of the usable aligned channels, single channel.
pub fn das_reference(aligned: &Spectrogram, status: &ChannelStatus) -> Result<Spectrogram> {
    let usable = status.usable();
    if usable.is_empty() {
        return Err(Error::NoUsableChannels);
    }
    if status.channel_count() != aligned.channels() {
        return Err(Error::ShapeMismatch(format!(
            "status covers {} channels, spectrogram has {}",
            status.channel_count(),
            aligned.channels()
        )));
    }
    let sum = aligned
        .coeffs()
        .select(Axis(0), &usable)
        .sum_axis(Axis(0));
    aligned.single_channel(sum / usable.len() as f64)
}

/// Batched least-squares statistics, mergeable by summation.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationAccumulator {
    /// `sum conj(X_i) R` per `(channel, bin)`.
    pub numerator: Array2<Complex64>,
    /// `sum |X_i|^2` per `(channel, bin)`.
    pub denominator: Array2<f64>,
    pub frames_used: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
}

impl CalibrationAccumulator {
    pub fn new(channels: usize, sample_rate: u32, fft_size: usize) -> Self {
        let bins = fft_size / 2 + 1;
        Self {
            numerator: Array2::zeros((channels, bins)),
            denominator: Array2::zeros((channels, bins)),
            frames_used: 0,
            sample_rate,
            fft_size,
        }
    }

    /// Adds the selected frames of every channel of `aligned` against `reference`.
    pub fn accumulate(
        &mut self,
        aligned: &Spectrogram,
        reference: &Spectrogram,
        frame_select: &[bool],
    ) -> Result<()> {
        if aligned.channels() != self.numerator.nrows()
            || aligned.bins() != self.numerator.ncols()
            || reference.channels() != 1
            || reference.frames() != aligned.frames()
            || reference.bins() != aligned.bins()
            || frame_select.len() != aligned.frames()
        {
            return Err(Error::ShapeMismatch(format!(
                "accumulator {:?}, aligned {}x{}x{}, reference {}x{}x{}, selection {}",
                self.numerator.dim(),
                aligned.channels(),
                aligned.frames(),
                aligned.bins(),
                reference.channels(),
                reference.frames(),
                reference.bins(),
                frame_select.len()
            )));
        }
        let r = reference.channel(0);
        for ch in 0..aligned.channels() {
            let x = aligned.channel(ch);
            let mut num = self.numerator.row_mut(ch);
            let mut den = self.denominator.row_mut(ch);
            for t in (0..aligned.frames()).filter(|&t| frame_select[t]) {
                Zip::from(&mut num)
                    .and(&mut den)
                    .and(x.row(t))
                    .and(r.row(t))
                    .for_each(|n, d, xv, rv| {
                        *n += xv.conj() * rv;
                        *d += xv.norm_sqr();
                    });
            }
        }
        self.frames_used += frame_select.iter().filter(|&&s| s).count();
        Ok(())
    }

    pub fn merge(&mut self, other: &CalibrationAccumulator) -> Result<()> {
        if self.numerator.dim() != other.numerator.dim() {
            return Err(Error::ShapeMismatch("accumulator shapes differ".into()));
        }
        self.numerator += &other.numerator;
        self.denominator += &other.denominator;
        self.frames_used += other.frames_used;
        Ok(())
    }

    /// Least-squares transfer estimate `numerator / denominator`; zero where the
    /// denominator is empty.
    pub fn transfer(&self) -> Array2<Complex64> {
        Zip::from(&self.numerator)
            .and(&self.denominator)
            .map_collect(|n, &d| if d > 0.0 { n / d } else { Complex64::new(0.0, 0.0) })
    }

    /// Keeps the phase of the fitted transfer function, gauged to channel 0.
    /// Bins whose denominator is below `1e-12` of the channel maximum are neutral.
    pub fn finalize(&self, stage: Stage) -> Result<CalibrationFilter> {
        if self.frames_used == 0 || self.denominator.iter().all(|&d| d <= 0.0) {
            return Err(Error::Calibration("accumulator is empty".into()));
        }
        let mut phase = Array2::<f64>::zeros(self.numerator.dim());
        for ch in 0..self.numerator.nrows() {
            let den = self.denominator.row(ch);
            let max = den.iter().copied().fold(0.0, f64::max);
            let num = self.numerator.row(ch);
            for k in 0..den.len() {
                if max > 0.0 && den[k] >= 1e-12 * max {
                    phase[(ch, k)] = (num[k] / den[k]).arg();
                }
            }
        }
        let reference = phase.row(0).to_owned();
        for mut row in phase.axis_iter_mut(Axis(0)) {
            row.iter_mut()
                .zip(reference.iter())
                .for_each(|(p, r)| *p = wrap_phase(*p - r));
        }
        CalibrationFilter::new(phase, stage, self.sample_rate, self.fft_size)
    }
}

/// Frame SNR in dB against the 10th-percentile frame energy of the utterance.
/// Energies and the floor are bounded below by `1e-12`.
pub fn snr_per_frame(spec: &Spectrogram) -> Result<Vec<f64>> {
    if spec.frames() < 10 {
        return Err(Error::TooShort {
            len: spec.frames(),
            window: 10,
        });
    }
    let energy: Vec<f64> = spec
        .channel(0)
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|v| v.norm_sqr()).sum::<f64>().max(1e-12))
        .collect();
    let floor = percentile(&energy, 10.0).max(1e-12);
    Ok(energy.iter().map(|e| 10.0 * (e / floor).log10()).collect())
}

/// Linear-interpolation percentile.
pub(crate) fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Frames with SNR strictly above the utterance median.
pub fn select_high_snr_frames(snr: &[f64]) -> Vec<bool> {
    let med = crate::array::median(snr);
    snr.iter().map(|&s| s > med).collect()
}

/// Default number of offline passes over the utterances.
pub const DEFAULT_OFFLINE_PASSES: usize = 4;

/// What the calibration stages need to steer an utterance.
#[derive(Debug, Clone)]
pub struct CalibrationContext {
    pub stft: StftConfig,
    pub geometry: ArrayGeometry,
    pub grid: SearchGrid,
    pub failure: FailureConfig,
    /// Upper bound on offline passes. Each pass after the first localizes on
    /// spectra compensated with the previous estimate; iteration stops once no
    /// utterance changes location. `1` gives a single streaming pass.
    pub max_passes: usize,
}

/// Per-utterance bookkeeping of a calibration pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationUtterance {
    pub frames: usize,
    pub frames_used: usize,
    pub location: [f64; 3],
    pub candidate: usize,
    pub failed: Vec<bool>,
}

/// Steered spectrogram of one utterance plus what was found along the way.
pub struct SteeredUtterance {
    pub aligned: Spectrogram,
    pub status: ChannelStatus,
    pub location: SourceLocation,
    pub candidate: usize,
}

/// Analysis, failure detection, localization and alignment. With `prior`, the
/// localizer sees the compensated spectrogram while the returned alignment is of
/// the uncompensated one, so the fit still measures the full sensor phase.
pub fn steer_utterance(
    wave: &MultichannelWave,
    ctx: &CalibrationContext,
    prior: &[CalibrationFilter],
) -> Result<SteeredUtterance> {
    let spec = stft_analyze(wave, &ctx.stft)?;
    let status = detect_failures(wave, &ctx.geometry, &ctx.failure)?;
    let localization = if prior.is_empty() {
        srp_phat(&spec, &ctx.geometry, &ctx.grid, &status)?
    } else {
        srp_phat(&compensate(&spec, prior)?, &ctx.geometry, &ctx.grid, &status)?
    };
    let aligned = align(&spec, &localization.location)?;
    Ok(SteeredUtterance {
        aligned,
        status,
        location: localization.location,
        candidate: localization.candidate,
    })
}

/// Zeroes failed channels so they stay neutral in the accumulator.
fn usable_only(aligned: &Spectrogram, status: &ChannelStatus) -> Spectrogram {
    let mut out = aligned.clone();
    for (ch, failed) in status.failed.iter().enumerate() {
        if *failed {
            out.coeffs_mut()
                .index_axis_mut(Axis(0), ch)
                .fill(Complex64::new(0.0, 0.0));
        }
    }
    out
}

/// Adds one steered utterance to the offline statistics using its high-SNR frames.
pub fn accumulate_offline(
    acc: &mut CalibrationAccumulator,
    steered: &SteeredUtterance,
) -> Result<CalibrationUtterance> {
    let reference = das_reference(&steered.aligned, &steered.status)?;
    let snr = snr_per_frame(&reference)?;
    let select = select_high_snr_frames(&snr);
    acc.accumulate(&usable_only(&steered.aligned, &steered.status), &reference, &select)?;
    Ok(CalibrationUtterance {
        frames: select.len(),
        frames_used: select.iter().filter(|&&s| s).count(),
        location: steered.location.position,
        candidate: steered.candidate,
        failed: steered.status.failed.clone(),
    })
}

fn offline_pass<I>(
    utterances: I,
    ctx: &CalibrationContext,
    prior: &[CalibrationFilter],
) -> Result<(CalibrationFilter, Vec<CalibrationUtterance>)>
where
    I: IntoIterator<Item = Result<MultichannelWave>>,
{
    let mut acc: Option<CalibrationAccumulator> = None;
    let mut report = Vec::new();
    for wave in utterances {
        let wave = wave?;
        let steered = steer_utterance(&wave, ctx, prior)?;
        let acc = acc.get_or_insert_with(|| {
            CalibrationAccumulator::new(wave.channel_count(), wave.sample_rate(), ctx.stft.fft_size)
        });
        report.push(accumulate_offline(acc, &steered)?);
    }
    let acc = acc.ok_or_else(|| Error::Calibration("no utterances given".into()))?;
    if acc.frames_used == 0 {
        return Err(Error::Calibration("no frames passed the SNR gate".into()));
    }
    Ok((acc.finalize(Stage::Offline)?, report))
}

/// Stage one: pooled calibration over a set of utterances.
///
/// Sensor phase mismatch biases the localizer, and a wrong steering direction
/// leaks into the fitted phase. Because the sensor phase is shared by all
/// utterances while their positions differ, re-localizing on compensated spectra
/// and fitting again converges; `utterances` is therefore called once per pass.
pub fn offline_calibrate<F, I>(
    mut utterances: F,
    ctx: &CalibrationContext,
) -> Result<(CalibrationFilter, Vec<CalibrationUtterance>)>
where
    F: FnMut() -> I,
    I: IntoIterator<Item = Result<MultichannelWave>>,
{
    let (mut filter, mut report) = offline_pass(utterances(), ctx, &[])?;
    for pass in 1..ctx.max_passes.max(1) {
        let (next, next_report) = offline_pass(utterances(), ctx, std::slice::from_ref(&filter))?;
        let moved = report
            .iter()
            .zip(&next_report)
            .filter(|(a, b)| a.candidate != b.candidate)
            .count();
        log::info!("offline pass {}: {moved} utterances relocated", pass + 1);
        filter = next;
        report = next_report;
        if moved == 0 {
            break;
        }
    }
    Ok((filter, report))
}

/// Stage two on an already steered utterance: compensate `stage1`, then fit the
/// residual on all frames. Returns a neutral filter and `false` when the utterance
/// carries no energy.
pub fn online_calibrate_steered(
    steered: &SteeredUtterance,
    stage1: &CalibrationFilter,
) -> Result<(CalibrationFilter, bool)> {
    let aligned = &steered.aligned;
    let corrected = compensate(aligned, std::slice::from_ref(stage1))?;
    let reference = das_reference(&corrected, &steered.status)?;
    let mut acc = CalibrationAccumulator::new(aligned.channels(), aligned.sample_rate(), aligned.config().fft_size);
    acc.accumulate(
        &usable_only(&corrected, &steered.status),
        &reference,
        &vec![true; aligned.frames()],
    )?;
    let silent = reference.coeffs().iter().all(|v| v.norm_sqr() == 0.0);
    if silent {
        log::warn!("online calibration skipped: utterance carries no energy");
        return Ok((
            CalibrationFilter::neutral(aligned.channels(), Stage::Online, aligned.sample_rate(), aligned.config().fft_size),
            false,
        ));
    }
    Ok((acc.finalize(Stage::Online)?, true))
}

/// Stage two: per-utterance calibration after the stage-one correction.
pub fn online_calibrate(
    wave: &MultichannelWave,
    stage1: &CalibrationFilter,
    ctx: &CalibrationContext,
) -> Result<CalibrationFilter> {
    let steered = steer_utterance(wave, ctx, std::slice::from_ref(stage1))?;
    Ok(online_calibrate_steered(&steered, stage1)?.0)
}
