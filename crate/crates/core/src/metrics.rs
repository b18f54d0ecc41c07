//! Objective quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported value for a perfect match.
pub const SI_SDR_CAP_DB: f64 = 60.0;
pub const SEGMENT_SECONDS: f64 = 0.032;
pub const SEGMENT_SNR_RANGE: (f64, f64) = (-10.0, 35.0);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB, capped at [`SI_SDR_CAP_DB`].
pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    let (est, reference) = (&estimate[..n], &reference[..n]);
    let energy = dot(reference, reference);
    if energy <= 0.0 {
        return Err(Error::InvalidWave("reference has zero energy".into()));
    }
    let alpha = dot(est, reference) / energy;
    let target_energy = alpha * alpha * energy;
    let error: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, r)| (alpha * r - e).powi(2))
        .sum();
    if error <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if target_energy <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / error).log10()).min(SI_SDR_CAP_DB))
}

/// Mean over non-overlapping frames of the per-frame SNR, each clamped to
/// [`SEGMENT_SNR_RANGE`].
pub fn segmental_snr(estimate: &[f64], reference: &[f64], frame_len: usize) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    if frame_len == 0 || n < frame_len {
        return Err(Error::InvalidWave(format!(
            "need at least one {frame_len}-sample frame, have {n} samples"
        )));
    }
    let (lo, hi) = SEGMENT_SNR_RANGE;
    let frames: Vec<f64> = estimate[..n]
        .chunks_exact(frame_len)
        .zip(reference[..n].chunks_exact(frame_len))
        .map(|(e, r)| {
            let sig = dot(r, r);
            let err: f64 = e.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum();
            if err <= 0.0 {
                hi
            } else if sig <= 0.0 {
                lo
            } else {
                (10.0 * (sig / err).log10()).clamp(lo, hi)
            }
        })
        .collect();
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// Mean gain per frequency band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStat {
    pub mask: String,
    pub low_hz: f64,
    pub high_hz: f64,
    pub mean_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub si_sdr: f64,
    pub si_sdr_noisy: f64,
    pub si_sdr_improvement: f64,
    pub segmental_snr: f64,
    pub segmental_snr_noisy: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub band_stats: Vec<BandStat>,
}

/// Scores `enhanced` and the unprocessed `noisy` channel against `reference`.
pub fn evaluate(enhanced: &[f64], reference: &[f64], noisy: &[f64], sample_rate: u32) -> Result<MetricReport> {
    let frame = (SEGMENT_SECONDS * f64::from(sample_rate)).round() as usize;
    let si = si_sdr(enhanced, reference)?;
    let si_noisy = si_sdr(noisy, reference)?;
    Ok(MetricReport {
        si_sdr: si,
        si_sdr_noisy: si_noisy,
        si_sdr_improvement: si - si_noisy,
        segmental_snr: segmental_snr(enhanced, reference, frame)?,
        segmental_snr_noisy: segmental_snr(noisy, reference, frame)?,
        band_stats: Vec::new(),
    })
}
