//! MVDR beamforming on the STFT.
//!
//! Failed channels are dropped from the data, steering vectors and covariance
//! matrices rather than given zero weight.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{ChannelStatus, SourceLocation};
use crate::error::{Error, Result};
use crate::stft::Spectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    /// Share of lowest-energy frames treated as noise-only.
    pub noise_fraction: f64,
    /// Diagonal loading relative to the mean eigenvalue.
    pub diagonal_loading: f64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            noise_fraction: 0.2,
            diagonal_loading: 1e-3,
        }
    }
}

/// Loaded noise spatial covariance per frequency bin.
#[derive(Debug, Clone)]
pub struct NoiseCovariance {
    pub matrices: Vec<DMatrix<Complex64>>,
    /// Frames used for the estimate.
    pub frame_mask: Vec<bool>,
    /// Original channel index of each matrix row.
    pub channels: Vec<usize>,
    pub bin_frequencies: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BeamformerWeights {
    /// One weight vector per bin, ordered like `channels`.
    pub weights: Vec<Vec<Complex64>>,
    pub channels: Vec<usize>,
}

impl BeamformerWeights {
    /// Largest `|w^H d - 1|` over bins for the steering vectors of `loc`.
    pub fn distortionless_error(&self, loc: &SourceLocation, freqs: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(freqs)
            .map(|(w, &f)| {
                let d = steering_vector(loc, &self.channels, f);
                let resp: Complex64 = w.iter().zip(&d).map(|(a, b)| a.conj() * b).sum();
                (resp - 1.0).norm()
            })
            .fold(0.0, f64::max)
    }
}

/// `d(i) = exp(-j 2 pi f tau_i)` over the listed channels.
pub fn steering_vector(loc: &SourceLocation, channels: &[usize], freq: f64) -> Vec<Complex64> {
    channels
        .iter()
        .map(|&c| Complex64::from_polar(1.0, -2.0 * PI * freq * loc.delays[c]))
        .collect()
}

/// Indices of the `fraction` lowest-energy frames (at least one), by energy summed
/// over the given channels and all bins.
pub fn select_noise_frames(spec: &Spectrogram, channels: &[usize], fraction: f64) -> Result<Vec<bool>> {
    let frames = spec.frames();
    if frames == 0 {
        return Err(Error::TooShort {
            len: 0,
            window: spec.config().window_length,
        });
    }
    let mut energy: Vec<(usize, f64)> = (0..frames)
        .map(|t| {
            let e = channels
                .iter()
                .map(|&c| {
                    spec.coeffs()
                        .index_axis(Axis(0), c)
                        .row(t)
                        .iter()
                        .map(|v| v.norm_sqr())
                        .sum::<f64>()
                })
                .sum();
            (t, e)
        })
        .collect();
    energy.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let count = ((fraction * frames as f64).floor() as usize).clamp(1, frames);
    let mut mask = vec![false; frames];
    for &(t, _) in &energy[..count] {
        mask[t] = true;
    }
    Ok(mask)
}

/// Sample covariance over `frame_mask` for the given channels, with diagonal loading.
pub fn covariance_from_frames(
    spec: &Spectrogram,
    channels: &[usize],
    frame_mask: &[bool],
    diagonal_loading: f64,
) -> Result<NoiseCovariance> {
    let used: Vec<usize> = (0..spec.frames()).filter(|&t| frame_mask[t]).collect();
    if used.is_empty() {
        return Err(Error::InvalidConfig("no noise frames selected".into()));
    }
    let m = channels.len();
    let n = used.len() as f64;
    let sub = spec.coeffs().select(Axis(0), channels);
    let mut matrices = Vec::with_capacity(spec.bins());
    for k in 0..spec.bins() {
        let mut r = DMatrix::<Complex64>::zeros(m, m);
        for &t in &used {
            for a in 0..m {
                let xa = sub[(a, t, k)];
                for b in a..m {
                    r[(a, b)] += xa * sub[(b, t, k)].conj();
                }
            }
        }
        for a in 0..m {
            for b in a..m {
                r[(a, b)] /= n;
                if a == b {
                    r[(a, a)].im = 0.0;
                } else {
                    r[(b, a)] = r[(a, b)].conj();
                }
            }
        }
        let mean_eig = (0..m).map(|a| r[(a, a)].re).sum::<f64>() / m as f64;
        // The absolute floor keeps all-zero bins invertible.
        let load = diagonal_loading * mean_eig + f64::MIN_POSITIVE.sqrt();
        for a in 0..m {
            r[(a, a)] += Complex64::new(load, 0.0);
        }
        matrices.push(r);
    }
    Ok(NoiseCovariance {
        matrices,
        frame_mask: frame_mask.to_vec(),
        channels: channels.to_vec(),
        bin_frequencies: spec.bin_frequencies(),
    })
}

/// Noise covariance from the lowest-energy frames over the usable channels.
pub fn estimate_noise_covariance(
    spec: &Spectrogram,
    status: &ChannelStatus,
    config: &CovarianceConfig,
) -> Result<NoiseCovariance> {
    if status.channel_count() != spec.channels() {
        return Err(Error::ShapeMismatch(format!(
            "status covers {} channels, spectrogram has {}",
            status.channel_count(),
            spec.channels()
        )));
    }
    let channels = status.usable();
    if channels.is_empty() {
        return Err(Error::NoUsableChannels);
    }
    let mask = select_noise_frames(spec, &channels, config.noise_fraction)?;
    covariance_from_frames(spec, &channels, &mask, config.diagonal_loading)
}

/// `w = R^-1 d / (d^H R^-1 d)` per bin.
pub fn mvdr_weights(cov: &NoiseCovariance, loc: &SourceLocation) -> Result<BeamformerWeights> {
    let mut weights = Vec::with_capacity(cov.matrices.len());
    for (k, (r, &f)) in cov.matrices.iter().zip(&cov.bin_frequencies).enumerate() {
        let d = steering_vector(loc, &cov.channels, f);
        if d.len() == 1 {
            weights.push(d);
            continue;
        }
        let chol = r
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance { bin: k })?;
        let dv = DVector::from_vec(d);
        let u = chol.solve(&dv);
        let s: Complex64 = u.iter().zip(dv.iter()).map(|(a, b)| a.conj() * b).sum();
        if !(s.norm() > 0.0 && s.norm().is_finite()) {
            return Err(Error::SingularCovariance { bin: k });
        }
        let scale = s.conj();
        weights.push(u.iter().map(|v| v / scale).collect());
    }
    Ok(BeamformerWeights {
        weights,
        channels: cov.channels.clone(),
    })
}

/// `w = d / M`.
pub fn delay_and_sum_weights(
    loc: &SourceLocation,
    channels: &[usize],
    freqs: &[f64],
) -> BeamformerWeights {
    let m = channels.len() as f64;
    BeamformerWeights {
        weights: freqs
            .iter()
            .map(|&f| {
                steering_vector(loc, channels, f)
                    .into_iter()
                    .map(|v| v / m)
                    .collect()
            })
            .collect(),
        channels: channels.to_vec(),
    }
}

/// `Y(k, t) = w_k^H x(k, t)`, as a single-channel spectrogram.
pub fn apply_beamformer(spec: &Spectrogram, w: &BeamformerWeights) -> Result<Spectrogram> {
    if w.weights.len() != spec.bins() {
        return Err(Error::ShapeMismatch(format!(
            "weights cover {} bins, spectrogram has {}",
            w.weights.len(),
            spec.bins()
        )));
    }
    if let Some(&bad) = w.channels.iter().find(|&&c| c >= spec.channels()) {
        return Err(Error::ShapeMismatch(format!(
            "weight channel {bad} not in a {}-channel spectrogram",
            spec.channels()
        )));
    }
    let mut out = Array2::<Complex64>::zeros((spec.frames(), spec.bins()));
    for (slot, &ch) in w.channels.iter().enumerate() {
        let x = spec.channel(ch);
        for ((t, k), y) in out.indexed_iter_mut() {
            *y += w.weights[k][slot].conj() * x[(t, k)];
        }
    }
    spec.single_channel(out)
}

/// Expected output power `w^H R w` per bin.
pub fn output_power(cov: &NoiseCovariance, w: &BeamformerWeights) -> Vec<f64> {
    cov.matrices
        .iter()
        .zip(&w.weights)
        .map(|(r, wk)| {
            let wv = DVector::from_column_slice(wk);
            (wv.adjoint() * r * &wv)[(0, 0)].re
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stft::StftConfig;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn cgauss(rng: &mut ChaCha8Rng) -> Complex64 {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }

    fn spec_from(coeffs: Array3<Complex64>) -> Spectrogram {
        let frames = coeffs.dim().1;
        let config = StftConfig {
            window_length: 16,
            hop: 4,
            window: crate::stft::Window::SqrtHann,
            fft_size: (coeffs.dim().2 - 1) * 2,
        };
        Spectrogram::from_coeffs(coeffs, config, 16000, frames * 4).unwrap()
    }

    fn zero_loc(m: usize) -> SourceLocation {
        SourceLocation {
            position: [0.0; 3],
            delays: vec![0.0; m],
        }
    }

    #[test]
    fn white_noise_covariance_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = 2500;
        let coeffs = Array3::from_shape_simple_fn((2, frames, 3), || cgauss(&mut rng));
        let spec = spec_from(coeffs);
        // 20% of 2500 frames gives 500 noise frames.
        let cov = estimate_noise_covariance(&spec, &ChannelStatus::all_ok(2), &CovarianceConfig::default()).unwrap();
        assert_eq!(cov.frame_mask.iter().filter(|&&m| m).count(), 500);
        for r in &cov.matrices {
            let sigma2 = 0.5 * (r[(0, 0)].re + r[(1, 1)].re);
            assert!(r[(0, 1)].norm() / sigma2 < 0.1);
            assert!((r[(0, 1)] - r[(1, 0)].conj()).norm() < 1e-10);
        }
    }

    #[test]
    fn single_frame_is_rank_one_plus_loading() {
        let x = [Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25)];
        let coeffs = Array3::from_shape_fn((2, 1, 2), |(c, _, _)| x[c]);
        let spec = spec_from(coeffs);
        let cov = estimate_noise_covariance(&spec, &ChannelStatus::all_ok(2), &CovarianceConfig::default()).unwrap();
        let tr = x[0].norm_sqr() + x[1].norm_sqr();
        let load = 1e-3 * tr / 2.0;
        let r = &cov.matrices[0];
        assert!((r[(0, 1)] - x[0] * x[1].conj()).norm() < 1e-12);
        assert!((r[(0, 0)].re - x[0].norm_sqr() - load).abs() < 1e-12);
        assert!((r[(1, 1)].re - x[1].norm_sqr() - load).abs() < 1e-12);
    }

    #[test]
    fn duplicated_channel_is_invertible_after_loading() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = Array2::from_shape_simple_fn((50, 3), || cgauss(&mut rng));
        let coeffs = Array3::from_shape_fn((2, 50, 3), |(_, t, k)| base[(t, k)]);
        let spec = spec_from(coeffs.clone());
        let no_load = covariance_from_frames(&spec, &[0, 1], &vec![true; 50], 0.0).unwrap();
        let det = no_load.matrices[1].determinant().norm();
        let scale = no_load.matrices[1][(0, 0)].re.powi(2);
        assert!(det / scale < 1e-12);
        let cov = covariance_from_frames(&spec, &[0, 1], &vec![true; 50], 1e-3).unwrap();
        for r in &cov.matrices {
            assert!(r.clone().cholesky().is_some());
        }
        let w = mvdr_weights(&cov, &zero_loc(2)).unwrap();
        assert!(w.distortionless_error(&zero_loc(2), &cov.bin_frequencies) < 1e-8);
    }

    #[test]
    fn single_channel_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coeffs = Array3::from_shape_simple_fn((1, 20, 5), || cgauss(&mut rng));
        let spec = spec_from(coeffs);
        let cov = estimate_noise_covariance(&spec, &ChannelStatus::all_ok(1), &CovarianceConfig::default()).unwrap();
        let w = mvdr_weights(&cov, &zero_loc(1)).unwrap();
        assert!(w.weights.iter().all(|v| v == &vec![Complex64::new(1.0, 0.0)]));
    }

    #[test]
    fn identity_covariance_gives_scaled_steering_vector() {
        let m = 6;
        let loc = SourceLocation {
            position: [0.0; 3],
            delays: (0..m).map(|i| i as f64 * 1.3e-4).collect(),
        };
        let freqs = vec![0.0, 500.0, 2000.0, 7999.0];
        let cov = NoiseCovariance {
            matrices: vec![DMatrix::identity(m, m); freqs.len()],
            frame_mask: vec![true],
            channels: (0..m).collect(),
            bin_frequencies: freqs.clone(),
        };
        let w = mvdr_weights(&cov, &loc).unwrap();
        for (wk, &f) in w.weights.iter().zip(&freqs) {
            let d = steering_vector(&loc, &cov.channels, f);
            for (a, b) in wk.iter().zip(&d) {
                assert!((a - b / 6.0).norm() < 1e-14);
            }
        }
        assert!(w.distortionless_error(&loc, &freqs) < 1e-12);
    }

    #[test]
    fn selector_weights_return_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let coeffs = Array3::from_shape_simple_fn((3, 7, 5), || cgauss(&mut rng));
        let spec = spec_from(coeffs);
        let w = BeamformerWeights {
            weights: vec![vec![Complex64::new(1.0, 0.0), 0.0.into(), 0.0.into()]; 5],
            channels: vec![0, 1, 2],
        };
        let y = apply_beamformer(&spec, &w).unwrap();
        assert_eq!(y.channels(), 1);
        assert_eq!(y.channel(0), spec.channel(0));
        let zero = spec.with_coeffs(Array3::zeros((3, 7, 5))).unwrap();
        assert!(apply_beamformer(&zero, &w).unwrap().coeffs().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn plane_wave_passes_undistorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 4;
        let loc = SourceLocation {
            position: [0.0; 3],
            delays: vec![0.0, 1e-4, -2e-4, 3e-4],
        };
        let src = Array2::from_shape_simple_fn((30, 9), || cgauss(&mut rng));
        let noise = Array3::from_shape_simple_fn((m, 30, 9), || cgauss(&mut rng));
        let noise_spec = spec_from(noise);
        let cov = estimate_noise_covariance(&noise_spec, &ChannelStatus::all_ok(m), &CovarianceConfig::default()).unwrap();
        let w = mvdr_weights(&cov, &loc).unwrap();
        let freqs = noise_spec.bin_frequencies();
        let plane = Array3::from_shape_fn((m, 30, 9), |(c, t, k)| {
            src[(t, k)] * Complex64::from_polar(1.0, -2.0 * PI * freqs[k] * loc.delays[c])
        });
        let y = apply_beamformer(&noise_spec.with_coeffs(plane).unwrap(), &w).unwrap();
        for (a, b) in y.channel(0).iter().zip(src.iter()) {
            assert!((a - b).norm() < 1e-8 * b.norm().max(1.0));
        }
    }

    #[test]
    fn mvdr_never_worse_than_delay_and_sum_under_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = 5;
        let coeffs = Array3::from_shape_simple_fn((m, 40, 17), || cgauss(&mut rng));
        // Correlate the channels a little.
        let mixed = Array3::from_shape_fn((m, 40, 17), |(c, t, k)| {
            coeffs[(c, t, k)] + coeffs[((c + 1) % m, t, k)] * 0.7
        });
        let spec = spec_from(mixed);
        let cov = estimate_noise_covariance(&spec, &ChannelStatus::all_ok(m), &CovarianceConfig { noise_fraction: 1.0, ..Default::default() }).unwrap();
        let loc = SourceLocation {
            position: [0.0; 3],
            delays: vec![0.0, 2e-4, 4e-4, 1e-4, -3e-4],
        };
        let mvdr = mvdr_weights(&cov, &loc).unwrap();
        let das = delay_and_sum_weights(&loc, &cov.channels, &cov.bin_frequencies);
        for (a, b) in output_power(&cov, &mvdr).iter().zip(output_power(&cov, &das)) {
            assert!(*a <= b * (1.0 + 1e-10));
        }
    }

    #[test]
    fn failed_channels_are_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coeffs = Array3::from_shape_simple_fn((3, 20, 5), || cgauss(&mut rng));
        let spec = spec_from(coeffs);
        let mut status = ChannelStatus::all_ok(3);
        status.failed[1] = true;
        let cov = estimate_noise_covariance(&spec, &status, &CovarianceConfig::default()).unwrap();
        assert_eq!(cov.channels, vec![0, 2]);
        assert_eq!(cov.matrices[0].nrows(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn beamformer_is_linear(seed in 0u64..500, a in -2.0f64..2.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Array3::from_shape_simple_fn((3, 6, 5), || cgauss(&mut rng));
                let y = Array3::from_shape_simple_fn((3, 6, 5), || cgauss(&mut rng));
                let w = BeamformerWeights {
                    weights: (0..5).map(|_| (0..3).map(|_| cgauss(&mut rng)).collect()).collect(),
                    channels: vec![0, 1, 2],
                };
                let sx = spec_from(x.clone());
                let lhs = apply_beamformer(&sx.with_coeffs(&x * a + &y).unwrap(), &w).unwrap();
                let rx = apply_beamformer(&sx, &w).unwrap();
                let ry = apply_beamformer(&sx.with_coeffs(y).unwrap(), &w).unwrap();
                for ((l, p), q) in lhs.coeffs().iter().zip(rx.coeffs()).zip(ry.coeffs()) {
                    prop_assert!((l - (p * a + q)).norm() < 1e-12);
                }
            }
        }
    }
}
