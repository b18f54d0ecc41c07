//! SRP-PHAT localization over a fixed grid of candidate positions.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::Axis;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::array::{steering_delays, ArrayGeometry, ChannelStatus, Position, SourceLocation};
use crate::error::{Error, Result};
use crate::stft::Spectrogram;

/// Candidate positions, scored in order.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    candidates: Vec<Position>,
}

impl SearchGrid {
    pub fn new(candidates: Vec<Position>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidConfig("search grid is empty".into()));
        }
        if candidates.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite grid candidate".into()));
        }
        Ok(Self { candidates })
    }

    pub fn candidates(&self) -> &[Position] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Spherical shell of candidates around the array centroid.
///
/// Azimuth turns in the x-z plane from +z (in front of the array face) towards +x;
/// elevation tilts towards +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub azimuth_start_deg: f64,
    pub azimuth_stop_deg: f64,
    pub azimuth_step_deg: f64,
    pub elevation_start_deg: f64,
    pub elevation_stop_deg: f64,
    pub elevation_step_deg: f64,
    pub radius: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            azimuth_start_deg: -180.0,
            azimuth_stop_deg: 175.0,
            azimuth_step_deg: 5.0,
            elevation_start_deg: -30.0,
            elevation_stop_deg: 30.0,
            elevation_step_deg: 10.0,
            radius: 0.4,
        }
    }
}

fn steps(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || stop < start {
        return Err(Error::InvalidConfig(format!(
            "bad grid range {start}..{stop} step {step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Position at `radius` from `centre` in the given direction.
pub fn direction_to_position(
    centre: Position,
    azimuth_deg: f64,
    elevation_deg: f64,
    radius: f64,
) -> Position {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [
        centre[0] + radius * el.cos() * az.sin(),
        centre[1] + radius * el.sin(),
        centre[2] + radius * el.cos() * az.cos(),
    ]
}

impl GridConfig {
    /// Elevation-major list of candidates: for each elevation, every azimuth.
    pub fn build(&self, geometry: &ArrayGeometry) -> Result<SearchGrid> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig("grid radius must be positive".into()));
        }
        let centre = geometry.centroid();
        let az = steps(
            self.azimuth_start_deg,
            self.azimuth_stop_deg,
            self.azimuth_step_deg,
        )?;
        let el = steps(
            self.elevation_start_deg,
            self.elevation_stop_deg,
            self.elevation_step_deg,
        )?;
        let candidates = el
            .iter()
            .flat_map(|&e| {
                az.iter()
                    .map(move |&a| direction_to_position(centre, a, e, self.radius))
            })
            .collect();
        SearchGrid::new(candidates)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub location: SourceLocation,
    pub candidate: usize,
    /// SRP-PHAT score per grid candidate.
    pub scores: Vec<f64>,
    /// Number of channel pairs that contributed.
    pub pairs: usize,
}

/// Returns the grid candidate with the largest summed PHAT-weighted cross-spectrum
/// after steering, using only channels not flagged as failed. Ties go to the lowest
/// candidate index.
pub fn srp_phat(
    spec: &Spectrogram,
    geometry: &ArrayGeometry,
    grid: &SearchGrid,
    status: &ChannelStatus,
) -> Result<Localization> {
    if spec.channels() != geometry.channel_count() || status.channel_count() != spec.channels() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} channels, geometry {}, status {}",
            spec.channels(),
            geometry.channel_count(),
            status.channel_count()
        )));
    }
    let usable = status.usable();
    if usable.len() < 2 {
        return Err(Error::TooFewChannels {
            needed: 2,
            available: usable.len(),
        });
    }
    let bins = spec.bins();
    let pairs: Vec<(usize, usize)> = usable
        .iter()
        .enumerate()
        .flat_map(|(a, &i)| usable[a + 1..].iter().map(move |&j| (i, j)))
        .collect();

    // Frame-summed PHAT cross-spectra; the steering phase does not depend on the frame.
    let cross: Vec<Vec<Complex64>> = pairs
        .iter()
        .map(|&(i, j)| {
            let xi = spec.channel(i);
            let xj = spec.channel(j);
            let mut acc = vec![Complex64::new(0.0, 0.0); bins];
            for (ri, rj) in xi.axis_iter(Axis(0)).zip(xj.axis_iter(Axis(0))) {
                for (k, (a, b)) in ri.iter().zip(rj.iter()).enumerate() {
                    let p = a * b.conj();
                    let m = p.norm();
                    if m > 0.0 {
                        acc[k] += p / m;
                    }
                }
            }
            acc
        })
        .collect();

    let bin_hz = f64::from(spec.sample_rate()) / spec.config().fft_size as f64;
    let mut scores = Vec::with_capacity(grid.len());
    let mut best = (0usize, f64::NEG_INFINITY);
    for (c, pos) in grid.candidates().iter().enumerate() {
        let loc = steering_delays(geometry, *pos)?;
        let mut score = 0.0;
        for (&(i, j), g) in pairs.iter().zip(&cross) {
            let step = Complex64::from_polar(1.0, 2.0 * PI * bin_hz * (loc.delays[i] - loc.delays[j]));
            let mut phasor = Complex64::new(1.0, 0.0);
            for v in g {
                score += (v * phasor).re;
                phasor *= step;
            }
        }
        if score > best.1 {
            best = (c, score);
        }
        scores.push(score);
    }
    let location = steering_delays(geometry, grid.candidates()[best.0])?;
    Ok(Localization {
        location,
        candidate: best.0,
        scores,
        pairs: pairs.len(),
    })
}

/// CSV with columns `candidate,x,y,z,score`.
pub fn write_scores_csv(
    grid: &SearchGrid,
    scores: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "candidate,x,y,z,score")?;
    for (i, (p, s)) in grid.candidates().iter().zip(scores).enumerate() {
        writeln!(f, "{i},{},{},{},{s}", p[0], p[1], p[2])?;
    }
    f.flush()?;
    Ok(())
}
