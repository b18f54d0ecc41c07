//! Multichannel audio container and WAV I/O.
//!
//! Two input layouts are supported: a single interleaved N-channel file, or an
//! ordered set of mono files (the corpus convention is one file per channel,
//! named `<utterance>.CH<n>.wav`). Samples are held planar as `f64`.

use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar multichannel signal at a common sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWave {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl MultichannelWave {
    /// Builds a wave from a `(channel, sample)` array.
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidWave("sample rate must be positive".into()));
        }
        if samples.nrows() == 0 {
            return Err(Error::InvalidWave("at least one channel is required".into()));
        }
        if let Some(((c, i), v)) = samples.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidWave(format!(
                "non-finite sample {v} at channel {c}, index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Builds a wave from one vector per channel. All channels must have equal length.
    pub fn from_channels(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        let n_ch = channels.len();
        if n_ch == 0 {
            return Err(Error::InvalidWave("at least one channel is required".into()));
        }
        let len = channels[0].len();
        if let Some(bad) = channels.iter().position(|c| c.len() != len) {
            return Err(Error::InvalidWave(format!(
                "channel {bad} has {} samples, channel 0 has {len}",
                channels[bad].len()
            )));
        }
        let flat: Vec<f64> = channels.into_iter().flatten().collect();
        let samples = Array2::from_shape_vec((n_ch, len), flat)
            .map_err(|e| Error::InvalidWave(e.to_string()))?;
        Self::new(samples, sample_rate)
    }

    pub fn channel_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, index: usize) -> ArrayView1<'_, f64> {
        self.samples.index_axis(Axis(0), index)
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }

    /// Returns a wave holding only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.channel_count()) {
            return Err(Error::InvalidWave(format!(
                "channel {bad} out of range for a {}-channel wave",
                self.channel_count()
            )));
        }
        Self::new(self.samples.select(Axis(0), channels), self.sample_rate)
    }
}

/// Where to read a multichannel utterance from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputDescriptor {
    /// One interleaved N-channel file.
    Multichannel(PathBuf),
    /// Ordered mono files; file `i` becomes channel `i`.
    PerChannel(Vec<PathBuf>),
}

impl InputDescriptor {
    /// Per-channel descriptor for `<stem>.CH1.wav` .. `<stem>.CH<n>.wav`.
    pub fn channel_files(stem: impl AsRef<Path>, channels: usize) -> Self {
        let stem = stem.as_ref().as_os_str().to_string_lossy().into_owned();
        InputDescriptor::PerChannel(
            (1..=channels)
                .map(|n| PathBuf::from(format!("{stem}.CH{n}.wav")))
                .collect(),
        )
    }

    pub fn paths(&self) -> Vec<&Path> {
        match self {
            InputDescriptor::Multichannel(p) => vec![p.as_path()],
            InputDescriptor::PerChannel(ps) => ps.iter().map(PathBuf::as_path).collect(),
        }
    }
}

/// Sample encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Pcm16,
    #[default]
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

fn read_planar(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::UnsupportedEncoding(format!(
            "{} declares zero channels",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = f64::from(1u32 << (bits - 1));
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{}: {bits}-bit {fmt:?}",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut planar = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (ch, &v) in frame.iter().enumerate() {
            planar[ch].push(v);
        }
    }
    Ok((planar, spec.sample_rate))
}

/// Reads a multichannel utterance. Channel order follows the descriptor.
pub fn read_multichannel(descriptor: &InputDescriptor) -> Result<MultichannelWave> {
    match descriptor {
        InputDescriptor::Multichannel(path) => {
            let (channels, rate) = read_planar(path)?;
            MultichannelWave::from_channels(channels, rate)
        }
        InputDescriptor::PerChannel(paths) => {
            if paths.is_empty() {
                return Err(Error::InvalidWave("empty channel file list".into()));
            }
            let mut channels = Vec::with_capacity(paths.len());
            let mut reference: Option<(u32, usize)> = None;
            for path in paths {
                let (mut planar, rate) = read_planar(path)?;
                if planar.len() != 1 {
                    return Err(Error::UnsupportedEncoding(format!(
                        "{} has {} channels, expected mono",
                        path.display(),
                        planar.len()
                    )));
                }
                let samples = planar.pop().unwrap_or_default();
                match reference {
                    None => reference = Some((rate, samples.len())),
                    Some((r, _)) if r != rate => {
                        return Err(Error::SampleRateMismatch {
                            expected: r,
                            found: rate,
                            path: path.clone(),
                        })
                    }
                    Some((_, n)) if n != samples.len() => {
                        return Err(Error::LengthMismatch {
                            expected: n,
                            found: samples.len(),
                            path: path.clone(),
                        })
                    }
                    Some(_) => {}
                }
                channels.push(samples);
            }
            let rate = reference.map(|(r, _)| r).unwrap_or_default();
            MultichannelWave::from_channels(channels, rate)
        }
    }
}

/// Writes an interleaved WAV file.
///
/// PCM16 rejects samples outside `[-1, 1]` instead of silently clipping them.
pub fn write_wave(wave: &MultichannelWave, path: impl AsRef<Path>, encoding: Encoding) -> Result<()> {
    let path = path.as_ref();
    let n_ch = u16::try_from(wave.channel_count())
        .map_err(|_| Error::UnsupportedEncoding("too many channels for WAV".into()))?;
    let spec = WavSpec {
        channels: n_ch,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match encoding {
            Encoding::Pcm16 => 16,
            Encoding::Float32 => 32,
        },
        sample_format: match encoding {
            Encoding::Pcm16 => SampleFormat::Int,
            Encoding::Float32 => SampleFormat::Float,
        },
    };
    if encoding == Encoding::Pcm16 {
        if let Some(((channel, index), &value)) =
            wave.samples().indexed_iter().find(|(_, v)| v.abs() > 1.0)
        {
            return Err(Error::Clipping {
                channel,
                index,
                value,
            });
        }
    }
    let mut writer = WavWriter::create(path, spec)?;
    for t in 0..wave.len() {
        for ch in 0..wave.channel_count() {
            let v = wave.samples()[(ch, t)];
            match encoding {
                Encoding::Pcm16 => {
                    let q = (v * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                Encoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
