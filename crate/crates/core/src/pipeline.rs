//! End-to-end enhancement: localization, MVDR beamforming and coherence / phase
//! masking of the beamformer output, plus batch processing.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::array::{align, detect_failures, ArrayGeometry, ChannelStatus, FailureConfig};
use crate::audio::{read_multichannel, write_wave, Encoding, InputDescriptor, MultichannelWave};
use crate::beamformer::{apply_beamformer, estimate_noise_covariance, mvdr_weights, CovarianceConfig};
use crate::calibration::{compensate, online_calibrate_steered, CalibrationFilter, SteeredUtterance};
use crate::error::{Error, Result};
use crate::localizer::{srp_phat, write_scores_csv, GridConfig, SearchGrid};
use crate::masking::{
    combine_and_apply, msc, pdm, pdm_mask, welch_cross_spectra, Mask, MaskSelection,
    DEFAULT_WELCH_HALF_WIDTH,
};
use crate::stft::{stft_analyze, stft_synthesize, write_spectrogram_dump, Spectrogram, StftConfig};

pub const DEFAULT_MASK_FLOOR: f64 = 0.05;

/// Calibration files applied during enhancement.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Filters compensated in order before the phase-difference mask.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Refine the last offline filter on every utterance before masking.
    #[serde(default)]
    pub online: bool,
}

/// Intermediate results written next to the enhanced output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpConfig {
    /// `<id>.msc.mask`, `<id>.pdm.mask`, `<id>.mask` and a per-band CSV summary.
    #[serde(default)]
    pub masks: bool,
    /// `<id>.srp.csv`.
    #[serde(default)]
    pub scores: bool,
    /// `<id>.beam.spec`, the beamformer output before masking.
    #[serde(default)]
    pub spectrogram: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancementConfig {
    pub stft: StftConfig,
    pub geometry: ArrayGeometry,
    pub masks: MaskSelection,
    /// Lower bound of the combined gain.
    pub floor: f64,
    /// Frames on either side of the Welch average.
    pub welch_halfwidth: usize,
    pub failure: FailureConfig,
    pub grid: GridConfig,
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub dump: DumpConfig,
    /// Encoding of enhanced files.
    #[serde(default)]
    pub output_encoding: Encoding,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            geometry: ArrayGeometry::tablet(),
            masks: MaskSelection::default(),
            floor: DEFAULT_MASK_FLOOR,
            welch_halfwidth: DEFAULT_WELCH_HALF_WIDTH,
            failure: FailureConfig::default(),
            grid: GridConfig::default(),
            covariance: CovarianceConfig::default(),
            calibration: CalibrationConfig::default(),
            dump: DumpConfig::default(),
            output_encoding: Encoding::default(),
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.geometry.validate()?;
        if !(0.0..1.0).contains(&self.floor) {
            return Err(Error::InvalidConfig(format!(
                "mask floor {} outside [0, 1)",
                self.floor
            )));
        }
        if !(self.covariance.noise_fraction > 0.0 && self.covariance.noise_fraction <= 1.0) {
            return Err(Error::InvalidConfig("noise_fraction must be in (0, 1]".into()));
        }
        if !(self.covariance.diagonal_loading >= 0.0) {
            return Err(Error::InvalidConfig("diagonal_loading must be >= 0".into()));
        }
        if self.calibration.online && self.calibration.paths.is_empty() {
            return Err(Error::InvalidConfig(
                "online calibration needs an offline filter".into(),
            ));
        }
        self.grid.build(&self.geometry)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative calibration paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.calibration.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads every configured calibration file.
    pub fn load_calibration(&self) -> Result<Vec<CalibrationFilter>> {
        self.calibration
            .paths
            .iter()
            .map(CalibrationFilter::read)
            .collect()
    }
}

/// Mean gains of the masks that were computed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskMeans {
    pub msc: Option<f64>,
    pub pdm: Option<f64>,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub failed_channels: Vec<usize>,
    /// Channel level relative to the median, `None` for silent channels.
    pub rms_deviation_db: Vec<Option<f64>>,
    /// Absent when fewer than two channels were usable.
    pub location: Option<[f64; 3]>,
    pub candidate: Option<usize>,
    pub beamformer_channels: Vec<usize>,
    pub pdm_channels: Vec<usize>,
    pub mask_means: MaskMeans,
    pub online_calibrated: bool,
    pub frames: usize,
}

/// Everything `enhance_utterance` produced.
#[derive(Debug, Clone)]
pub struct Enhancement {
    pub enhanced: MultichannelWave,
    pub diagnostics: Diagnostics,
    pub msc_mask: Option<Mask>,
    pub pdm_mask: Option<Mask>,
    pub combined_mask: Mask,
    /// SRP-PHAT score per grid candidate.
    pub scores: Option<Vec<f64>>,
    /// Beamformer output before masking.
    pub beamformed: Spectrogram,
    pub online_filter: Option<CalibrationFilter>,
}

fn check_filters(filters: &[CalibrationFilter], spec: &Spectrogram) -> Result<()> {
    for f in filters {
        if f.channels() != spec.channels()
            || f.bins() != spec.bins()
            || f.sample_rate != spec.sample_rate()
            || f.fft_size != spec.config().fft_size
        {
            return Err(Error::Calibration(format!(
                "filter for {} channels, {} bins at {} Hz / fft {} does not match input \
                 with {} channels, {} bins at {} Hz / fft {}",
                f.channels(),
                f.bins(),
                f.sample_rate,
                f.fft_size,
                spec.channels(),
                spec.bins(),
                spec.sample_rate(),
                spec.config().fft_size
            )));
        }
    }
    Ok(())
}

/// Enhances one utterance with an already built search grid and loaded filters.
pub fn enhance_with(
    config: &EnhancementConfig,
    grid: &SearchGrid,
    filters: &[CalibrationFilter],
    wave: &MultichannelWave,
) -> Result<Enhancement> {
    let geometry = &config.geometry;
    if wave.channel_count() != geometry.channel_count() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, geometry has {}",
            wave.channel_count(),
            geometry.channel_count()
        )));
    }
    let spec = stft_analyze(wave, &config.stft)?;
    check_filters(filters, &spec)?;
    let status = detect_failures(wave, geometry, &config.failure)?;
    let usable = status.usable();
    if usable.len() < 2 {
        log::warn!("only channel {:?} usable, passing it through", usable);
        return pass_through(config, &spec, &status);
    }

    let localization = srp_phat(&spec, geometry, grid, &status)?;
    let location = localization.location.clone();
    let aligned = align(&spec, &location)?;

    let cov = estimate_noise_covariance(&spec, &status, &config.covariance)?;
    let weights = mvdr_weights(&cov, &location)?;
    let beamformed = apply_beamformer(&spec, &weights)?;

    let msc_mask = if config.masks.msc {
        let cross = welch_cross_spectra(&aligned, &usable, config.welch_halfwidth)?;
        Some(msc(&cross))
    } else {
        None
    };

    let pdm_channels: Vec<usize> = usable
        .iter()
        .copied()
        .filter(|c| !geometry.pdm_excluded.contains(c))
        .collect();
    let mut online_filter = None;
    let pdm_mask = if config.masks.pdm && pdm_channels.len() >= 2 {
        let mut active = filters.to_vec();
        if config.calibration.online {
            let stage1 = filters
                .last()
                .ok_or_else(|| Error::InvalidConfig("online calibration needs an offline filter".into()))?;
            let steered = SteeredUtterance {
                aligned: compensate(&aligned, &filters[..filters.len() - 1])?,
                status: status.clone(),
                location: location.clone(),
                candidate: localization.candidate,
            };
            let (filter, fitted) = online_calibrate_steered(&steered, stage1)?;
            if fitted {
                active.push(filter.clone());
                online_filter = Some(filter);
            }
        }
        let field = pdm(&aligned, &pdm_channels, &active)?;
        Some(pdm_mask(&field, f64::from(spec.sample_rate())))
    } else {
        if config.masks.pdm {
            log::warn!("phase-difference mask skipped: {} eligible channels", pdm_channels.len());
        }
        None
    };

    let (masked, combined) =
        combine_and_apply(&beamformed, msc_mask.as_ref(), pdm_mask.as_ref(), config.floor)?;
    let enhanced = stft_synthesize(&masked)?;
    let diagnostics = Diagnostics {
        failed_channels: failed(&status),
        rms_deviation_db: finite_or_none(&status.rms_deviation_db),
        location: Some(location.position),
        candidate: Some(localization.candidate),
        beamformer_channels: weights.channels.clone(),
        pdm_channels: if pdm_mask.is_some() { pdm_channels } else { Vec::new() },
        mask_means: MaskMeans {
            msc: msc_mask.as_ref().map(Mask::mean),
            pdm: pdm_mask.as_ref().map(Mask::mean),
            combined: combined.mean(),
        },
        online_calibrated: online_filter.is_some(),
        frames: spec.frames(),
    };
    Ok(Enhancement {
        enhanced,
        diagnostics,
        msc_mask,
        pdm_mask,
        combined_mask: combined,
        scores: Some(localization.scores),
        beamformed,
        online_filter,
    })
}

fn finite_or_none(values: &[f64]) -> Vec<Option<f64>> {
    values.iter().map(|v| v.is_finite().then_some(*v)).collect()
}

fn failed(status: &ChannelStatus) -> Vec<usize> {
    status
        .failed
        .iter()
        .enumerate()
        .filter_map(|(i, &f)| f.then_some(i))
        .collect()
}

/// Single usable channel: no localization, beamforming or masking is possible.
fn pass_through(
    config: &EnhancementConfig,
    spec: &Spectrogram,
    status: &ChannelStatus,
) -> Result<Enhancement> {
    let ch = status.usable()[0];
    let beamformed = spec.single_channel(spec.coeffs().index_axis(Axis(0), ch).to_owned())?;
    let (masked, combined) = combine_and_apply(&beamformed, None, None, config.floor)?;
    let enhanced = stft_synthesize(&masked)?;
    Ok(Enhancement {
        enhanced,
        diagnostics: Diagnostics {
            failed_channels: failed(status),
            rms_deviation_db: finite_or_none(&status.rms_deviation_db),
            location: None,
            candidate: None,
            beamformer_channels: vec![ch],
            pdm_channels: Vec::new(),
            mask_means: MaskMeans {
                msc: None,
                pdm: None,
                combined: combined.mean(),
            },
            online_calibrated: false,
            frames: spec.frames(),
        },
        msc_mask: None,
        pdm_mask: None,
        combined_mask: combined,
        scores: None,
        beamformed,
        online_filter: None,
    })
}

/// Enhances one utterance into a single-channel signal of the same length.
pub fn enhance_utterance(config: &EnhancementConfig, wave: &MultichannelWave) -> Result<Enhancement> {
    config.validate()?;
    let grid = config.grid.build(&config.geometry)?;
    let filters = config.load_calibration()?;
    enhance_with(config, &grid, &filters, wave)
}

/// One line of a batch manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub input: InputDescriptor,
}

/// Reads a JSON array of manifest entries; relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    for e in &mut entries {
        match &mut e.input {
            InputDescriptor::Multichannel(p) => resolve(p),
            InputDescriptor::PerChannel(ps) => ps.iter_mut().for_each(resolve),
        }
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemStatus {
    Ok,
    Error,
    /// Not attempted because a strict batch stopped early.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub status: ItemStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub items: Vec<BatchItem>,
    pub succeeded: usize,
    pub failed: usize,
}

impl BatchReport {
    /// 0 when every item succeeded, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failed == 0 {
            0
        } else {
            2
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    /// Stop at the first failing utterance and return its error.
    pub strict: bool,
    /// Worker threads; utterances are independent.
    pub jobs: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            strict: false,
            jobs: 1,
        }
    }
}

/// Writes per-band mean gains of each mask as CSV.
pub fn write_mask_summary(
    enh: &Enhancement,
    freqs: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    use std::io::Write;
    let nyquist = freqs.last().copied().unwrap_or(0.0);
    let edges: Vec<f64> = [0.0, 500.0, 1000.0, 2000.0, 4000.0, nyquist + 1.0]
        .into_iter()
        .filter(|&e| e <= nyquist + 1.0)
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "mask,low_hz,high_hz,mean_gain")?;
    let masks = [
        ("msc", enh.msc_mask.as_ref()),
        ("pdm", enh.pdm_mask.as_ref()),
        ("combined", Some(&enh.combined_mask)),
    ];
    for (name, mask) in masks {
        let Some(mask) = mask else { continue };
        for (w, m) in edges.windows(2).zip(mask.band_means(freqs, &edges)) {
            writeln!(f, "{name},{},{},{m}", w[0], w[1].min(nyquist))?;
        }
    }
    f.flush()?;
    Ok(())
}

fn process_item(
    config: &EnhancementConfig,
    grid: &SearchGrid,
    filters: &[CalibrationFilter],
    entry: &ManifestEntry,
    out_dir: &Path,
) -> Result<(PathBuf, Diagnostics)> {
    let wave = read_multichannel(&entry.input)?;
    let enh = enhance_with(config, grid, filters, &wave)?;
    let out = out_dir.join(format!("{}.enh.wav", entry.id));
    write_wave(&enh.enhanced, &out, config.output_encoding)?;
    if config.dump.masks {
        let stem = out_dir.join(&entry.id);
        if let Some(m) = &enh.msc_mask {
            m.write_dump(stem.with_extension("msc.mask"))?;
        }
        if let Some(m) = &enh.pdm_mask {
            m.write_dump(stem.with_extension("pdm.mask"))?;
        }
        enh.combined_mask.write_dump(stem.with_extension("mask"))?;
        write_mask_summary(
            &enh,
            &enh.beamformed.bin_frequencies(),
            out_dir.join(format!("{}.masks.csv", entry.id)),
        )?;
    }
    if config.dump.scores {
        if let Some(scores) = &enh.scores {
            write_scores_csv(grid, scores, out_dir.join(format!("{}.srp.csv", entry.id)))?;
        }
    }
    if config.dump.spectrogram {
        write_spectrogram_dump(&enh.beamformed, out_dir.join(format!("{}.beam.spec", entry.id)))?;
    }
    Ok((out, enh.diagnostics))
}

type ItemResult = Result<(PathBuf, Diagnostics)>;

/// Enhances every manifest entry into `<out_dir>/<id>.enh.wav` and writes
/// `<out_dir>/report.json`. Per-item errors are recorded unless `strict`, in which
/// case the first error is returned.
pub fn run_batch(
    config: &EnhancementConfig,
    manifest: &[ManifestEntry],
    out_dir: impl AsRef<Path>,
    options: BatchOptions,
) -> Result<BatchReport> {
    let out_dir = out_dir.as_ref();
    config.validate()?;
    let mut seen = std::collections::BTreeSet::new();
    for e in manifest {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate manifest id {:?}", e.id)));
        }
        if e.id.is_empty() || e.id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!("bad manifest id {:?}", e.id)));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let grid = config.grid.build(&config.geometry)?;
    let filters = config.load_calibration()?;

    let results: Mutex<Vec<Option<ItemResult>>> =
        Mutex::new((0..manifest.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let worker = || loop {
        if abort.load(Ordering::SeqCst) {
            break;
        }
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(entry) = manifest.get(i) else { break };
        let r = process_item(config, &grid, &filters, entry, out_dir);
        if let Err(e) = &r {
            log::error!("{}: {e}", entry.id);
            if options.strict {
                abort.store(true, Ordering::SeqCst);
            }
        }
        results.lock().expect("no poisoned workers")[i] = Some(r);
    };
    let jobs = options.jobs.max(1).min(manifest.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut report = BatchReport::default();
    let mut first_error = None;
    for (entry, r) in manifest.iter().zip(results.into_inner().expect("no poisoned workers")) {
        let item = match r {
            Some(Ok((output, diagnostics))) => {
                report.succeeded += 1;
                BatchItem {
                    id: entry.id.clone(),
                    status: ItemStatus::Ok,
                    output: Some(output),
                    error: None,
                    diagnostics: Some(diagnostics),
                }
            }
            Some(Err(e)) => {
                report.failed += 1;
                let msg = e.to_string();
                first_error.get_or_insert(e);
                BatchItem {
                    id: entry.id.clone(),
                    status: ItemStatus::Error,
                    output: None,
                    error: Some(msg),
                    diagnostics: None,
                }
            }
            None => BatchItem {
                id: entry.id.clone(),
                status: ItemStatus::Skipped,
                output: None,
                error: None,
                diagnostics: None,
            },
        };
        report.items.push(item);
    }
    report.write_json(out_dir.join("report.json"))?;
    match first_error {
        Some(e) if options.strict => Err(e),
        _ => Ok(report),
    }
}
