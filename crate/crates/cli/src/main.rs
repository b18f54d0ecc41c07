use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tfmask_core::audio::{read_multichannel, write_wave};
use tfmask_core::calibration::{offline_calibrate, online_calibrate, DEFAULT_OFFLINE_PASSES};
use tfmask_core::metrics::{evaluate, BandStat};
use tfmask_core::pipeline::{load_manifest, BatchOptions, ManifestEntry};
use tfmask_core::{
    run_batch, simulate_scene, CalibrationContext, CalibrationFilter, Encoding,
    EnhancementConfig, InputDescriptor, Mask, MultichannelWave, SceneSpec,
};

#[derive(Parser)]
#[command(name = "tfmask", version, about = "Multichannel speech enhancement with coherence and phase-difference masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enhance utterances into `<out>/<id>.enh.wav` plus `<out>/report.json`.
    Enhance(EnhanceArgs),
    /// Estimate phase calibration filters.
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Render a synthetic scene from a TOML or JSON description.
    Simulate(SimulateArgs),
    /// Score an enhanced signal against a clean reference.
    Evaluate(EvaluateArgs),
    /// Configuration helpers.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Args)]
struct Inputs {
    /// JSON manifest: `[{"id": ..., "input": "file.wav" | ["ch1.wav", ...]}]`.
    #[arg(long, conflicts_with = "inputs")]
    manifest: Option<PathBuf>,
    /// Multichannel WAV files; the id is the file stem.
    inputs: Vec<PathBuf>,
}

impl Inputs {
    fn entries(&self) -> Result<Vec<ManifestEntry>> {
        if let Some(m) = &self.manifest {
            return load_manifest(m).with_context(|| format!("reading manifest {}", m.display()));
        }
        if self.inputs.is_empty() {
            bail!("give input files or --manifest");
        }
        self.inputs
            .iter()
            .map(|p| {
                let id = p
                    .file_stem()
                    .with_context(|| format!("no file name in {}", p.display()))?
                    .to_string_lossy()
                    .into_owned();
                Ok(ManifestEntry {
                    id,
                    input: InputDescriptor::Multichannel(p.clone()),
                })
            })
            .collect()
    }
}

#[derive(Args)]
struct EnhanceArgs {
    /// Configuration file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Calibration filter, compensated before the phase-difference mask. Repeatable.
    #[arg(long = "calib")]
    calib: Vec<PathBuf>,
    /// Refine the last calibration filter on each utterance.
    #[arg(long)]
    online: bool,
    /// Write mask dumps and a per-band CSV summary next to each output.
    #[arg(long)]
    dump_masks: bool,
    /// Write SRP-PHAT scores per grid candidate as CSV.
    #[arg(long)]
    dump_scores: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Stop at the first failing utterance.
    #[arg(long)]
    strict: bool,
    /// Utterances processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Subcommand)]
enum CalibrateCommand {
    /// Stage one, pooled over a training set.
    Offline(OfflineArgs),
    /// Stage two, one utterance on top of a stage-one filter.
    Online(OnlineArgs),
}

#[derive(Args)]
struct OfflineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Filter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Upper bound on re-localization passes over the inputs.
    #[arg(long, default_value_t = DEFAULT_OFFLINE_PASSES)]
    passes: usize,
    /// Per-utterance JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Args)]
struct OnlineArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage-one filter.
    #[arg(long)]
    stage1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Multichannel WAV.
    input: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncodingArg {
    Float32,
    Pcm16,
}

impl From<EncodingArg> for Encoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Float32 => Encoding::Float32,
            EncodingArg::Pcm16 => Encoding::Pcm16,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description (`.json`, otherwise TOML).
    #[arg(long, required_unless_present = "example")]
    scene: Option<PathBuf>,
    /// Output directory for mixture.wav, target.wav, noise.wav, interferer.wav, scene.json.
    #[arg(long, required_unless_present = "example")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "float32")]
    encoding: EncodingArg,
    /// Print an example scene in TOML and exit.
    #[arg(long)]
    example: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Enhanced signal; channel 0 is scored.
    #[arg(long)]
    enhanced: PathBuf,
    /// Clean reference, e.g. the target image.
    #[arg(long)]
    reference: PathBuf,
    /// Unprocessed mixture.
    #[arg(long)]
    noisy: PathBuf,
    /// Channel of the reference and noisy files to compare against.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Mask dumps summarized per frequency band. Repeatable.
    #[arg(long = "mask")]
    masks: Vec<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ConfigCommand {
    /// Write the full default configuration.
    Init {
        /// Destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing file.
        #[arg(long)]
        force: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<EnhancementConfig> {
    match path {
        Some(p) => EnhancementConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(EnhancementConfig::default()),
    }
}

fn context(cfg: &EnhancementConfig, passes: usize) -> Result<CalibrationContext> {
    Ok(CalibrationContext {
        stft: cfg.stft,
        geometry: cfg.geometry.clone(),
        grid: cfg.grid.build(&cfg.geometry)?,
        failure: cfg.failure,
        max_passes: passes,
    })
}

fn enhance(args: EnhanceArgs) -> Result<u8> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.calibration.paths.extend(args.calib);
    cfg.calibration.online |= args.online;
    cfg.dump.masks |= args.dump_masks;
    cfg.dump.scores |= args.dump_scores;
    cfg.validate()?;
    let entries = args.inputs.entries()?;
    let options = BatchOptions {
        strict: args.strict,
        jobs: args.jobs,
    };
    let report = run_batch(&cfg, &entries, &args.out, options)?;
    eprintln!(
        "{} enhanced, {} failed; report in {}",
        report.succeeded,
        report.failed,
        args.out.join("report.json").display()
    );
    Ok(report.exit_code() as u8)
}

fn calibrate_offline(args: OfflineArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let ctx = context(&cfg, args.passes)?;
    let entries = args.inputs.entries()?;
    let (filter, report) = offline_calibrate(
        || entries.iter().map(|e| read_multichannel(&e.input)),
        &ctx,
    )?;
    filter.write(&args.out)?;
    if let Some(path) = args.report {
        let items: Vec<_> = entries
            .iter()
            .zip(&report)
            .map(|(e, r)| serde_json::json!({"id": e.id, "result": r}))
            .collect();
        std::fs::write(&path, serde_json::to_string_pretty(&items)? + "\n")?;
    }
    let used: usize = report.iter().map(|r| r.frames_used).sum();
    eprintln!("stage-one filter from {} utterances ({used} frames) -> {}", report.len(), args.out.display());
    Ok(())
}

fn calibrate_online(args: OnlineArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let ctx = context(&cfg, 1)?;
    let stage1 = CalibrationFilter::read(&args.stage1)?;
    let wave = read_multichannel(&InputDescriptor::Multichannel(args.input))?;
    online_calibrate(&wave, &stage1, &ctx)?.write(&args.out)?;
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    if args.example {
        print!("{}", toml::to_string_pretty(&SceneSpec::tablet_default(1))?);
        return Ok(());
    }
    let (Some(scene_path), Some(out)) = (args.scene, args.out) else {
        bail!("--scene and --out are required");
    };
    let text = std::fs::read_to_string(&scene_path)
        .with_context(|| format!("reading scene {}", scene_path.display()))?;
    let spec: SceneSpec = if scene_path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    let scene = simulate_scene(&spec)?;
    std::fs::create_dir_all(&out)?;
    let encoding = args.encoding.into();
    write_wave(&scene.mixture, out.join("mixture.wav"), encoding)?;
    write_wave(&scene.target_images, out.join("target.wav"), encoding)?;
    write_wave(&scene.noise_images, out.join("noise.wav"), encoding)?;
    if let Some(i) = &scene.interferer_images {
        write_wave(i, out.join("interferer.wav"), encoding)?;
    }
    std::fs::write(out.join("scene.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    Ok(())
}

fn channel_of(path: &Path, channel: usize) -> Result<(Vec<f64>, u32)> {
    let wave: MultichannelWave = read_multichannel(&InputDescriptor::Multichannel(path.to_path_buf()))
        .with_context(|| format!("reading {}", path.display()))?;
    if channel >= wave.channel_count() {
        bail!("{} has {} channels, asked for {channel}", path.display(), wave.channel_count());
    }
    Ok((wave.channel(channel).to_vec(), wave.sample_rate()))
}

fn band_stats(path: &Path, sample_rate: u32) -> Result<Vec<BandStat>> {
    let mask = Mask::read_dump(path).with_context(|| format!("reading mask {}", path.display()))?;
    let bins = mask.dim().1;
    let fft = 2 * bins.saturating_sub(1).max(1);
    let fs = f64::from(sample_rate);
    let freqs: Vec<f64> = (0..bins).map(|k| k as f64 * fs / fft as f64).collect();
    let nyquist = fs / 2.0;
    let edges = [0.0, 500.0, 1000.0, 2000.0, 4000.0, nyquist + 1.0];
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(edges
        .windows(2)
        .zip(mask.band_means(&freqs, &edges))
        .filter(|(_, m)| m.is_finite())
        .map(|(w, mean_gain)| BandStat {
            mask: name.clone(),
            low_hz: w[0],
            high_hz: w[1].min(nyquist),
            mean_gain,
        })
        .collect())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (enhanced, fs) = channel_of(&args.enhanced, 0)?;
    let (reference, fs_ref) = channel_of(&args.reference, args.channel)?;
    let (noisy, fs_noisy) = channel_of(&args.noisy, args.channel)?;
    if fs != fs_ref || fs != fs_noisy {
        bail!("sample rates differ: {fs}, {fs_ref}, {fs_noisy}");
    }
    let mut report = evaluate(&enhanced, &reference, &noisy, fs)?;
    for m in &args.masks {
        report.band_stats.extend(band_stats(m, fs)?);
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match args.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn config_init(out: Option<PathBuf>, force: bool) -> Result<()> {
    let text = EnhancementConfig::default().to_toml_string();
    match out {
        Some(p) => {
            if p.exists() && !force {
                bail!("{} exists; pass --force to replace it", p.display());
            }
            std::fs::write(&p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Enhance(a) => enhance(a),
        Command::Calibrate(CalibrateCommand::Offline(a)) => calibrate_offline(a).map(|_| 0),
        Command::Calibrate(CalibrateCommand::Online(a)) => calibrate_online(a).map(|_| 0),
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| 0),
        Command::Config(ConfigCommand::Init { out, force }) => config_init(out, force).map(|_| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
