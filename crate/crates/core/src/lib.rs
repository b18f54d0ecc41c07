//! Multichannel speech enhancement: STFT filterbank, SRP-PHAT localization, MVDR
//! beamforming, coherence and phase-difference time-frequency masking, and phase
//! self-calibration of the microphone array.
//!
//! The usual entry point is [`enhance_utterance`] with an [`EnhancementConfig`].

pub mod array;
pub mod audio;
pub mod beamformer;
pub mod calibration;
pub mod error;
pub mod localizer;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod simulation;
pub mod stft;

pub use array::{ArrayGeometry, ChannelStatus, FailureConfig, Position, SourceLocation};
pub use audio::{Encoding, InputDescriptor, MultichannelWave};
pub use beamformer::{BeamformerWeights, CovarianceConfig, NoiseCovariance};
pub use calibration::{CalibrationContext, CalibrationFilter, Stage};
pub use error::{Error, Result};
pub use localizer::{GridConfig, Localization, SearchGrid};
pub use masking::{Mask, MaskSelection};
pub use metrics::MetricReport;
pub use pipeline::{
    enhance_utterance, run_batch, BatchOptions, BatchReport, Diagnostics, EnhancementConfig,
    ManifestEntry,
};
pub use simulation::{simulate_scene, Scene, SceneSpec};
pub use stft::{Spectrogram, StftConfig, Window};
