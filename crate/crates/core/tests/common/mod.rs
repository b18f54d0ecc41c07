#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfmask_core::localizer::direction_to_position;
use tfmask_core::simulation::{SensorPhase, SignalSource};
use tfmask_core::{ArrayGeometry, Position, SceneSpec};

/// Talker on the default search shell at the given direction.
pub fn talker(geometry: &ArrayGeometry, azimuth: f64, elevation: f64) -> Position {
    direction_to_position(geometry.centroid(), azimuth, elevation, 0.4)
}

/// Tablet scene with a speech-like talker in diffuse noise.
pub fn tablet_scene(seed: u64, seconds: f64, snr_db: f64, offsets: Option<&[f64]>) -> SceneSpec {
    let geometry = ArrayGeometry::tablet();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Grid directions keep the localizer's quantization out of the measurement.
    let az = 5.0 * f64::from(rng.random_range(-12i32..=12));
    let el = 10.0 * f64::from(rng.random_range(-2i32..=2));
    let mut spec = SceneSpec::tablet_default(seed);
    spec.source = SignalSource::SpeechLike { duration: seconds };
    spec.source_position = talker(&geometry, az, el);
    spec.diffuse_snr_db = Some(snr_db);
    spec.sensor_phase = match offsets {
        Some(o) => SensorPhase::Constant { offsets: o.to_vec() },
        None => SensorPhase::None,
    };
    spec.geometry = geometry;
    spec
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
