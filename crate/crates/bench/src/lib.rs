//! Benchmark fixtures. The benchmarks themselves live in `benches/`.

use tfmask_core::{simulate_scene, MultichannelWave, SceneSpec};

/// Four seconds of the default tablet scene.
pub fn tablet_mixture() -> MultichannelWave {
    simulate_scene(&SceneSpec::tablet_default(7))
        .expect("default scene renders")
        .mixture
}
