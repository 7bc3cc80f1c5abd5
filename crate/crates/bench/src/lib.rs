//! Fixtures shared by the benchmarks in `benches/`.

use psrl_core::env::{ScenarioPreset, ACTION_COUNT, FEATURE_DIM};
use psrl_core::{Mlp, PsrlPolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Randomly initialised composite policy with the default training widths.
pub fn random_policy(preset: &ScenarioPreset, seed: u64) -> PsrlPolicy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Mlp::random(&[preset.observation_dim(), 64, 32, FEATURE_DIM], &mut rng);
    let q = Mlp::random(&[FEATURE_DIM, 64, 64, ACTION_COUNT], &mut rng);
    PsrlPolicy::new(g, q).expect("matching widths")
}
