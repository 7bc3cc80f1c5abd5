use proptest::prelude::*;
use psrl_core::env::{self, ActionId, ScenarioPreset, SemState, ACTION_COUNT, FEATURE_DIM};

fn presets() -> Vec<ScenarioPreset> {
    vec![ScenarioPreset::highway(), ScenarioPreset::twoway(), ScenarioPreset::exit(), ScenarioPreset::stochastic_test()]
}

/// Walks `actions` from `reset(seed)`, stopping before an unsafe state.
fn walk(preset: &ScenarioPreset, seed: u64, actions: &[usize]) -> SemState {
    let mut s = env::reset(preset, seed);
    for &a in actions {
        let out = env::step(preset, &s, ActionId(a)).unwrap();
        if out.unsafe_ {
            break;
        }
        s = out.next;
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn step_is_deterministic(p in 0usize..4, seed in any::<u64>(), path in prop::collection::vec(0..ACTION_COUNT, 0..12), a in 0..ACTION_COUNT) {
        let preset = &presets()[p];
        let s = walk(preset, seed, &path);
        prop_assert_eq!(env::step(preset, &s, ActionId(a)).unwrap(), env::step(preset, &s, ActionId(a)).unwrap());
        prop_assert_eq!(env::successors(preset, &s, ActionId(a)).unwrap(), env::successors(preset, &s, ActionId(a)).unwrap());
    }

    #[test]
    fn snapshot_restores_exactly(p in 0usize..4, seed in any::<u64>(), path in prop::collection::vec(0..ACTION_COUNT, 0..12)) {
        let preset = &presets()[p];
        let s = walk(preset, seed, &path);
        let back = SemState::from_snapshot(&s.to_snapshot()).unwrap();
        prop_assert_eq!(&back, &s);
        // the restored state continues identically
        for a in ActionId::ALL {
            prop_assert_eq!(env::step(preset, &back, a).unwrap(), env::step(preset, &s, a).unwrap());
        }
    }

    #[test]
    fn observations_are_unit_range(p in 0usize..4, seed in any::<u64>(), path in prop::collection::vec(0..ACTION_COUNT, 0..12)) {
        let preset = &presets()[p];
        let s = walk(preset, seed, &path);
        let o = env::observe(preset, &s);
        prop_assert_eq!(o.len(), preset.observation_dim());
        prop_assert!(o.iter().all(|v| (0.0..=1.0).contains(v)));
        let f = env::true_features(preset, &s);
        prop_assert_eq!(f.len(), FEATURE_DIM);
        prop_assert!(f.iter().all(|v| v.is_finite() && v.abs() <= 2.0));
    }

    #[test]
    fn unsafety_latches(p in 0usize..4, seed in any::<u64>(), path in prop::collection::vec(0..ACTION_COUNT, 0..30)) {
        let preset = &presets()[p];
        let mut s = env::reset(preset, seed);
        let mut seen_unsafe = false;
        for &a in &path {
            let out = env::step(preset, &s, ActionId(a)).unwrap();
            if seen_unsafe {
                prop_assert!(env::is_unsafe(&out.next));
            }
            seen_unsafe |= env::is_unsafe(&out.next);
            prop_assert_eq!(out.unsafe_, env::is_unsafe(&out.next));
            s = out.next;
        }
    }

    #[test]
    fn successors_are_finite_and_lead_with_step(p in 0usize..4, seed in any::<u64>(), path in prop::collection::vec(0..ACTION_COUNT, 0..12), a in 0..ACTION_COUNT) {
        let preset = &presets()[p];
        let s = walk(preset, seed, &path);
        let succ = env::successors(preset, &s, ActionId(a)).unwrap();
        prop_assert!(!succ.is_empty() && succ.len() <= 2);
        prop_assert_eq!(&succ[0], &env::step(preset, &s, ActionId(a)).unwrap().next);
    }
}

#[test]
fn stochastic_preset_branches_on_non_idle_actions() {
    let preset = ScenarioPreset::stochastic_test();
    let s = env::reset(&preset, 5);
    assert_eq!(env::successors(&preset, &s, ActionId::IDLE).unwrap().len(), 1);
    // a failed action leaves lane and speed unchanged, which matches IDLE
    let idle = env::step(&preset, &s, ActionId::IDLE).unwrap().next;
    for a in [ActionId::LANE_RIGHT, ActionId::SLOWER] {
        let succ = env::successors(&preset, &s, a).unwrap();
        assert_eq!(succ.len(), 2, "{}", a.name());
        assert_eq!(succ[1], idle);
    }
    for other in [ScenarioPreset::highway(), ScenarioPreset::twoway(), ScenarioPreset::exit()] {
        let s = env::reset(&other, 5);
        assert!(ActionId::ALL.iter().all(|a| env::successors(&other, &s, *a).unwrap().len() == 1));
    }
}

#[test]
fn reset_is_seeded_and_safe() {
    for preset in presets() {
        for seed in 0..200 {
            let s = env::reset(&preset, seed);
            assert_eq!(s, env::reset(&preset, seed));
            assert!(!env::is_unsafe(&s), "{} seed {seed}", preset.kind.name());
        }
        assert_ne!(env::reset(&preset, 1), env::reset(&preset, 2));
    }
}

#[test]
fn horizons_match_scenarios() {
    assert_eq!(ScenarioPreset::highway().horizon, 40);
    assert_eq!(ScenarioPreset::twoway().horizon, 20);
    assert_eq!(ScenarioPreset::exit().horizon, 15);
}
