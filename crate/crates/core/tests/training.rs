use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psrl_core::env::{ActionId, ScenarioPreset, ACTION_COUNT, FEATURE_DIM};
use psrl_core::eval::episode_reward;
use psrl_core::train::{
    adv_train, feature_policy_reward, train_g_supervised, train_q_ddqn, AdvState, ReplayTransition, TrainConfig,
    TrainLog, Variant,
};
use psrl_core::{Mlp, Norm};

fn batch(rng: &mut ChaCha8Rng, obs_dim: usize, n: usize, noisy: bool) -> Vec<ReplayTransition> {
    (0..n)
        .map(|_| {
            let obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect();
            ReplayTransition {
                noisy_obs: noisy.then(|| obs.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()),
                obs,
                features_true: (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: ActionId(rng.random_range(0..ACTION_COUNT)),
                reward: rng.random_range(-1.0..1.0),
                next_obs: (0..obs_dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                next_features_true: (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
                done: rng.random_bool(0.1),
            }
        })
        .collect()
}

fn nets(seed: u64) -> (Mlp, Mlp) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Mlp::random(&[12, 10, FEATURE_DIM], &mut rng), Mlp::random(&[FEATURE_DIM, 10, ACTION_COUNT], &mut rng))
}

#[test]
fn zero_kappa_reduces_every_variant_to_the_nominal_update() {
    for norm in [Norm::Linf, Norm::L2] {
        let cfg = TrainConfig { norm, ..TrainConfig::default() };
        let (g, q) = nets(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<ReplayTransition>> = (0..5).map(|_| batch(&mut rng, 12, 16, norm == Norm::L2)).collect();
        let run = |variant: Variant| {
            let mut st = AdvState::new(g.clone(), q.clone(), 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for b in &data {
                let refs: Vec<&ReplayTransition> = b.iter().collect();
                st.update(&refs, variant, 0.0, 2.0 / 255.0, &cfg, &mut rng).unwrap();
            }
            st
        };
        let reference = run(Variant::Vanilla);
        for v in [Variant::At, Variant::Radial, Variant::PsrlAt, Variant::PsrlHybrid] {
            let st = run(v);
            assert_eq!(st.g, reference.g, "{v} g under {norm}");
            assert_eq!(st.q, reference.q, "{v} q under {norm}");
        }
    }
}

#[test]
fn hybrid_takes_two_optimizer_steps_per_minibatch() {
    let cfg = TrainConfig::default();
    let (g, q) = nets(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = batch(&mut rng, 12, 8, false);
    let refs: Vec<&ReplayTransition> = b.iter().collect();
    for v in Variant::ALL {
        let mut st = AdvState::new(g.clone(), q.clone(), 1e-3);
        for _ in 0..3 {
            st.update(&refs, v, 0.5, 2.0 / 255.0, &cfg, &mut rng).unwrap();
        }
        let per = if v == Variant::PsrlHybrid { 2 } else { 1 };
        assert_eq!((st.updates, st.optimizer_steps), (3, 3 * per), "{v}");
    }
}

#[test]
fn positive_kappa_changes_the_update() {
    let cfg = TrainConfig::default();
    let (g, q) = nets(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = batch(&mut rng, 12, 16, false);
    let refs: Vec<&ReplayTransition> = b.iter().collect();
    let mut vanilla = AdvState::new(g.clone(), q.clone(), 1e-3);
    vanilla.update(&refs, Variant::Vanilla, 0.5, 0.05, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    for v in [Variant::At, Variant::Radial, Variant::PsrlAt, Variant::PsrlHybrid] {
        let mut st = AdvState::new(g.clone(), q.clone(), 1e-3);
        st.update(&refs, v, 0.5, 0.05, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(st.g != vanilla.g || st.q != vanilla.q, "{v}");
    }
}

fn small_cfg(variant: Variant, norm: Norm) -> TrainConfig {
    TrainConfig {
        dqn_steps: 600,
        learning_starts: 100,
        g_steps: 300,
        adv_steps: 200,
        g_hidden: vec![16],
        q_hidden: vec![16],
        log_every: 100,
        variant,
        norm,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn adversarial_training_is_reproducible() {
    let preset = ScenarioPreset::highway();
    for (variant, norm) in [(Variant::PsrlHybrid, Norm::Linf), (Variant::At, Norm::L2)] {
        let cfg = small_cfg(variant, norm);
        let (g, q) = {
            let mut log = TrainLog::default();
            let q = train_q_ddqn(&preset, &cfg, &mut log).unwrap();
            (train_g_supervised(&q, &preset, &cfg, &mut log).unwrap(), q)
        };
        let mut l1 = TrainLog::default();
        let mut l2 = TrainLog::default();
        let a = adv_train(&g, &q, &preset, &cfg, &mut l1).unwrap();
        let b = adv_train(&g, &q, &preset, &cfg, &mut l2).unwrap();
        assert_eq!(a.0.to_text(), b.0.to_text());
        assert_eq!(a.1.to_text(), b.1.to_text());
        assert_eq!(l1.to_csv(), l2.to_csv());
        assert_eq!(a.2.updates, 200 - cfg.batch_size as u64 + 1);
    }
}

/// Mean `sup_loss` of the supervised rows of a log.
fn sup_losses(log: &TrainLog) -> Vec<f64> {
    log.rows()
        .iter()
        .filter(|r| r.starts_with("supervised,"))
        .map(|r| r.split(',').nth(3).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn feature_regression_loss_decreases() {
    let preset = ScenarioPreset::highway();
    let cfg = TrainConfig { g_steps: 3000, log_every: 500, ..small_cfg(Variant::Vanilla, Norm::Linf) };
    let mut log = TrainLog::default();
    let q = train_q_ddqn(&preset, &cfg, &mut log).unwrap();
    train_g_supervised(&q, &preset, &cfg, &mut log).unwrap();
    let losses = sup_losses(&log);
    assert_eq!(losses.len(), 6);
    assert!(losses[5] < 0.7 * losses[0], "{losses:?}");
}

#[test]
fn ddqn_beats_random_actions_threefold() {
    let preset = ScenarioPreset::highway();
    let cfg = TrainConfig::default();
    let q = train_q_ddqn(&preset, &cfg, &mut TrainLog::default()).unwrap();
    let seeds: Vec<u64> = (500..530).collect();
    let trained = feature_policy_reward(&q, &preset, &seeds).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random: f64 = seeds
        .iter()
        .map(|&s| episode_reward(&preset, s, |_, _| Ok(ActionId(rng.random_range(0..ACTION_COUNT)))).unwrap())
        .sum::<f64>()
        / seeds.len() as f64;
    assert!(trained >= 3.0 * random, "trained {trained} random {random}");
}

#[test]
fn empty_road_feature_regression_converges_to_the_default_fill() {
    let preset = ScenarioPreset { vehicle_count: 0, ..ScenarioPreset::highway() };
    let cfg = TrainConfig { g_steps: 1500, ..small_cfg(Variant::Vanilla, Norm::Linf) };
    let mut log = TrainLog::default();
    let q = train_q_ddqn(&preset, &cfg, &mut log).unwrap();
    let g = train_g_supervised(&q, &preset, &cfg, &mut log).unwrap();
    for seed in 0..5 {
        let s = psrl_core::env::reset(&preset, seed);
        let pred = g.forward(&psrl_core::env::observe(&preset, &s)).unwrap();
        assert!(pred.iter().all(|v| (v - preset.default_feature).abs() < 0.05), "{pred:?}");
    }
}

#[test]
fn l2_feature_data_includes_noisy_copies() {
    // with two samples per step the l2 run fills its buffer twice as fast,
    // so it starts updating earlier and logs a loss at the first row
    let preset = ScenarioPreset::highway();
    let base = TrainConfig { g_steps: 20, batch_size: 32, log_every: 20, ..small_cfg(Variant::Vanilla, Norm::Linf) };
    let q = Mlp::random(&[FEATURE_DIM, 4, ACTION_COUNT], &mut ChaCha8Rng::seed_from_u64(0));
    let sup = |norm: Norm| {
        let mut log = TrainLog::default();
        train_g_supervised(&q, &preset, &TrainConfig { norm, ..base.clone() }, &mut log).unwrap();
        sup_losses(&log)[0]
    };
    assert_eq!(sup(Norm::Linf), 0.0);
    assert!(sup(Norm::L2) > 0.0);
}
