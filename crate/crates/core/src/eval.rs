//! Empirical attacks and evaluation metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::{composite_feature_bounds, BoxBounds};
use crate::env::{self, ActionId, Observation, ScenarioPreset, SemState};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::{Norm, PsrlPolicy};
use crate::tasc::{CertEnv, LaneWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub eps: f64,
    pub norm: Norm,
    pub pgd_steps: usize,
    /// Defaults to `eps / 8` when `None`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(eps: f64, norm: Norm, seed: u64) -> Self {
        Self { eps, norm, pgd_steps: 20, step_size: None, restarts: 5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 || self.eps.is_nan() {
            return Err(Error::NegativeEpsilon(self.eps));
        }
        if self.pgd_steps == 0 {
            return Err(Error::InvalidArgument("pgd_steps must be at least 1".into()));
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / 8.0)
    }
}

/// Projects `x` onto the budget-`eps` ball around `o`, clipped to `[0, 1]`.
///
/// The l∞ case reproduces the box used for certification exactly, so a
/// projected point is always inside the certified input region.
pub fn project(o: &[f64], x: &[f64], eps: f64, norm: Norm) -> Result<Vec<f64>> {
    match norm {
        Norm::Linf => {
            let b = BoxBounds::around_clipped(o, eps, 0.0, 1.0)?;
            Ok(x.iter()
                .zip(b.lower().iter().zip(b.upper()))
                .map(|(v, (l, u))| v.clamp(*l, *u))
                .collect())
        }
        Norm::L2 => {
            if eps < 0.0 || eps.is_nan() {
                return Err(Error::NegativeEpsilon(eps));
            }
            let norm = x.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            // shrink slightly past the boundary so rounding never leaves the ball
            let scale = if norm > eps { eps / norm * (1.0 - 1e-12) } else { 1.0 };
            let clipped: Vec<f64> = x
                .iter()
                .zip(o)
                .map(|(xi, oi)| (oi + (xi - oi) * scale).clamp(0.0, 1.0))
                .collect();
            Ok(clipped)
        }
    }
}

pub fn perturbation_norm(o: &[f64], x: &[f64], norm: Norm) -> f64 {
    let d = x.iter().zip(o).map(|(a, b)| a - b);
    match norm {
        Norm::Linf => d.map(f64::abs).fold(0.0, f64::max),
        Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `Σ_a w_a Q(g(x), a)` and its gradient with respect to `x`.
pub fn weighted_q_grad(g: &Mlp, q: &Mlp, x: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tg = g.forward_trace(x)?;
    let tq = q.forward_trace(tg.output())?;
    let value = tq.output().iter().zip(weights).map(|(a, b)| a * b).sum();
    let dq = q.backward_from_trace(&tq, weights)?;
    let dg = g.backward_from_trace(&tg, &dq.input)?;
    Ok((value, dg.input))
}

fn descent_step(x: &[f64], grad: &[f64], alpha: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => x.iter().zip(grad).map(|(v, g)| v - alpha * sign(*g)).collect(),
        Norm::L2 => {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if n == 0.0 {
                return x.to_vec();
            }
            x.iter().zip(grad).map(|(v, g)| v - alpha * g / n).collect()
        }
    }
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform random point in the budget ball around `o` (before clipping).
pub(crate) fn random_start<R: Rng + ?Sized>(o: &[f64], eps: f64, norm: Norm, rng: &mut R) -> Vec<f64> {
    let delta: Vec<f64> = o.iter().map(|_| rng.random_range(-1.0..=1.0) * eps).collect();
    match norm {
        Norm::Linf => o.iter().zip(&delta).map(|(a, b)| a + b).collect(),
        Norm::L2 => {
            // direction from the box sample, radius uniform in [0, eps]
            let n = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r: f64 = rng.random_range(0.0..=1.0) * eps;
            let scale = if n > 0.0 { r / n } else { 0.0 };
            o.iter().zip(&delta).map(|(a, b)| a + b * scale).collect()
        }
    }
}

/// Projected gradient descent on `Σ_a π_a(o) Q(g(o + δ), a)`, with `π` the
/// softmax of the clean Q-values. Among all iterates of all restarts, a point
/// that changes the policy's action is preferred; ties go to the lower
/// objective.
pub fn pgd_attack(p: &PsrlPolicy, o: &[f64], cfg: &AttackConfig) -> Result<Observation> {
    cfg.validate()?;
    if cfg.eps == 0.0 {
        return Ok(o.to_vec());
    }
    let clean_q = p.q_values(o)?;
    let nominal = ActionId(crate::policy::argmax(&clean_q));
    let weights = softmax(&clean_q);
    let alpha = cfg.alpha();
    let mut best: Option<(bool, f64, Vec<f64>)> = None;
    let mut consider = |x: Vec<f64>, value: f64, flipped: bool| {
        let better = match &best {
            None => true,
            Some((bf, bv, _)) => (flipped && !bf) || (flipped == *bf && value < *bv),
        };
        if better {
            best = Some((flipped, value, x));
        }
    };
    for r in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(r as u64);
        let mut x = project(o, &random_start(o, cfg.eps, cfg.norm, &mut rng), cfg.eps, cfg.norm)?;
        for _ in 0..cfg.pgd_steps {
            let (value, grad) = weighted_q_grad(&p.g, &p.q, &x, &weights)?;
            consider(x.clone(), value, p.act(&x)? != nominal);
            x = project(o, &descent_step(&x, &grad, alpha, cfg.norm), cfg.eps, cfg.norm)?;
        }
        let (value, _) = weighted_q_grad(&p.g, &p.q, &x, &weights)?;
        let flipped = p.act(&x)? != nominal;
        consider(x, value, flipped);
    }
    Ok(best.map(|b| b.2).unwrap_or_else(|| o.to_vec()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackedRollout<S> {
    /// Visited states, starting with the initial one.
    pub states: Vec<S>,
    pub actions: Vec<ActionId>,
    pub unsafe_reached: bool,
}

/// Runs the policy for `steps` states, attacking every observation. Each
/// transition takes the first successor. Stops at the first unsafe state.
pub fn attacked_rollout_in<E: CertEnv>(
    env: &E,
    p: &PsrlPolicy,
    s0: E::State,
    steps: usize,
    cfg: &AttackConfig,
) -> Result<AttackedRollout<E::State>> {
    let mut states = vec![s0];
    let mut actions = Vec::new();
    loop {
        let s = states.last().expect("non-empty");
        if env.is_unsafe(s) {
            return Ok(AttackedRollout { states, actions, unsafe_reached: true });
        }
        if states.len() >= steps {
            return Ok(AttackedRollout { states, actions, unsafe_reached: false });
        }
        let o = env.observe(s);
        let step_cfg = AttackConfig { seed: cfg.seed.wrapping_add(states.len() as u64 * 0x9E37_79B9), ..cfg.clone() };
        let x = pgd_attack(p, &o, &step_cfg)?;
        let a = p.act(&x)?;
        let next = env
            .successors(s, a)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::InvalidArgument("state has no successor".into()))?;
        actions.push(a);
        states.push(next);
    }
}

/// Attacked rollout in the lane world from `reset(preset, seed)`.
pub fn attacked_rollout(
    p: &PsrlPolicy,
    preset: &ScenarioPreset,
    seed: u64,
    steps: usize,
    cfg: &AttackConfig,
) -> Result<AttackedRollout<SemState>> {
    let world = LaneWorld { preset: preset.clone() };
    attacked_rollout_in(&world, p, env::reset(preset, seed), steps, cfg)
}

/// Sum of rewards of one episode over the preset horizon, ending early at an
/// unsafe state. `choose` maps (state, observation) to an action.
pub fn episode_reward<F>(preset: &ScenarioPreset, seed: u64, mut choose: F) -> Result<f64>
where
    F: FnMut(&SemState, &[f64]) -> Result<ActionId>,
{
    let mut s = env::reset(preset, seed);
    let mut total = 0.0;
    for _ in 0..preset.horizon {
        let o = env::observe(preset, &s);
        let a = choose(&s, &o)?;
        let out = env::step(preset, &s, a)?;
        total += out.reward;
        if out.unsafe_ {
            break;
        }
        s = out.next;
    }
    Ok(total)
}

pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub reward_mean: f64,
    pub reward_sem: f64,
    pub false_action_rate: f64,
    /// Mean squared feature error on the nominal path.
    pub avg_err: f64,
    /// Largest squared error over the feature box at the MSE budget.
    pub avg_err_ub: f64,
    /// Smallest squared error over the same box.
    pub avg_err_lb: f64,
    /// Fraction of attacked rollouts reaching an unsafe state; `None` when no
    /// attack was run.
    pub attack_success_rate: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "episodes,reward_mean,reward_sem,false_action_rate,avg_err,avg_err_ub,avg_err_lb,attack_success_rate";

    pub fn csv_row(&self) -> String {
        let attack = self.attack_success_rate.map(|r| format!("{r:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{:.6},{:.6},{:.6e},{:.6e},{:.6e},{}",
            self.episodes,
            self.reward_mean,
            self.reward_sem,
            self.false_action_rate,
            self.avg_err,
            self.avg_err_ub,
            self.avg_err_lb,
            attack
        )
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "episodes = {}\nreward = {:.4} +- {:.4}\nfalse_action_rate = {:.4}\navg_err = {:.6e}\navg_err_ub = {:.6e}\navg_err_lb = {:.6e}\n",
            self.episodes,
            self.reward_mean,
            self.reward_sem,
            self.false_action_rate,
            self.avg_err,
            self.avg_err_ub,
            self.avg_err_lb
        );
        if let Some(r) = self.attack_success_rate {
            s.push_str(&format!("attack_success_rate = {r:.4}\n"));
        }
        s
    }
}

/// Squared-error range of a feature box against the true features, averaged
/// over coordinates: `(min, max)` over all points of the box.
pub fn box_error_range(b: &BoxBounds, truth: &[f64]) -> (f64, f64) {
    let n = truth.len() as f64;
    let mut lo = 0.0;
    let mut hi = 0.0;
    for ((l, u), s) in b.lower().iter().zip(b.upper()).zip(truth) {
        let dl = (l - s) * (l - s);
        let du = (u - s) * (u - s);
        hi += dl.max(du);
        if s < l {
            lo += dl;
        } else if s > u {
            lo += du;
        }
    }
    (lo / n, hi / n)
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Nominal reward, false action rate and feature errors over one episode per
/// seed. Feature error bounds use the l∞ budget `mse_eps`. When `attack` is
/// given, one attacked rollout over the full horizon is run per seed as well.
pub fn evaluate(
    p: &PsrlPolicy,
    preset: &ScenarioPreset,
    seeds: &[u64],
    mse_eps: f64,
    attack: Option<&AttackConfig>,
) -> Result<EvalReport> {
    let mut rewards = Vec::with_capacity(seeds.len());
    let mut steps = 0usize;
    let mut false_actions = 0usize;
    let (mut err, mut err_ub, mut err_lb) = (0.0, 0.0, 0.0);
    for &seed in seeds {
        let r = episode_reward(preset, seed, |s, o| {
            let truth = env::true_features(preset, s);
            let pred = p.features(o)?;
            let a = p.act_on_features(&pred)?;
            if a != p.act_on_features(&truth)? {
                false_actions += 1;
            }
            let (lo, hi) = box_error_range(&composite_feature_bounds(&p.g, o, mse_eps)?, &truth);
            err += mse(&pred, &truth);
            err_lb += lo;
            err_ub += hi;
            steps += 1;
            Ok(a)
        })?;
        rewards.push(r);
    }
    let attack_success_rate = match attack {
        Some(cfg) => {
            let mut hits = 0usize;
            for &seed in seeds {
                let cfg = AttackConfig { seed: cfg.seed ^ seed, ..cfg.clone() };
                if attacked_rollout(p, preset, seed, preset.horizon + 1, &cfg)?.unsafe_reached {
                    hits += 1;
                }
            }
            Some(hits as f64 / seeds.len().max(1) as f64)
        }
        None => None,
    };
    let (reward_mean, reward_sem) = mean_sem(&rewards);
    let denom = steps.max(1) as f64;
    Ok(EvalReport {
        episodes: seeds.len(),
        reward_mean,
        reward_sem,
        false_action_rate: false_actions as f64 / denom,
        avg_err: err / denom,
        avg_err_ub: err_ub / denom,
        avg_err_lb: err_lb / denom,
        attack_success_rate,
    })
}
