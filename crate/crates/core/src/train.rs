//! DDQN on true features, supervised training of the feature predictor, and
//! adversarial fine-tuning of the composite policy.

use std::fmt::{self, Write as _};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bounds::{ibp_backward, ibp_trace, BoxBounds};
use crate::env::{self, ActionId, ScenarioPreset, SemState, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::eval::{self, project, random_start, sign, softmax};
use crate::nn::{Adam, Gradients, Mlp};
use crate::policy::{argmax, Norm, PsrlPolicy};
use crate::EPS_DENOM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Vanilla,
    At,
    Radial,
    PsrlAt,
    PsrlHybrid,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Vanilla, Variant::At, Variant::Radial, Variant::PsrlAt, Variant::PsrlHybrid];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::At => "at",
            Variant::Radial => "radial",
            Variant::PsrlAt => "psrl_at",
            Variant::PsrlHybrid => "psrl_hybrid",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == text.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown training variant `{}`", text.trim())))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub buffer_size: usize,
    pub batch_size: usize,
    pub discount: f64,
    pub learning_rate: f64,
    /// Environment steps of DDQN.
    pub dqn_steps: usize,
    /// Transitions collected before the first update.
    pub learning_starts: usize,
    /// Updates between target network syncs.
    pub target_sync: usize,
    pub explore_initial: f64,
    pub explore_final: f64,
    /// Fraction of `dqn_steps` over which exploration decays linearly.
    pub explore_fraction: f64,
    /// Environment steps of supervised feature learning.
    pub g_steps: usize,
    /// Probability of a random action while collecting feature data.
    pub g_explore: f64,
    pub adv_steps: usize,
    /// Final adversarial budget as a grid index (`k/255`).
    pub target_eps: u32,
    /// Fraction of `adv_steps` over which the budget ramps up from 0.
    pub ramp_fraction: f64,
    pub kappa: f64,
    pub variant: Variant,
    pub norm: Norm,
    pub sigma: f64,
    pub seed: u64,
    pub g_hidden: Vec<usize>,
    pub q_hidden: Vec<usize>,
    /// Rows written to the training log every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            buffer_size: 10_000,
            batch_size: 32,
            discount: 0.8,
            learning_rate: 1e-3,
            dqn_steps: 15_000,
            learning_starts: 500,
            target_sync: 50,
            explore_initial: 1.0,
            explore_final: 0.05,
            explore_fraction: 0.5,
            g_steps: 20_000,
            g_explore: 0.2,
            adv_steps: 5_000,
            target_eps: 2,
            ramp_fraction: 25_000.0 / 40_000.0,
            kappa: 0.5,
            variant: Variant::Vanilla,
            norm: Norm::Linf,
            sigma: 0.05,
            seed: 0,
            g_hidden: vec![64, 32],
            q_hidden: vec![64, 64],
            log_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return bad("buffer_size must be at least batch_size > 0");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) || !(0.0..=1.0).contains(&self.explore_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.sigma > 0.0) || self.target_sync == 0 {
            return bad("learning_rate, sigma and target_sync must be positive");
        }
        Ok(())
    }

    pub fn target_eps_value(&self) -> f64 {
        f64::from(self.target_eps) / f64::from(EPS_DENOM)
    }

    pub fn ramp_steps(&self) -> usize {
        (self.adv_steps as f64 * self.ramp_fraction).round() as usize
    }
}

/// Budget after `t` adversarial steps.
pub fn ramp_eps(target: f64, t: usize, ramp_steps: usize) -> f64 {
    if ramp_steps == 0 {
        return target;
    }
    target * (t as f64 / ramp_steps as f64).min(1.0)
}

/// Linear exploration decay.
pub fn explore_rate(cfg: &TrainConfig, t: usize) -> f64 {
    let span = (cfg.dqn_steps as f64 * cfg.explore_fraction).max(1.0);
    let frac = (t as f64 / span).min(1.0);
    cfg.explore_initial + frac * (cfg.explore_final - cfg.explore_initial)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTransition {
    pub obs: Vec<f64>,
    pub features_true: Vec<f64>,
    pub action: ActionId,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub next_features_true: Vec<f64>,
    pub done: bool,
    /// Gaussian-noised copy of `obs` (l2 mode).
    pub noisy_obs: Option<Vec<f64>>,
}

/// Fixed-capacity FIFO replay buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0 }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a T> {
        (0..n).map(|_| self.items.choose(rng).expect("non-empty buffer")).collect()
    }
}

/// One row per logged step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    rows: Vec<String>,
}

impl TrainLog {
    pub const HEADER: &'static str = "phase,step,td_loss,sup_loss,adv_loss,eps,eval_reward";

    #[allow(clippy::too_many_arguments)]
    fn row(&mut self, phase: &str, step: usize, td: f64, sup: f64, adv: f64, eps: f64, reward: Option<f64>) {
        let reward = reward.map(|r| format!("{r:.6}")).unwrap_or_default();
        self.rows.push(format!("{phase},{step},{td:.6e},{sup:.6e},{adv:.6e},{eps:.6e},{reward}"));
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{r}").unwrap();
        }
        out
    }
}

/// Running means of loss terms between log rows.
#[derive(Debug, Default, Clone, Copy)]
struct Meter {
    td: f64,
    sup: f64,
    adv: f64,
    n: usize,
}

impl Meter {
    fn add(&mut self, l: &LossTerms) {
        self.td += l.td;
        self.sup += l.sup;
        self.adv += l.adv;
        self.n += 1;
    }

    fn take(&mut self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let out = (self.td / n, self.sup / n, self.adv / n);
        *self = Meter::default();
        out
    }
}

/// Loss terms of one minibatch update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub td: f64,
    pub sup: f64,
    pub adv: f64,
    /// Total objective optimized, combining the terms above with the
    /// variant's weights.
    pub total: f64,
}

fn check_finite(l: &LossTerms) -> Result<()> {
    if [l.td, l.sup, l.adv, l.total].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingFault(format!("non-finite loss {l:?}")))
    }
}

fn mlp_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase);
    rng
}

/// Double-Q targets `r + γ Q_target(s', argmax_a Q(s', a))`, zero bootstrap
/// on terminal transitions.
pub fn double_q_targets(q: &Mlp, target: &Mlp, batch: &[&ReplayTransition], discount: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                return Ok(t.reward);
            }
            let a = argmax(&q.forward(&t.next_features_true)?);
            Ok(t.reward + discount * target.forward(&t.next_features_true)?[a])
        })
        .collect()
}

/// Mean squared TD error of `q` on the given inputs, accumulating `scale`
/// times its gradient.
fn td_loss(
    q: &Mlp,
    inputs: &[&[f64]],
    actions: &[ActionId],
    targets: &[f64],
    grads: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let b = inputs.len() as f64;
    let mut loss = 0.0;
    let mut up = vec![0.0; q.output_dim()];
    for ((x, a), y) in inputs.iter().zip(actions).zip(targets) {
        let trace = q.forward_trace(x)?;
        let diff = trace.output()[a.0] - y;
        loss += diff * diff / b;
        up.iter_mut().for_each(|v| *v = 0.0);
        up[a.0] = 2.0 * diff / b;
        q.accumulate_backward(&trace, &up, grads, scale)?;
    }
    Ok(loss)
}

/// TD error through the composite `q ∘ g`; gradients go to both networks.
#[allow(clippy::too_many_arguments)]
fn composite_td_loss(
    g: &Mlp,
    q: &Mlp,
    inputs: &[Vec<f64>],
    actions: &[ActionId],
    targets: &[f64],
    grads_g: &mut Gradients,
    grads_q: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let b = inputs.len() as f64;
    let mut loss = 0.0;
    let mut up = vec![0.0; q.output_dim()];
    for ((x, a), y) in inputs.iter().zip(actions).zip(targets) {
        let tg = g.forward_trace(x)?;
        let tq = q.forward_trace(tg.output())?;
        let diff = tq.output()[a.0] - y;
        loss += diff * diff / b;
        up.iter_mut().for_each(|v| *v = 0.0);
        up[a.0] = 2.0 * diff / b;
        let d_feat = q.accumulate_backward(&tq, &up, grads_q, scale)?;
        g.accumulate_backward(&tg, &d_feat, grads_g, 1.0)?;
    }
    Ok(loss)
}

/// Mean over the batch of `‖g(o) - s‖²`.
fn supervised_loss(g: &Mlp, inputs: &[&[f64]], truth: &[&[f64]], grads: &mut Gradients, scale: f64) -> Result<f64> {
    let b = inputs.len() as f64;
    let mut loss = 0.0;
    for (x, s) in inputs.iter().zip(truth) {
        let trace = g.forward_trace(x)?;
        let up: Vec<f64> = trace.output().iter().zip(s.iter()).map(|(p, t)| 2.0 * (p - t) / b).collect();
        loss += trace.output().iter().zip(s.iter()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / b;
        g.accumulate_backward(&trace, &up, grads, scale)?;
    }
    Ok(loss)
}

/// Input box for adversarial training. l∞ clips to the pixel range; under l2
/// the (noised) input is boxed without clipping since it may leave `[0, 1]`.
fn training_box(x: &[f64], eps: f64, norm: Norm) -> Result<BoxBounds> {
    match norm {
        Norm::Linf => BoxBounds::around_clipped(x, eps, 0.0, 1.0),
        Norm::L2 => BoxBounds::around_clipped(x, eps, f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Hinge `Σ_{a ≠ a*} max(0, ub(a) - lb(a*))` on IBP bounds of the composite
/// over the box, with `a*` the clean action. Gradients flow into `q` and, if
/// `grads_g` is given, through the box into `g`.
fn radial_hinge(
    g: &Mlp,
    q: &Mlp,
    inputs: &[Vec<f64>],
    eps: f64,
    norm: Norm,
    mut grads_g: Option<&mut Gradients>,
    grads_q: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let b = inputs.len() as f64;
    let mut loss = 0.0;
    for x in inputs {
        let star = argmax(&q.forward(&g.forward(x)?)?);
        let tg = ibp_trace(g, &training_box(x, eps, norm)?)?;
        let tq = ibp_trace(q, &tg.output)?;
        let (lb, ub) = (tq.output.lower(), tq.output.upper());
        let mut dl = vec![0.0; q.output_dim()];
        let mut du = vec![0.0; q.output_dim()];
        for a in 0..q.output_dim() {
            if a == star {
                continue;
            }
            let m = ub[a] - lb[star];
            if m > 0.0 {
                loss += m / b;
                du[a] += 1.0 / b;
                dl[star] -= 1.0 / b;
            }
        }
        let (dgl, dgu) = ibp_backward(q, &tq, &dl, &du, grads_q, scale)?;
        if let Some(gg) = grads_g.as_deref_mut() {
            ibp_backward(g, &tg, &dgl, &dgu, gg, 1.0)?;
        }
    }
    Ok(loss)
}

/// `‖g_lb(o) - s‖² + ‖g_ub(o) - s‖²` with IBP feature bounds, batch mean.
fn bound_supervised_loss(
    g: &Mlp,
    inputs: &[Vec<f64>],
    truth: &[&[f64]],
    eps: f64,
    norm: Norm,
    grads: &mut Gradients,
    scale: f64,
) -> Result<f64> {
    let b = inputs.len() as f64;
    let mut loss = 0.0;
    for (x, s) in inputs.iter().zip(truth) {
        let tg = ibp_trace(g, &training_box(x, eps, norm)?)?;
        let (l, u) = (tg.output.lower(), tg.output.upper());
        let mut dl = Vec::with_capacity(s.len());
        let mut du = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            loss += ((l[i] - s[i]).powi(2) + (u[i] - s[i]).powi(2)) / b;
            dl.push(2.0 * (l[i] - s[i]) / b);
            du.push(2.0 * (u[i] - s[i]) / b);
        }
        ibp_backward(g, &tg, &dl, &du, grads, scale)?;
    }
    Ok(loss)
}

/// One FGSM step from `start`, descending `Σ_a π_a(o) Q(g(x), a)` where `π`
/// is the softmax of the clean Q-values. Under l∞ the step is
/// `eps · sign(∇)`; under l2 it is `eps · ∇ / ‖∇‖`. The result is projected
/// back to the budget ball.
pub fn fgsm_from(g: &Mlp, q: &Mlp, o: &[f64], start: &[f64], eps: f64, norm: Norm) -> Result<Vec<f64>> {
    let weights = softmax(&q.forward(&g.forward(o)?)?);
    let (_, grad) = eval::weighted_q_grad(g, q, start, &weights)?;
    let stepped: Vec<f64> = match norm {
        Norm::Linf => start.iter().zip(&grad).map(|(x, d)| x - eps * sign(*d)).collect(),
        Norm::L2 => {
            let n = grad.iter().map(|d| d * d).sum::<f64>().sqrt();
            if n == 0.0 {
                start.to_vec()
            } else {
                start.iter().zip(&grad).map(|(x, d)| x - eps * d / n).collect()
            }
        }
    };
    match norm {
        Norm::Linf => project(o, &stepped, eps, norm),
        Norm::L2 => {
            // noised inputs can sit outside [0, 1]; only the ball is enforced
            let d = stepped.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let s = if d > eps { eps / d } else { 1.0 };
            Ok(stepped.iter().zip(o).map(|(x, c)| c + (x - c) * s).collect())
        }
    }
}

/// FGSM with a uniformly random start inside the budget ball.
pub fn fgsm_random_start<R: Rng + ?Sized>(
    g: &Mlp,
    q: &Mlp,
    o: &[f64],
    eps: f64,
    norm: Norm,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let start = random_start(o, eps, norm, rng);
    let start = match norm {
        Norm::Linf => project(o, &start, eps, norm)?,
        Norm::L2 => start,
    };
    fgsm_from(g, q, o, &start, eps, norm)
}

/// Networks and optimizer state of the adversarial phase.
#[derive(Debug, Clone)]
pub struct AdvState {
    pub g: Mlp,
    pub q: Mlp,
    pub q_target: Mlp,
    adam_g: Adam,
    adam_q: Adam,
    /// Separate moments for the second, g-only step of the hybrid variant.
    adam_g_adv: Adam,
    pub optimizer_steps: u64,
    pub updates: u64,
}

impl AdvState {
    pub fn new(g: Mlp, q: Mlp, learning_rate: f64) -> Self {
        Self {
            adam_g: Adam::new(&g, learning_rate),
            adam_q: Adam::new(&q, learning_rate),
            adam_g_adv: Adam::new(&g, learning_rate),
            q_target: q.clone(),
            g,
            q,
            optimizer_steps: 0,
            updates: 0,
        }
    }

    fn apply(&mut self, grads_g: &Gradients, grads_q: &Gradients) -> Result<()> {
        self.adam_q.step(&mut self.q, grads_q)?;
        self.adam_g.step(&mut self.g, grads_g)?;
        self.optimizer_steps += 1;
        Ok(())
    }

    /// One minibatch update of `variant` at budget `eps`. With `kappa = 0`
    /// every variant performs exactly the nominal update: TD on true
    /// features for `q` and squared error for `g`.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &[&ReplayTransition],
        variant: Variant,
        kappa: f64,
        eps: f64,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<LossTerms> {
        let actions: Vec<ActionId> = batch.iter().map(|t| t.action).collect();
        let feats: Vec<&[f64]> = batch.iter().map(|t| t.features_true.as_slice()).collect();
        // l2 mode trains on the noised observation
        let obs: Vec<Vec<f64>> = batch
            .iter()
            .map(|t| match (cfg.norm, &t.noisy_obs) {
                (Norm::L2, Some(n)) => n.clone(),
                _ => t.obs.clone(),
            })
            .collect();
        let obs_refs: Vec<&[f64]> = obs.iter().map(|o| o.as_slice()).collect();
        let targets = double_q_targets(&self.q, &self.q_target, batch, cfg.discount)?;
        let mut gq = Gradients::zeros_like(&self.q);
        let mut gg = Gradients::zeros_like(&self.g);
        let mut terms = LossTerms::default();
        match variant {
            Variant::Vanilla => {
                terms.td = td_loss(&self.q, &feats, &actions, &targets, &mut gq, 1.0)?;
                terms.sup = supervised_loss(&self.g, &obs_refs, &feats, &mut gg, 1.0)?;
                terms.total = terms.td + terms.sup;
            }
            Variant::At => {
                let perturbed = obs
                    .iter()
                    .map(|o| fgsm_random_start(&self.g, &self.q, o, eps, cfg.norm, rng))
                    .collect::<Result<Vec<_>>>()?;
                terms.td = td_loss(&self.q, &feats, &actions, &targets, &mut gq, 1.0 - kappa)?;
                terms.adv =
                    composite_td_loss(&self.g, &self.q, &perturbed, &actions, &targets, &mut gg, &mut gq, kappa)?;
                terms.sup = supervised_loss(&self.g, &obs_refs, &feats, &mut gg, 1.0)?;
                terms.total = (1.0 - kappa) * terms.td + kappa * terms.adv + terms.sup;
            }
            Variant::Radial | Variant::PsrlHybrid => {
                terms.td = td_loss(&self.q, &feats, &actions, &targets, &mut gq, 1.0 - kappa)?;
                terms.adv = radial_hinge(&self.g, &self.q, &obs, eps, cfg.norm, Some(&mut gg), &mut gq, kappa)?;
                terms.sup = supervised_loss(&self.g, &obs_refs, &feats, &mut gg, 1.0)?;
                terms.total = (1.0 - kappa) * terms.td + kappa * terms.adv + terms.sup;
            }
            Variant::PsrlAt => {
                terms.td = td_loss(&self.q, &feats, &actions, &targets, &mut gq, 1.0 - kappa)?;
                terms.sup = supervised_loss(&self.g, &obs_refs, &feats, &mut gg, 1.0 - kappa)?;
                // q sees g's feature box as a constant input region
                let hinge = radial_hinge(&self.g, &self.q, &obs, eps, cfg.norm, None, &mut gq, kappa)?;
                let bound = bound_supervised_loss(&self.g, &obs, &feats, eps, cfg.norm, &mut gg, kappa)?;
                terms.adv = hinge + bound;
                terms.total = (1.0 - kappa) * (terms.td + terms.sup) + kappa * terms.adv;
            }
        }
        check_finite(&terms)?;
        self.apply(&gg, &gq)?;
        if variant == Variant::PsrlHybrid {
            let mut gg2 = Gradients::zeros_like(&self.g);
            let bound = bound_supervised_loss(&self.g, &obs, &feats, eps, cfg.norm, &mut gg2, kappa)?;
            if !bound.is_finite() {
                return Err(Error::TrainingFault(format!("non-finite bound loss {bound}")));
            }
            self.adam_g_adv.step(&mut self.g, &gg2)?;
            self.optimizer_steps += 1;
            terms.adv += bound;
            terms.total += kappa * bound;
        }
        self.updates += 1;
        if self.updates.is_multiple_of(cfg.target_sync as u64) {
            self.q_target = self.q.clone();
        }
        Ok(terms)
    }
}

fn noisy<R: Rng + ?Sized>(o: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    o.iter()
        .map(|v| {
            let z: f64 = rng.sample(StandardNormal);
            v + sigma * z
        })
        .collect()
}

fn random_action<R: Rng + ?Sized>(rng: &mut R) -> ActionId {
    ActionId(rng.random_range(0..ACTION_COUNT))
}

/// Mean episode reward of `q` acting on true features.
pub fn feature_policy_reward(q: &Mlp, preset: &ScenarioPreset, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &seed in seeds {
        total += eval::episode_reward(preset, seed, |s, _| {
            Ok(ActionId(argmax(&q.forward(&env::true_features(preset, s))?)))
        })?;
    }
    Ok(total / seeds.len().max(1) as f64)
}

/// Mean episode reward of the composite policy.
pub fn policy_reward(p: &PsrlPolicy, preset: &ScenarioPreset, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &seed in seeds {
        total += eval::episode_reward(preset, seed, |_, o| p.act(o))?;
    }
    Ok(total / seeds.len().max(1) as f64)
}

/// Seeds used for the reward column of the training log.
pub fn log_eval_seeds(cfg: &TrainConfig) -> Vec<u64> {
    (0..5).map(|i| 1_000_000 + cfg.seed * 100 + i).collect()
}

/// Episode driver shared by all phases: tracks the current state and resets
/// on termination.
struct Episodes {
    preset: ScenarioPreset,
    state: SemState,
}

impl Episodes {
    fn new<R: Rng + ?Sized>(preset: &ScenarioPreset, rng: &mut R) -> Self {
        Self { preset: preset.clone(), state: env::reset(preset, rng.random()) }
    }

    /// Steps with `a`; returns the transition and resets when the episode is over.
    fn step<R: Rng + ?Sized>(&mut self, a: ActionId, rng: &mut R) -> Result<(SemState, crate::env::StepOutcome)> {
        let out = env::step(&self.preset, &self.state, a)?;
        let prev = std::mem::replace(&mut self.state, out.next.clone());
        if out.unsafe_ || self.state.step_count >= self.preset.horizon {
            self.state = env::reset(&self.preset, rng.random());
        }
        Ok((prev, out))
    }
}

/// Double DQN on true features.
pub fn train_q_ddqn(preset: &ScenarioPreset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Mlp> {
    cfg.validate()?;
    let mut rng = phase_rng(cfg.seed, 1);
    let mut q = Mlp::random(&mlp_dims(env::FEATURE_DIM, &cfg.q_hidden, ACTION_COUNT), &mut rng);
    let mut target = q.clone();
    let mut adam = Adam::new(&q, cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let mut episodes = Episodes::new(preset, &mut rng);
    let mut meter = Meter::default();
    let mut updates = 0usize;
    for t in 0..cfg.dqn_steps {
        let s = env::true_features(preset, &episodes.state);
        let a = if rng.random::<f64>() < explore_rate(cfg, t) {
            random_action(&mut rng)
        } else {
            ActionId(argmax(&q.forward(&s)?))
        };
        let (_, out) = episodes.step(a, &mut rng)?;
        buffer.push(ReplayTransition {
            obs: Vec::new(),
            next_features_true: env::true_features(preset, &out.next),
            features_true: s,
            action: a,
            reward: out.reward,
            next_obs: Vec::new(),
            done: out.unsafe_,
            noisy_obs: None,
        });
        if buffer.len() >= cfg.learning_starts.max(cfg.batch_size) {
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            let targets = double_q_targets(&q, &target, &batch, cfg.discount)?;
            let feats: Vec<&[f64]> = batch.iter().map(|t| t.features_true.as_slice()).collect();
            let actions: Vec<ActionId> = batch.iter().map(|t| t.action).collect();
            let mut grads = Gradients::zeros_like(&q);
            let td = td_loss(&q, &feats, &actions, &targets, &mut grads, 1.0)?;
            if !td.is_finite() {
                return Err(Error::TrainingFault(format!("TD loss diverged at step {t}")));
            }
            adam.step(&mut q, &grads)?;
            updates += 1;
            if updates.is_multiple_of(cfg.target_sync) {
                target = q.clone();
            }
            meter.add(&LossTerms { td, ..LossTerms::default() });
        }
        if (t + 1) % cfg.log_every == 0 || t + 1 == cfg.dqn_steps {
            let (td, _, _) = meter.take();
            let reward = if t + 1 == cfg.dqn_steps {
                Some(feature_policy_reward(&q, preset, &log_eval_seeds(cfg))?)
            } else {
                None
            };
            log.row("dqn", t + 1, td, 0.0, 0.0, 0.0, reward);
        }
    }
    Ok(q)
}

/// Supervised regression of true features from observations, with data
/// collected by `q` acting on true features and random actions at rate
/// `g_explore`. In l2 mode a noised copy of each observation is added.
pub fn train_g_supervised(q: &Mlp, preset: &ScenarioPreset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Mlp> {
    train_g_with(q, preset, cfg, log, |_| {})
}

/// [`train_g_supervised`] with a hook called on the network after every
/// logging interval.
pub fn train_g_with<F: FnMut(&Mlp)>(
    q: &Mlp,
    preset: &ScenarioPreset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
    mut checkpoint: F,
) -> Result<Mlp> {
    cfg.validate()?;
    let mut rng = phase_rng(cfg.seed, 2);
    let mut g = Mlp::random(&mlp_dims(preset.observation_dim(), &cfg.g_hidden, env::FEATURE_DIM), &mut rng);
    let mut adam = Adam::new(&g, cfg.learning_rate);
    let mut buffer: ReplayBuffer<(Vec<f64>, Vec<f64>)> = ReplayBuffer::new(cfg.buffer_size);
    let mut episodes = Episodes::new(preset, &mut rng);
    let mut meter = Meter::default();
    for t in 0..cfg.g_steps {
        let s = env::true_features(preset, &episodes.state);
        let o = env::observe(preset, &episodes.state);
        if cfg.norm == Norm::L2 {
            buffer.push((noisy(&o, cfg.sigma, &mut rng), s.clone()));
        }
        buffer.push((o, s.clone()));
        let a = if rng.random::<f64>() < cfg.g_explore {
            random_action(&mut rng)
        } else {
            ActionId(argmax(&q.forward(&s)?))
        };
        episodes.step(a, &mut rng)?;
        if buffer.len() >= cfg.batch_size {
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            let inputs: Vec<&[f64]> = batch.iter().map(|(o, _)| o.as_slice()).collect();
            let truth: Vec<&[f64]> = batch.iter().map(|(_, s)| s.as_slice()).collect();
            let mut grads = Gradients::zeros_like(&g);
            let sup = supervised_loss(&g, &inputs, &truth, &mut grads, 1.0)?;
            if !sup.is_finite() {
                return Err(Error::TrainingFault(format!("supervised loss diverged at step {t}")));
            }
            adam.step(&mut g, &grads)?;
            meter.add(&LossTerms { sup, ..LossTerms::default() });
        }
        if (t + 1) % cfg.log_every == 0 || t + 1 == cfg.g_steps {
            let (_, sup, _) = meter.take();
            let reward = if t + 1 == cfg.g_steps {
                let p = PsrlPolicy::new(g.clone(), q.clone())?;
                Some(policy_reward(&p, preset, &log_eval_seeds(cfg))?)
            } else {
                None
            };
            log.row("supervised", t + 1, 0.0, sup, 0.0, 0.0, reward);
            checkpoint(&g);
        }
    }
    Ok(g)
}

/// Counters reported by [`adv_train`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AdvStats {
    pub updates: u64,
    pub optimizer_steps: u64,
}

/// Adversarial fine-tuning of a pretrained composite. The acting policy is
/// the composite itself with exploration at `explore_final`.
pub fn adv_train(
    g: &Mlp,
    q: &Mlp,
    preset: &ScenarioPreset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(Mlp, Mlp, AdvStats)> {
    cfg.validate()?;
    let mut rng = phase_rng(cfg.seed, 3 + cfg.variant as u64);
    let mut state = AdvState::new(g.clone(), q.clone(), cfg.learning_rate);
    let mut buffer = ReplayBuffer::new(cfg.buffer_size);
    let mut episodes = Episodes::new(preset, &mut rng);
    let mut meter = Meter::default();
    let target = cfg.target_eps_value();
    let ramp = cfg.ramp_steps();
    let mut eps = 0.0;
    for t in 0..cfg.adv_steps {
        let o = env::observe(preset, &episodes.state);
        let s = env::true_features(preset, &episodes.state);
        let a = if rng.random::<f64>() < cfg.explore_final {
            random_action(&mut rng)
        } else {
            ActionId(argmax(&state.q.forward(&state.g.forward(&o)?)?))
        };
        let noisy_obs = match cfg.norm {
            Norm::L2 => Some(noisy(&o, cfg.sigma, &mut rng)),
            Norm::Linf => None,
        };
        let (_, out) = episodes.step(a, &mut rng)?;
        buffer.push(ReplayTransition {
            next_obs: env::observe(preset, &out.next),
            next_features_true: env::true_features(preset, &out.next),
            obs: o,
            features_true: s,
            action: a,
            reward: out.reward,
            done: out.unsafe_,
            noisy_obs,
        });
        if buffer.len() >= cfg.batch_size {
            eps = ramp_eps(target, t, ramp);
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            let terms = state.update(&batch, cfg.variant, cfg.kappa, eps, cfg, &mut rng)?;
            meter.add(&terms);
        }
        if (t + 1) % cfg.log_every == 0 || t + 1 == cfg.adv_steps {
            let (td, sup, adv) = meter.take();
            let reward = if t + 1 == cfg.adv_steps {
                let p = PsrlPolicy::new(state.g.clone(), state.q.clone())?;
                Some(policy_reward(&p, preset, &log_eval_seeds(cfg))?)
            } else {
                None
            };
            log.row(cfg.variant.name(), t + 1, td, sup, adv, eps, reward);
        }
    }
    let stats = AdvStats { updates: state.updates, optimizer_steps: state.optimizer_steps };
    Ok((state.g, state.q, stats))
}

/// Pretrained vanilla networks shared by every variant.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub g: Mlp,
    pub q: Mlp,
    pub log: TrainLog,
}

/// DDQN followed by supervised feature learning.
pub fn pretrain(preset: &ScenarioPreset, cfg: &TrainConfig) -> Result<Pretrained> {
    let mut log = TrainLog::default();
    let q = train_q_ddqn(preset, cfg, &mut log)?;
    let g = train_g_supervised(&q, preset, cfg, &mut log)?;
    Ok(Pretrained { g, q, log })
}

/// Applies `cfg.variant` to pretrained networks; vanilla returns them as is.
pub fn finish_variant(pre: &Pretrained, preset: &ScenarioPreset, cfg: &TrainConfig) -> Result<(PsrlPolicy, TrainLog)> {
    let mut log = pre.log.clone();
    if cfg.variant == Variant::Vanilla {
        return Ok((PsrlPolicy::new(pre.g.clone(), pre.q.clone())?, log));
    }
    let (g, q, _) = adv_train(&pre.g, &pre.q, preset, cfg, &mut log)?;
    Ok((PsrlPolicy::new(g, q)?, log))
}

/// Full pipeline for one configuration.
pub fn train_pipeline(preset: &ScenarioPreset, cfg: &TrainConfig) -> Result<(PsrlPolicy, TrainLog)> {
    let pre = pretrain(preset, cfg)?;
    finish_variant(&pre, preset, cfg)
}
