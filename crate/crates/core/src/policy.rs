//! The composite policy `q ∘ g` and its certified action sets.

use std::fmt;

use crate::bounds::{composite_feature_bounds, crown_ibp_bounds, BoxBounds};
use crate::env::ActionId;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::smoothing::{SmoothedSamples, SmoothingConfig};
use crate::EPS_DENOM;

/// Set of action ids below 32, stored as a bitmask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ActionSet(u32);

impl ActionSet {
    pub const MAX_ACTIONS: usize = 32;

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn full(count: usize) -> Self {
        assert!(count <= Self::MAX_ACTIONS);
        if count == 32 {
            Self(u32::MAX)
        } else {
            Self((1u32 << count) - 1)
        }
    }

    pub fn singleton(a: ActionId) -> Self {
        let mut s = Self::empty();
        s.insert(a);
        s
    }

    pub fn from_bits(bits: u32) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn insert(&mut self, a: ActionId) {
        assert!(a.0 < Self::MAX_ACTIONS, "action id {} out of range", a.0);
        self.0 |= 1 << a.0;
    }

    pub fn contains(self, a: ActionId) -> bool {
        a.0 < Self::MAX_ACTIONS && self.0 & (1 << a.0) != 0
    }

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        Self(self.0 & !other.0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Members in increasing id order.
    pub fn iter(self) -> impl Iterator<Item = ActionId> {
        (0..Self::MAX_ACTIONS).filter(move |i| self.0 & (1 << i) != 0).map(ActionId)
    }
}

impl FromIterator<ActionId> for ActionSet {
    fn from_iter<I: IntoIterator<Item = ActionId>>(iter: I) -> Self {
        let mut s = Self::empty();
        for a in iter {
            s.insert(a);
        }
        s
    }
}

impl fmt::Display for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.iter().map(|a| a.0.to_string()).collect();
        write!(f, "{{{}}}", ids.join(","))
    }
}

/// Per-action interval on Q-values.
#[derive(Debug, Clone, PartialEq)]
pub struct QBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QBounds {
    /// Actions whose upper bound reaches the largest lower bound.
    pub fn action_set(&self) -> ActionSet {
        let best_lower = self.lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.upper
            .iter()
            .enumerate()
            .filter(|(_, ub)| **ub >= best_lower)
            .map(|(a, _)| ActionId(a))
            .collect()
    }
}

impl From<BoxBounds> for QBounds {
    fn from(b: BoxBounds) -> Self {
        Self { lower: b.lower().to_vec(), upper: b.upper().to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            "l2" | "l_2" => Ok(Norm::L2),
            other => Err(Error::InvalidArgument(format!("unknown norm `{other}` (expected linf or l2)"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How feature bounds are derived from an observation budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CertConfig {
    pub norm: Norm,
    /// Used for the l2 norm only.
    pub smoothing: SmoothingConfig,
}

impl CertConfig {
    pub fn linf() -> Self {
        Self { norm: Norm::Linf, smoothing: SmoothingConfig::default() }
    }

    pub fn l2(smoothing: SmoothingConfig) -> Self {
        Self { norm: Norm::L2, smoothing }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `π(o) = argmax_a q(g(o))_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsrlPolicy {
    pub g: Mlp,
    pub q: Mlp,
    pub action_count: usize,
}

impl PsrlPolicy {
    pub fn new(g: Mlp, q: Mlp) -> Result<Self> {
        if g.output_dim() != q.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "g outputs {} features but q expects {}",
                g.output_dim(),
                q.input_dim()
            )));
        }
        let action_count = q.output_dim();
        if action_count == 0 || action_count > ActionSet::MAX_ACTIONS {
            return Err(Error::ShapeMismatch(format!("q has {action_count} outputs")));
        }
        Ok(Self { g, q, action_count })
    }

    pub fn features(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.g.forward(o)
    }

    pub fn q_values(&self, o: &[f64]) -> Result<Vec<f64>> {
        self.q.forward(&self.g.forward(o)?)
    }

    pub fn act(&self, o: &[f64]) -> Result<ActionId> {
        Ok(ActionId(argmax(&self.q_values(o)?)))
    }

    /// Action of `q` alone on a given feature vector.
    pub fn act_on_features(&self, s: &[f64]) -> Result<ActionId> {
        Ok(ActionId(argmax(&self.q.forward(s)?)))
    }
}

/// Q-value bounds over a feature box (CROWN intersected with IBP).
pub fn q_bounds_from_feature_box(q: &Mlp, feat: &BoxBounds) -> Result<QBounds> {
    Ok(crown_ibp_bounds(q, feat)?.into())
}

/// Feature box for every observation within budget `eps` of `o`.
pub fn feature_bounds(p: &PsrlPolicy, o: &[f64], eps: f64, cfg: &CertConfig) -> Result<BoxBounds> {
    match cfg.norm {
        Norm::Linf => composite_feature_bounds(&p.g, o, eps),
        Norm::L2 => crate::smoothing::median_smooth_bounds(&p.g, o, eps, &cfg.smoothing),
    }
}

/// Actions an adversary with budget `eps` might induce at `o`.
///
/// Under l2 the box bounds the smoothed predictor; the base policy's own
/// action is added so that the nominal action is always a member.
pub fn cert_action_set(p: &PsrlPolicy, o: &[f64], eps: f64, cfg: &CertConfig) -> Result<ActionSet> {
    let feat = feature_bounds(p, o, eps, cfg)?;
    let set = q_bounds_from_feature_box(&p.q, &feat)?.action_set();
    Ok(set.union(ActionSet::singleton(p.act(o)?)))
}

/// Outcome of scanning the epsilon grid from a node's current set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanResult {
    /// Largest grid index whose certified set stays inside the current set.
    pub robust: u32,
    /// Actions added at `robust + 1`; empty when the scan reached the cap.
    pub action_next: ActionSet,
}

/// Certified action sets of a single observation, queried by grid index.
pub trait CertSession {
    fn action_set(&mut self, k: u32) -> Result<ActionSet>;
}

/// Produces a [`CertSession`] per observation.
pub trait ActionCertifier {
    fn action_count(&self) -> usize;

    fn session<'a>(&'a self, o: &'a [f64]) -> Result<Box<dyn CertSession + 'a>>;
}

/// Scans `start, start + 1, ..., cap` and stops at the first index whose
/// certified set is not contained in `current`.
pub fn scan_session(session: &mut dyn CertSession, current: ActionSet, start: u32, cap: u32) -> Result<ScanResult> {
    let mut robust = start;
    for k in start..=cap {
        let set = session.action_set(k)?;
        if set.is_subset(current) {
            robust = k;
        } else if k == start {
            return Err(Error::InvalidArgument(format!(
                "certified set {set} at {k}/{EPS_DENOM} is not inside the current set {current}"
            )));
        } else {
            return Ok(ScanResult { robust, action_next: set.difference(current) });
        }
    }
    Ok(ScanResult { robust, action_next: ActionSet::empty() })
}

/// [`ActionCertifier`] for a [`PsrlPolicy`].
#[derive(Debug, Clone, Copy)]
pub struct PolicyCertifier<'a> {
    pub policy: &'a PsrlPolicy,
    pub config: &'a CertConfig,
}

struct PolicySession<'a> {
    policy: &'a PsrlPolicy,
    o: &'a [f64],
    nominal: ActionSet,
    samples: Option<SmoothedSamples>,
}

impl CertSession for PolicySession<'_> {
    fn action_set(&mut self, k: u32) -> Result<ActionSet> {
        let eps = f64::from(k) / f64::from(EPS_DENOM);
        let feat = match &self.samples {
            Some(samples) => samples.bounds(eps)?,
            None => composite_feature_bounds(&self.policy.g, self.o, eps)?,
        };
        let set = q_bounds_from_feature_box(&self.policy.q, &feat)?.action_set();
        Ok(set.union(self.nominal))
    }
}

impl ActionCertifier for PolicyCertifier<'_> {
    fn action_count(&self) -> usize {
        self.policy.action_count
    }

    fn session<'a>(&'a self, o: &'a [f64]) -> Result<Box<dyn CertSession + 'a>> {
        let samples = match self.config.norm {
            Norm::Linf => None,
            Norm::L2 => Some(SmoothedSamples::new(&self.policy.g, o, &self.config.smoothing)?),
        };
        let nominal = ActionSet::singleton(self.policy.act(o)?);
        Ok(Box::new(PolicySession { policy: self.policy, o, nominal, samples }))
    }
}

/// Scans the grid upward from `start` for a node whose actions so far are
/// `current`.
pub fn robust_epsilon_scan(
    p: &PsrlPolicy,
    o: &[f64],
    current: ActionSet,
    cfg: &CertConfig,
    cap: u32,
    start: u32,
) -> Result<ScanResult> {
    let certifier = PolicyCertifier { policy: p, config: cfg };
    let mut session = certifier.session(o)?;
    scan_session(session.as_mut(), current, start, cap)
}
