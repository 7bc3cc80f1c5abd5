//! Tree-based adversarial safety certification.
//!
//! Budgets are grid indices `k`, meaning `k/255`. The tree is grown from the
//! nominal rollout; each round takes the smallest robust budget in the tree,
//! and every node whose certified set would grow at the next grid value gets
//! the new actions added and explored depth-first. The first unsafe state
//! fixes the certificate at the budget verified before the round.
//!
//! Step levels start at 1 at the root, so a horizon of `T_v` covers the
//! states `s_0..s_{T_v - 1}` and the full tree over `|A|` actions has
//! `Σ_{i<T_v} |A|^i` nodes.

use std::fmt::Write as _;
use std::time::Instant;

use crate::env::{self, ActionId, Observation, ScenarioPreset, SemState};
use crate::error::{Error, Result};
use crate::policy::{scan_session, ActionCertifier, ActionSet, CertSession, Norm};
use crate::{format_eps, EPS_DENOM};

/// Value stored as a budget when a node has nothing left to certify.
pub const SENTINEL: u32 = u32::MAX;

/// Grid `{0, 1/255, ..., cap/255}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpsGrid {
    pub cap: u32,
}

impl EpsGrid {
    pub fn linf() -> Self {
        Self { cap: EPS_DENOM }
    }

    pub fn l2() -> Self {
        Self { cap: 20 }
    }

    pub fn for_norm(norm: Norm) -> Self {
        match norm {
            Norm::Linf => Self::linf(),
            Norm::L2 => Self::l2(),
        }
    }

    pub fn step(&self) -> f64 {
        1.0 / f64::from(EPS_DENOM)
    }

    pub fn value(&self, k: u32) -> f64 {
        f64::from(k) / f64::from(EPS_DENOM)
    }
}

/// Transition structure needed to grow the tree.
pub trait CertEnv {
    type State: Clone;

    fn successors(&self, s: &Self::State, a: ActionId) -> Result<Vec<Self::State>>;
    fn is_unsafe(&self, s: &Self::State) -> bool;
    fn observe(&self, s: &Self::State) -> Observation;
}

/// The lane world as a [`CertEnv`].
#[derive(Debug, Clone)]
pub struct LaneWorld {
    pub preset: ScenarioPreset,
}

impl CertEnv for LaneWorld {
    type State = SemState;

    fn successors(&self, s: &SemState, a: ActionId) -> Result<Vec<SemState>> {
        env::successors(&self.preset, s, a)
    }

    fn is_unsafe(&self, s: &SemState) -> bool {
        env::is_unsafe(s)
    }

    fn observe(&self, s: &SemState) -> Observation {
        env::observe(&self.preset, s)
    }
}

#[derive(Debug, Clone)]
pub struct CertNode<S> {
    pub state: S,
    pub children: Vec<usize>,
    /// 1 at the root.
    pub step_level: usize,
    /// Action and successor index that led here from the parent.
    pub via: Option<(ActionId, usize)>,
    pub action_taken: ActionSet,
    pub robust_epsilon: u32,
    pub action_next: ActionSet,
    pub max_safety_epsilon: u32,
}

impl<S> CertNode<S> {
    fn new(state: S, step_level: usize, via: Option<(ActionId, usize)>) -> Self {
        Self {
            state,
            children: Vec::new(),
            step_level,
            via,
            action_taken: ActionSet::empty(),
            robust_epsilon: SENTINEL,
            action_next: ActionSet::empty(),
            max_safety_epsilon: SENTINEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    Unsafe,
    Budget,
}

/// Arena-backed certification tree.
#[derive(Debug, Clone)]
pub struct CertTree<S> {
    pub nodes: Vec<CertNode<S>>,
    pub horizon: usize,
    pub grid: EpsGrid,
    pub budget: usize,
    /// Nodes handed to `grow_tree`, in call order.
    pub grow_calls: Vec<usize>,
}

impl<S: Clone> CertTree<S> {
    pub fn new(root: S, horizon: usize, grid: EpsGrid, budget: usize) -> Self {
        Self {
            nodes: vec![CertNode::new(root, 1, None)],
            horizon,
            grid,
            budget,
            grow_calls: Vec::new(),
        }
    }

    pub fn root(&self) -> &CertNode<S> {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Post-order min of each node's robust budget and its children's
    /// max-safety values. Returns the root's value.
    pub fn update_max_safety(&mut self) -> u32 {
        // children always have larger indices than their parent
        for i in (0..self.nodes.len()).rev() {
            let mut m = self.nodes[i].robust_epsilon;
            for &c in &self.nodes[i].children {
                m = m.min(self.nodes[c].max_safety_epsilon);
            }
            self.nodes[i].max_safety_epsilon = m;
        }
        self.nodes[0].max_safety_epsilon
    }

    pub fn depth_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.horizon];
        for n in &self.nodes {
            counts[n.step_level - 1] += 1;
        }
        counts
    }

    fn push_child(&mut self, parent: usize, state: S, via: (ActionId, usize)) -> std::result::Result<usize, Halt> {
        if self.nodes.len() >= self.budget {
            return Err(Halt::Budget);
        }
        let level = self.nodes[parent].step_level + 1;
        self.nodes.push(CertNode::new(state, level, Some(via)));
        let id = self.nodes.len() - 1;
        self.nodes[parent].children.push(id);
        Ok(id)
    }
}

/// Drives the tree algorithms for one environment and certifier.
pub struct Tasc<'a, E: CertEnv, C: ActionCertifier> {
    pub env: &'a E,
    pub certifier: &'a C,
    pub tree: CertTree<E::State>,
}

type Flow = std::result::Result<(), Halt>;

impl<'a, E: CertEnv, C: ActionCertifier> Tasc<'a, E, C> {
    pub fn new(env: &'a E, certifier: &'a C, s0: E::State, horizon: usize, grid: EpsGrid, budget: usize) -> Self {
        Self { env, certifier, tree: CertTree::new(s0, horizon, grid, budget) }
    }

    fn session<'s>(&'s self, o: &'s [f64]) -> Result<Box<dyn CertSession + 's>> {
        self.certifier.session(o)
    }

    /// Certifies a fresh node at grid index `k`: its action set, robust
    /// budget and next actions.
    fn certify_node(&mut self, id: usize, k: u32) -> Result<()> {
        let o = self.env.observe(&self.tree.nodes[id].state);
        let cap = self.tree.grid.cap;
        let (taken, scan) = {
            let mut session = self.session(&o)?;
            let taken = session.action_set(k)?;
            (taken, scan_session(session.as_mut(), taken, k, cap)?)
        };
        let node = &mut self.tree.nodes[id];
        node.action_taken = taken;
        node.robust_epsilon = scan.robust;
        node.action_next = scan.action_next;
        Ok(())
    }

    /// Adds one child per (action, successor) and reports whether any of them
    /// is unsafe. Children are created in action order; the first unsafe one
    /// stops further creation.
    fn add_children(&mut self, id: usize, actions: ActionSet) -> Result<(Vec<usize>, Flow)> {
        let mut created = Vec::new();
        for a in actions.iter() {
            let succ = self.env.successors(&self.tree.nodes[id].state, a)?;
            for (j, s) in succ.into_iter().enumerate() {
                let unsafe_ = self.env.is_unsafe(&s);
                match self.tree.push_child(id, s, (a, j)) {
                    Ok(c) => created.push(c),
                    Err(h) => return Ok((created, Err(h))),
                }
                if unsafe_ {
                    return Ok((created, Err(Halt::Unsafe)));
                }
            }
        }
        Ok((created, Ok(())))
    }

    /// Depth-first expansion of `stack`, certifying every node at `k`.
    fn expand(&mut self, mut stack: Vec<usize>, k: u32) -> Result<Flow> {
        while let Some(id) = stack.pop() {
            if self.tree.nodes[id].step_level >= self.tree.horizon {
                continue;
            }
            self.certify_node(id, k)?;
            let taken = self.tree.nodes[id].action_taken;
            let (created, flow) = self.add_children(id, taken)?;
            if flow.is_err() {
                return Ok(flow);
            }
            // reversed so the lowest action is expanded first
            stack.extend(created.into_iter().rev());
        }
        Ok(Ok(()))
    }

    /// Grows the nominal tree at budget 0.
    pub fn build_nominal(&mut self) -> Result<Flow> {
        if self.env.is_unsafe(&self.tree.nodes[0].state) {
            return Ok(Err(Halt::Unsafe));
        }
        self.expand(vec![0], 0)
    }

    /// Adds the actions that enter `id`'s certified set at `eps + 1` and
    /// explores the new subtrees, certifying them at `eps + 1`.
    pub fn grow_tree(&mut self, id: usize, eps: u32) -> Result<Flow> {
        self.tree.grow_calls.push(id);
        let next = self.tree.nodes[id].action_next;
        let (created, flow) = self.add_children(id, next)?;
        if flow.is_err() {
            return Ok(flow);
        }
        let taken = self.tree.nodes[id].action_taken.union(next);
        let o = self.env.observe(&self.tree.nodes[id].state);
        let scan = {
            let mut session = self.session(&o)?;
            scan_session(session.as_mut(), taken, eps + 1, self.tree.grid.cap)?
        };
        let node = &mut self.tree.nodes[id];
        node.action_taken = taken;
        node.robust_epsilon = scan.robust;
        node.action_next = scan.action_next;
        self.expand(created.into_iter().rev().collect(), eps + 1)
    }

    /// Skips subtrees whose max safety exceeds `eps`; otherwise visits each
    /// child and grows those whose robust budget is exactly `eps`.
    pub fn tree_expand(&mut self, id: usize, eps: u32) -> Result<Flow> {
        if self.tree.nodes[id].max_safety_epsilon > eps {
            return Ok(Ok(()));
        }
        let children = self.tree.nodes[id].children.clone();
        for c in children {
            let flow = self.visit(c, eps)?;
            if flow.is_err() {
                return Ok(flow);
            }
        }
        Ok(Ok(()))
    }

    fn visit(&mut self, id: usize, eps: u32) -> Result<Flow> {
        let flow = self.tree_expand(id, eps)?;
        if flow.is_err() {
            return Ok(flow);
        }
        let node = &self.tree.nodes[id];
        if node.step_level == self.tree.horizon {
            return Ok(Ok(()));
        }
        if node.robust_epsilon == eps {
            return self.grow_tree(id, eps);
        }
        Ok(Ok(()))
    }

    /// Runs the full procedure.
    pub fn run(&mut self) -> Result<CertOutcome> {
        let cap = self.tree.grid.cap;
        if let Err(halt) = self.build_nominal()? {
            return Ok(CertOutcome { eps: 0, truncated: halt == Halt::Budget, nominal_unsafe: halt == Halt::Unsafe });
        }
        loop {
            let eps = self.tree.update_max_safety();
            if eps >= cap {
                return Ok(CertOutcome { eps: cap, truncated: false, nominal_unsafe: false });
            }
            // the root is the only child of a virtual parent
            match self.visit(0, eps)? {
                Ok(()) => {}
                Err(halt) => {
                    self.tree.update_max_safety();
                    return Ok(CertOutcome { eps, truncated: halt == Halt::Budget, nominal_unsafe: false });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CertOutcome {
    pub eps: u32,
    pub truncated: bool,
    /// The unperturbed tree already reaches an unsafe state.
    pub nominal_unsafe: bool,
}

/// Result of a certification run.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Certified budget as a grid index.
    pub eps_safety: u32,
    pub norm: Norm,
    pub horizon: usize,
    pub nodes_explored: usize,
    pub truncated: bool,
    /// Set when the budget-0 tree is unsafe; the zero certificate then
    /// carries no guarantee.
    pub nominal_unsafe: bool,
    pub depth_counts: Vec<usize>,
    pub wall_time_secs: f64,
}

impl Certificate {
    pub fn eps_value(&self) -> f64 {
        f64::from(self.eps_safety) / f64::from(EPS_DENOM)
    }

    /// Structured-text report. Wall time is left out so that reports are
    /// reproducible byte for byte.
    pub fn report(&self) -> String {
        let mut out = String::new();
        writeln!(out, "eps_safety = {}", format_eps(self.eps_safety)).unwrap();
        writeln!(out, "norm = {}", self.norm).unwrap();
        writeln!(out, "horizon = {}", self.horizon).unwrap();
        writeln!(out, "nodes_explored = {}", self.nodes_explored).unwrap();
        writeln!(out, "truncated = {}", self.truncated).unwrap();
        writeln!(out, "nominal_unsafe = {}", self.nominal_unsafe).unwrap();
        let counts: Vec<String> = self.depth_counts.iter().map(|c| c.to_string()).collect();
        writeln!(out, "nodes_per_depth = {}", counts.join(",")).unwrap();
        out
    }

    pub fn parse_report(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad certificate line `{line}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("certificate is missing `{k}`")))
        };
        let bad = |k: &str| Error::InvalidArgument(format!("bad certificate field `{k}`"));
        let depth_counts = get("nodes_per_depth")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| bad("nodes_per_depth")))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            eps_safety: crate::parse_eps(&get("eps_safety")?)?,
            norm: Norm::parse(&get("norm")?)?,
            horizon: get("horizon")?.parse().map_err(|_| bad("horizon"))?,
            nodes_explored: get("nodes_explored")?.parse().map_err(|_| bad("nodes_explored"))?,
            truncated: get("truncated")?.parse().map_err(|_| bad("truncated"))?,
            nominal_unsafe: get("nominal_unsafe")?.parse().map_err(|_| bad("nominal_unsafe"))?,
            depth_counts,
            wall_time_secs: 0.0,
        })
    }
}

/// Certifies from `s0` over `horizon` steps with at most `budget` nodes.
pub fn certify_in<E: CertEnv, C: ActionCertifier>(
    env: &E,
    certifier: &C,
    s0: E::State,
    horizon: usize,
    grid: EpsGrid,
    budget: usize,
    norm: Norm,
) -> Result<(Certificate, CertTree<E::State>)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("verification horizon must be at least 1".into()));
    }
    if budget < horizon {
        return Err(Error::InvalidArgument(format!(
            "node budget {budget} cannot hold the nominal path of {horizon} nodes"
        )));
    }
    let start = Instant::now();
    let mut tasc = Tasc::new(env, certifier, s0, horizon, grid, budget);
    let outcome = tasc.run()?;
    let tree = tasc.tree;
    let cert = Certificate {
        eps_safety: outcome.eps,
        norm,
        horizon,
        nodes_explored: tree.len(),
        truncated: outcome.truncated,
        nominal_unsafe: outcome.nominal_unsafe,
        depth_counts: tree.depth_counts(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((cert, tree))
}

/// Certifies a policy in the lane world.
pub fn certify(
    policy: &crate::policy::PsrlPolicy,
    config: &crate::policy::CertConfig,
    preset: &ScenarioPreset,
    s0: SemState,
    horizon: usize,
    grid: EpsGrid,
    budget: usize,
) -> Result<Certificate> {
    let env = LaneWorld { preset: preset.clone() };
    let certifier = crate::policy::PolicyCertifier { policy, config };
    Ok(certify_in(&env, &certifier, s0, horizon, grid, budget, config.norm)?.0)
}
