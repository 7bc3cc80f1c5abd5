use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use proptest::prelude::*;
use psrl_core::env::{ActionId, Observation};
use psrl_core::policy::{ActionCertifier, ActionSet, CertSession};
use psrl_core::tasc::{certify_in, CertEnv, EpsGrid};
use psrl_core::toy::{line_policy, LineWorld};
use psrl_core::{CertConfig, Norm, Result};

#[test]
fn line_world_certifies_fifty() {
    let p = line_policy();
    let world = LineWorld { x: 0.7 };
    let certifier = psrl_core::policy::PolicyCertifier { policy: &p, config: &CertConfig::linf() };
    for horizon in [2, 5] {
        let (c, _) = certify_in(&world, &certifier, world.start(), horizon, EpsGrid::linf(), 1000, Norm::Linf).unwrap();
        assert_eq!(c.eps_safety, 50, "horizon {horizon}");
        assert!(!c.truncated && !c.nominal_unsafe);
    }
}

/// Largest grid index at which no perturbation in a fine sweep of the ball
/// makes the toy policy take the unsafe action.
fn brute_force_line(x: f64) -> u32 {
    let p = line_policy();
    let sub = 32;
    let mut best = 0;
    for k in 0..=255u32 {
        let eps = f64::from(k) / 255.0;
        let n = (k * sub) as i64;
        let flips = (-n..=n).any(|j| {
            let d = eps * j as f64 / n.max(1) as f64;
            let xp = (x + d).clamp(0.0, 1.0);
            p.act(&[xp]).unwrap() == ActionId(1)
        });
        if flips {
            return best;
        }
        best = k;
    }
    best
}

#[test]
fn line_world_brute_force_agrees() {
    assert_eq!(brute_force_line(0.7), 50);
    let p = line_policy();
    // the flip at 51/255 is reached exactly at the ball's edge
    assert_eq!(p.act(&[0.7 - 51.0 / 255.0]).unwrap(), ActionId(1));
    assert_eq!(p.act(&[0.7 - 50.0 / 255.0]).unwrap(), ActionId(0));
}

/// Tree over action paths. Each path has pseudo-random per-action thresholds:
/// action `a` is certified possible at grid index `k` iff `k >= t(path, a)`.
#[derive(Clone, Debug)]
struct HashWorld {
    seed: u64,
    actions: usize,
    max_threshold: u32,
    unsafe_rate: u64,
}

impl HashWorld {
    fn hash(&self, path: &[usize], tag: u64) -> u64 {
        let mut h = DefaultHasher::new();
        (self.seed, path, tag).hash(&mut h);
        h.finish()
    }

    fn thresholds(&self, path: &[usize]) -> Vec<u32> {
        let nominal = (self.hash(path, 0) % self.actions as u64) as usize;
        (0..self.actions)
            .map(|a| {
                if a == nominal {
                    0
                } else {
                    1 + (self.hash(path, 1 + a as u64) % u64::from(self.max_threshold)) as u32
                }
            })
            .collect()
    }

    fn set_at(&self, path: &[usize], k: u32) -> ActionSet {
        self.thresholds(path).iter().enumerate().filter(|(_, t)| **t <= k).map(|(a, _)| ActionId(a)).collect()
    }

    /// Exhaustive reachability: is every state reachable within `horizon`
    /// levels safe when the adversary can pick any action of `set_at(k)`?
    fn safe_at(&self, path: &mut Vec<usize>, level: usize, horizon: usize, k: u32) -> bool {
        if self.is_unsafe(path) {
            return false;
        }
        if level == horizon {
            return true;
        }
        for a in self.set_at(path, k).iter() {
            path.push(a.0);
            let ok = self.safe_at(path, level + 1, horizon, k);
            path.pop();
            if !ok {
                return false;
            }
        }
        true
    }

    fn oracle(&self, horizon: usize, cap: u32) -> u32 {
        let mut best = 0;
        for k in 0..=cap {
            if !self.safe_at(&mut Vec::new(), 1, horizon, k) {
                return best;
            }
            best = k;
        }
        cap
    }
}

impl CertEnv for HashWorld {
    type State = Vec<usize>;

    fn successors(&self, s: &Vec<usize>, a: ActionId) -> Result<Vec<Vec<usize>>> {
        let mut next = s.clone();
        next.push(a.0);
        Ok(vec![next])
    }

    fn is_unsafe(&self, s: &Vec<usize>) -> bool {
        !s.is_empty() && self.hash(s, 99) % 100 < self.unsafe_rate
    }

    fn observe(&self, s: &Vec<usize>) -> Observation {
        s.iter().map(|&a| a as f64).collect()
    }
}

struct PathSession<'a> {
    world: &'a HashWorld,
    path: Vec<usize>,
}

impl CertSession for PathSession<'_> {
    fn action_set(&mut self, k: u32) -> Result<ActionSet> {
        Ok(self.world.set_at(&self.path, k))
    }
}

impl ActionCertifier for HashWorld {
    fn action_count(&self) -> usize {
        self.actions
    }

    fn session<'a>(&'a self, o: &'a [f64]) -> Result<Box<dyn CertSession + 'a>> {
        Ok(Box::new(PathSession { world: self, path: o.iter().map(|v| *v as usize).collect() }))
    }
}

fn full_tree(actions: usize, horizon: usize) -> usize {
    (0..horizon).map(|i| actions.pow(i as u32)).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tasc_matches_exhaustive_oracle(seed in any::<u64>(), actions in 2usize..4, horizon in 1usize..5, max_threshold in 1u32..12, unsafe_rate in 0u64..30) {
        let world = HashWorld { seed, actions, max_threshold, unsafe_rate };
        let grid = EpsGrid { cap: 20 };
        let (c, tree) = certify_in(&world, &world, Vec::new(), horizon, grid, 1_000_000, Norm::Linf).unwrap();
        prop_assert_eq!(c.eps_safety, world.oracle(horizon, grid.cap));
        prop_assert!(!c.truncated);
        prop_assert!(c.nodes_explored <= full_tree(actions, horizon));
        prop_assert_eq!(c.depth_counts.iter().sum::<usize>(), c.nodes_explored);
        if !c.nominal_unsafe {
            prop_assert!(c.nodes_explored >= horizon);
        }
        prop_assert_eq!(tree.len(), c.nodes_explored);
    }

    #[test]
    fn truncated_certificates_stay_below_the_oracle(seed in any::<u64>(), horizon in 2usize..5, budget_extra in 0usize..20) {
        let world = HashWorld { seed, actions: 3, max_threshold: 10, unsafe_rate: 5 };
        let grid = EpsGrid { cap: 20 };
        let (c, _) = certify_in(&world, &world, Vec::new(), horizon, grid, horizon + budget_extra, Norm::Linf).unwrap();
        prop_assert!(c.eps_safety <= world.oracle(horizon, grid.cap));
        prop_assert!(c.nodes_explored <= horizon + budget_extra);
    }
}

#[test]
fn never_pruned_tree_has_781_nodes() {
    // every action certified at every budget: nothing to prune
    let world = HashWorld { seed: 0, actions: 5, max_threshold: 1, unsafe_rate: 0 };
    struct All;
    struct AllSession;
    impl CertSession for AllSession {
        fn action_set(&mut self, _: u32) -> Result<ActionSet> {
            Ok(ActionSet::full(5))
        }
    }
    impl ActionCertifier for All {
        fn action_count(&self) -> usize {
            5
        }
        fn session<'a>(&'a self, _: &'a [f64]) -> Result<Box<dyn CertSession + 'a>> {
            Ok(Box::new(AllSession))
        }
    }
    let (c, _) = certify_in(&world, &All, Vec::new(), 5, EpsGrid::linf(), 10_000, Norm::Linf).unwrap();
    assert_eq!(c.nodes_explored, 781);
    assert_eq!(c.eps_safety, 255);
    let (t, _) = certify_in(&world, &All, Vec::new(), 5, EpsGrid::linf(), 500, Norm::Linf).unwrap();
    assert!(t.truncated);
    assert_eq!(t.nodes_explored, 500);
}

#[test]
fn oracle_worlds_are_not_degenerate() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..200 {
        let world = HashWorld { seed, actions: 3, max_threshold: 8, unsafe_rate: 10 };
        seen.insert(world.oracle(4, 20));
    }
    assert!(seen.len() >= 4, "{seen:?}");
}
