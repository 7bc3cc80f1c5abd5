//! One-dimensional analytic world with a closed-form safety threshold.
//!
//! The observation is a single number `x`. The policy is `g(x) = x` with
//! `Q = [x, 1 - x]`, so action 1 is chosen once `x` drops to one half.
//! Taking action 1 is unsafe; action 0 keeps the observation unchanged.

use crate::env::{ActionId, Observation};
use crate::error::Result;
use crate::nn::{Layer, Mlp};
use crate::policy::PsrlPolicy;
use crate::tasc::CertEnv;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineState {
    pub x: f64,
    pub crashed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LineWorld {
    pub x: f64,
}

impl LineWorld {
    pub fn start(&self) -> LineState {
        LineState { x: self.x, crashed: false }
    }
}

impl CertEnv for LineWorld {
    type State = LineState;

    fn successors(&self, s: &LineState, a: ActionId) -> Result<Vec<LineState>> {
        Ok(vec![LineState { x: s.x, crashed: s.crashed || a.0 == 1 }])
    }

    fn is_unsafe(&self, s: &LineState) -> bool {
        s.crashed
    }

    fn observe(&self, s: &LineState) -> Observation {
        vec![s.x]
    }
}

/// `g(x) = x`, `Q(s) = [s, 1 - s]`.
pub fn line_policy() -> PsrlPolicy {
    let g = Mlp::new(vec![Layer::new(1, 1, vec![1.0], vec![0.0]).expect("valid layer")]).expect("valid net");
    let q = Mlp::new(vec![Layer::new(1, 2, vec![1.0, -1.0], vec![0.0, 1.0]).expect("valid layer")])
        .expect("valid net");
    PsrlPolicy::new(g, q).expect("matching dims")
}
