//! Partially-supervised reinforcement learning with adversarial safety
//! certification.
//!
//! A policy is the composition `q ∘ g` of a feature predictor `g`
//! (observation → semantic state) and a Q-network `q` (semantic state →
//! action values). The crate provides:
//!
//! - [`env`]: a deterministic lane-world POMDP with highway, two-way and exit
//!   presets.
//! - [`nn`]: fully-connected ReLU networks, reverse-mode gradients, Adam and
//!   the `MLPv1` weight format.
//! - [`bounds`]: interval bound propagation and CROWN backward bounds.
//! - [`smoothing`]: median smoothing bounds for l2 perturbations.
//! - [`policy`]: the composite policy and certified action sets.
//! - [`tasc`]: tree-based certification of the largest safe perturbation
//!   budget over a finite horizon.
//! - [`train`]: DDQN, supervised feature learning and adversarial training.
//! - [`eval`]: PGD attacks, attacked rollouts and evaluation metrics.
//! - [`toy`]: a one-dimensional world with a known safety threshold.

pub mod bounds;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod smoothing;
pub mod tasc;
pub mod toy;
pub mod train;

pub use bounds::BoxBounds;
pub use env::{ActionId, Observation, ScenarioKind, ScenarioPreset, SemState, StepOutcome};
pub use error::{Error, Result};
pub use nn::{Adam, Gradients, Mlp};
pub use policy::{ActionSet, CertConfig, Norm, PsrlPolicy, QBounds};
pub use smoothing::SmoothingConfig;
pub use tasc::{CertNode, Certificate, EpsGrid};

/// Denominator of every user-facing perturbation budget (`k/255`).
pub const EPS_DENOM: u32 = 255;

/// Renders a grid index as the `k/255` string used in reports.
pub fn format_eps(k: u32) -> String {
    format!("{k}/{EPS_DENOM}")
}

/// Parses `k/255`, or a plain decimal that lies on the 1/255 grid.
pub fn parse_eps(text: &str) -> Result<u32> {
    let text = text.trim();
    if let Some((num, den)) = text.split_once('/') {
        let num: u32 = num
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad epsilon numerator in `{text}`")))?;
        let den: u32 = den
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad epsilon denominator in `{text}`")))?;
        if den != EPS_DENOM {
            return Err(Error::InvalidArgument(format!(
                "epsilon `{text}` must use denominator {EPS_DENOM}"
            )));
        }
        return Ok(num);
    }
    let value: f64 = text
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad epsilon `{text}`")))?;
    let k = (value * f64::from(EPS_DENOM)).round();
    if value < 0.0 || (k / f64::from(EPS_DENOM) - value).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "epsilon `{text}` is not a non-negative multiple of 1/{EPS_DENOM}"
        )));
    }
    Ok(k as u32)
}
