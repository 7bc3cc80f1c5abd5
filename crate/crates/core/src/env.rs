//! Deterministic lane-world POMDP.
//!
//! Vehicles are 5 units long and move with fixed Δt = 1 kinematics. Lane
//! changes and speed changes of the ego vehicle take effect at the start of a
//! step; every other vehicle keeps its lane and speed. Lane 0 is the leftmost
//! lane.
//!
//! The ego is unsafe when it collides with or comes within 1 unit
//! (bumper-to-bumper, strictly) of a vehicle in its own lane. Contact that
//! happens part-way through a step is latched in [`SemState::collided`] so
//! that fast vehicles cannot pass through each other between samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const SAFE_GAP: f64 = 1.0;
/// Number of semantic features predicted from an observation.
pub const FEATURE_DIM: usize = 6;
pub const ACTION_COUNT: usize = 5;

/// Discrete action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl ActionId {
    pub const LANE_LEFT: ActionId = ActionId(0);
    pub const IDLE: ActionId = ActionId(1);
    pub const LANE_RIGHT: ActionId = ActionId(2);
    pub const FASTER: ActionId = ActionId(3);
    pub const SLOWER: ActionId = ActionId(4);

    pub const ALL: [ActionId; ACTION_COUNT] =
        [Self::LANE_LEFT, Self::IDLE, Self::LANE_RIGHT, Self::FASTER, Self::SLOWER];

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "LANE_LEFT",
            1 => "IDLE",
            2 => "LANE_RIGHT",
            3 => "FASTER",
            4 => "SLOWER",
            _ => "INVALID",
        }
    }
}

/// Flattened two-frame occupancy grid, values in `[0, 1]`.
pub type Observation = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    Highway,
    Twoway,
    Exit,
    /// Highway variant whose non-idle actions may fail, leaving lane and
    /// speed unchanged. Exercises branching over successor sets.
    StochasticTest,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Highway => "highway",
            ScenarioKind::Twoway => "twoway",
            ScenarioKind::Exit => "exit",
            ScenarioKind::StochasticTest => "stochastic_test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub lane: usize,
    pub pos: f64,
    pub speed: f64,
}

/// Full simulator state. Cloning it is a snapshot; every future transition is
/// a function of this value alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemState {
    pub ego: Vehicle,
    pub others: Vec<Vehicle>,
    pub scenario: ScenarioKind,
    pub step_count: usize,
    /// Latched when the ego touched the unsafe zone of a vehicle during a step.
    pub collided: bool,
}

impl SemState {
    pub fn to_snapshot(&self) -> String {
        serde_json::to_string(self).expect("state serialises")
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad snapshot: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: SemState,
    pub reward: f64,
    pub unsafe_: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub right_lane: f64,
    pub high_speed: f64,
    pub unsafe_penalty: f64,
    /// Paid for being in the rightmost lane during the final `exit_window`
    /// steps of an episode.
    pub exit_bonus: f64,
    pub exit_window: usize,
}

/// Scenario parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPreset {
    pub kind: ScenarioKind,
    pub lane_count: usize,
    /// Cells per lane per frame.
    pub window: usize,
    pub cell_length: f64,
    pub vehicle_count: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub speed_step: f64,
    pub initial_speed: f64,
    /// Speed range of same-direction traffic.
    pub traffic_speed: (f64, f64),
    /// Interval of ego speeds that earns the speed reward.
    pub high_speed_band: (f64, f64),
    /// Longitudinal spawn range of other vehicles relative to the ego.
    pub spawn_range: (f64, f64),
    pub reward: RewardWeights,
    /// Feature value used for missing vehicles.
    pub default_feature: f64,
    /// Episode length used for evaluation.
    pub horizon: usize,
}

impl ScenarioPreset {
    pub fn highway() -> Self {
        Self {
            kind: ScenarioKind::Highway,
            lane_count: 3,
            window: 20,
            cell_length: 5.0,
            vehicle_count: 14,
            speed_min: 10.0,
            speed_max: 30.0,
            speed_step: 5.0,
            initial_speed: 25.0,
            traffic_speed: (15.0, 22.0),
            high_speed_band: (20.0, 30.0),
            spawn_range: (-25.0, 350.0),
            reward: RewardWeights {
                right_lane: 0.1,
                high_speed: 0.5,
                unsafe_penalty: 1.0,
                exit_bonus: 0.0,
                exit_window: 0,
            },
            default_feature: -1.0,
            horizon: 40,
        }
    }

    pub fn twoway() -> Self {
        Self {
            kind: ScenarioKind::Twoway,
            lane_count: 2,
            window: 30,
            vehicle_count: 5,
            traffic_speed: (15.0, 20.0),
            spawn_range: (30.0, 300.0),
            reward: RewardWeights {
                right_lane: 0.0,
                high_speed: 0.5,
                unsafe_penalty: 1.0,
                exit_bonus: 0.0,
                exit_window: 0,
            },
            horizon: 20,
            ..Self::highway()
        }
    }

    pub fn exit() -> Self {
        Self {
            kind: ScenarioKind::Exit,
            vehicle_count: 10,
            spawn_range: (-25.0, 250.0),
            reward: RewardWeights {
                right_lane: 0.1,
                high_speed: 0.5,
                unsafe_penalty: 1.0,
                exit_bonus: 1.0,
                exit_window: 3,
            },
            default_feature: 0.0,
            horizon: 15,
            ..Self::highway()
        }
    }

    pub fn stochastic_test() -> Self {
        Self { kind: ScenarioKind::StochasticTest, vehicle_count: 6, ..Self::highway() }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "highway" => Ok(Self::highway()),
            "twoway" => Ok(Self::twoway()),
            "exit" => Ok(Self::exit()),
            "stochastic_test" => Ok(Self::stochastic_test()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn observation_dim(&self) -> usize {
        2 * self.lane_count * self.window
    }

    fn window_length(&self) -> f64 {
        self.window as f64 * self.cell_length
    }

    /// Distance from the rear edge of the window to the ego position.
    fn ego_offset(&self) -> f64 {
        0.1 * self.window_length()
    }

    pub fn rightmost_lane(&self) -> usize {
        self.lane_count - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lane_count as f64,
            self.window as f64,
            self.cell_length,
            self.speed_max,
            self.speed_step,
            self.horizon as f64,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.speed_min > self.speed_max {
            return Err(Error::InvalidArgument(format!("invalid preset {:?}", self.kind)));
        }
        Ok(())
    }

    fn check_action(&self, a: ActionId) -> Result<()> {
        if a.0 >= ACTION_COUNT {
            return Err(Error::InvalidAction(a.0));
        }
        Ok(())
    }
}

fn collides(a: &Vehicle, b: &Vehicle) -> bool {
    a.lane == b.lane && (a.pos - b.pos).abs() - VEHICLE_LENGTH < SAFE_GAP
}

/// Draws an initial state. Other vehicles are placed uniformly in the spawn
/// range, rejecting placements that would overlap a vehicle already placed.
pub fn reset(preset: &ScenarioPreset, seed: u64) -> SemState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ego_lane = match preset.kind {
        ScenarioKind::Twoway => preset.rightmost_lane(),
        _ => rng.random_range(0..preset.lane_count),
    };
    let ego = Vehicle { lane: ego_lane, pos: 0.0, speed: preset.initial_speed };
    // spacing at spawn keeps every pair clear of each other's unsafe zone
    let min_spacing = VEHICLE_LENGTH + SAFE_GAP + 4.0;
    let mut others: Vec<Vehicle> = Vec::with_capacity(preset.vehicle_count);
    let mut attempts = 0;
    while others.len() < preset.vehicle_count && attempts < 10_000 {
        attempts += 1;
        let (lane, speed) = match preset.kind {
            ScenarioKind::Twoway => {
                // three vehicles share the ego lane, the rest drive towards it
                if others.len() < 3 {
                    (preset.rightmost_lane(), rng.random_range(preset.traffic_speed.0..preset.traffic_speed.1))
                } else {
                    (0, -rng.random_range(preset.traffic_speed.0..preset.traffic_speed.1))
                }
            }
            _ => (
                rng.random_range(0..preset.lane_count),
                rng.random_range(preset.traffic_speed.0..preset.traffic_speed.1),
            ),
        };
        let pos = rng.random_range(preset.spawn_range.0..preset.spawn_range.1);
        let candidate = Vehicle { lane, pos, speed };
        let clear = std::iter::once(&ego)
            .chain(others.iter())
            .all(|v| v.lane != lane || (v.pos - pos).abs() >= min_spacing);
        if clear {
            others.push(candidate);
        }
    }
    SemState { ego, others, scenario: preset.kind, step_count: 0, collided: false }
}

/// True iff the ego is in the unsafe zone of any vehicle in its lane, or
/// touched one during the step that produced `s`.
pub fn is_unsafe(s: &SemState) -> bool {
    s.collided || s.others.iter().any(|v| collides(&s.ego, v))
}

/// Lane and speed the ego ends up with after executing `a`.
fn apply_action(preset: &ScenarioPreset, ego: &Vehicle, a: ActionId) -> Vehicle {
    let mut next = *ego;
    match a {
        ActionId::LANE_LEFT => next.lane = ego.lane.saturating_sub(1),
        ActionId::LANE_RIGHT => next.lane = (ego.lane + 1).min(preset.rightmost_lane()),
        ActionId::FASTER => next.speed = (ego.speed + preset.speed_step).min(preset.speed_max),
        ActionId::SLOWER => next.speed = (ego.speed - preset.speed_step).max(preset.speed_min),
        _ => {}
    }
    next
}

/// Advances all vehicles one step given the ego's post-action lane and speed.
fn advance(s: &SemState, ego: Vehicle) -> SemState {
    let mut collided = s.collided;
    for v in s.others.iter().filter(|v| v.lane == ego.lane) {
        // relative position is linear over the step; check its closest approach
        let d0 = v.pos - ego.pos;
        let d1 = d0 + v.speed - ego.speed;
        let closest = if d0.signum() != d1.signum() { 0.0 } else { d0.abs().min(d1.abs()) };
        if closest - VEHICLE_LENGTH < SAFE_GAP {
            collided = true;
        }
    }
    let others = s
        .others
        .iter()
        .map(|v| Vehicle { pos: v.pos + v.speed, ..*v })
        .collect();
    SemState {
        ego: Vehicle { pos: ego.pos + ego.speed, ..ego },
        others,
        scenario: s.scenario,
        step_count: s.step_count + 1,
        collided,
    }
}

fn reward(preset: &ScenarioPreset, next: &SemState, unsafe_: bool) -> f64 {
    let w = &preset.reward;
    let mut r = 0.0;
    let in_right = next.ego.lane == preset.rightmost_lane();
    if in_right {
        r += w.right_lane;
    }
    let (lo, hi) = preset.high_speed_band;
    if next.ego.speed >= lo && next.ego.speed <= hi {
        r += w.high_speed;
    }
    if w.exit_window > 0 && in_right && next.step_count + w.exit_window > preset.horizon {
        r += w.exit_bonus;
    }
    if unsafe_ {
        r -= w.unsafe_penalty;
    }
    r
}

/// Deterministic transition. For the stochastic preset this is the outcome in
/// which the action succeeds.
pub fn step(preset: &ScenarioPreset, s: &SemState, a: ActionId) -> Result<StepOutcome> {
    preset.check_action(a)?;
    let next = advance(s, apply_action(preset, &s.ego, a));
    let unsafe_ = is_unsafe(&next);
    let reward = reward(preset, &next, unsafe_);
    Ok(StepOutcome { next, reward, unsafe_ })
}

/// Support of the transition distribution, in a fixed order.
pub fn successors(preset: &ScenarioPreset, s: &SemState, a: ActionId) -> Result<Vec<SemState>> {
    let nominal = step(preset, s, a)?.next;
    if preset.kind == ScenarioKind::StochasticTest && a != ActionId::IDLE {
        let failed = advance(s, s.ego);
        if failed != nominal {
            return Ok(vec![nominal, failed]);
        }
    }
    Ok(vec![nominal])
}

/// Adds the occupancy of `[center - len/2, center + len/2]` to one lane row.
fn paint(row: &mut [f64], cell_length: f64, rel_start: f64, intensity: f64) {
    let rel_end = rel_start + VEHICLE_LENGTH;
    let first = (rel_start / cell_length).floor().max(0.0) as usize;
    let last = ((rel_end / cell_length).ceil().max(0.0) as usize).min(row.len());
    for (j, cell) in row.iter_mut().enumerate().take(last).skip(first) {
        let lo = j as f64 * cell_length;
        let hi = lo + cell_length;
        let overlap = (rel_end.min(hi) - rel_start.max(lo)).max(0.0);
        *cell = (*cell + intensity * overlap / cell_length).min(1.0);
    }
}

const EGO_INTENSITY: f64 = 0.5;

/// Renders the previous and current frame. The previous frame is
/// reconstructed by rolling every vehicle back one step at its current speed;
/// both frames are centred on the ego.
pub fn observe(preset: &ScenarioPreset, s: &SemState) -> Observation {
    let lanes = preset.lane_count;
    let w = preset.window;
    let mut grid = vec![0.0; 2 * lanes * w];
    for (frame, dt) in [(0usize, 1.0), (1usize, 0.0)] {
        let ego_pos = s.ego.pos - dt * s.ego.speed;
        let start = ego_pos - preset.ego_offset();
        let base = frame * lanes * w;
        let row = |lane: usize| base + lane * w..base + (lane + 1) * w;
        let ego_rel = preset.ego_offset() - VEHICLE_LENGTH / 2.0;
        paint(&mut grid[row(s.ego.lane)], preset.cell_length, ego_rel, EGO_INTENSITY);
        for v in &s.others {
            let rel = (v.pos - dt * v.speed) - start - VEHICLE_LENGTH / 2.0;
            if rel + VEHICLE_LENGTH <= 0.0 || rel >= preset.window_length() {
                continue;
            }
            paint(&mut grid[row(v.lane)], preset.cell_length, rel, 1.0);
        }
    }
    grid
}

/// Relative position, lane offset and relative speed of the two vehicles
/// nearest the ego among those whose centre is inside the observation window.
/// Missing vehicles are filled with the preset default.
pub fn true_features(preset: &ScenarioPreset, s: &SemState) -> Vec<f64> {
    let start = s.ego.pos - preset.ego_offset();
    let end = start + preset.window_length();
    let mut visible: Vec<&Vehicle> = s.others.iter().filter(|v| v.pos >= start && v.pos < end).collect();
    visible.sort_by(|a, b| {
        (a.pos - s.ego.pos)
            .abs()
            .total_cmp(&(b.pos - s.ego.pos).abs())
            .then(a.lane.cmp(&b.lane))
    });
    let lane_scale = (preset.lane_count.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for slot in 0..2 {
        match visible.get(slot) {
            Some(v) => {
                out.push((v.pos - s.ego.pos) / preset.window_length());
                out.push((v.lane as f64 - s.ego.lane as f64) / lane_scale);
                out.push((v.speed - s.ego.speed) / preset.speed_max);
            }
            None => out.extend([preset.default_feature; 3]),
        }
    }
    out
}
