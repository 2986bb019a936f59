//! Shared data model: the bonus menu, user states, logged trajectories and
//! learning hyperparameters.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Cents;

/// Days in one check-in cycle.
pub const DAYS_PER_CYCLE: u8 = 7;
/// Bonuses a user can claim before the cycle restarts.
pub const BONUSES_PER_CYCLE: u8 = 4;
/// `bonuses_collected` value at which only super bonuses may be offered.
pub const SUPER_CLAIM: u8 = BONUSES_PER_CYCLE - 1;
/// Extra network inputs appended to the feature vector by [`StateVector::input`].
pub const COUNTER_INPUTS: usize = 2 + BONUSES_PER_CYCLE as usize + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("action set needs at least one normal and one super bonus")]
    TooFewActions,
    #[error("{0} bonus costs must be strictly increasing")]
    NotIncreasing(&'static str),
    #[error("cheapest super bonus {cheapest_super} does not exceed the largest normal bonus {largest_normal}")]
    SuperNotAboveNormal { largest_normal: Cents, cheapest_super: Cents },
    #[error("invalid hyperparameter {name}: {reason}")]
    InvalidHyper { name: &'static str, reason: String },
}

/// The discrete bonus menu. Action indices run over the normal bonuses first,
/// then the super bonuses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawActionSet", into = "RawActionSet")]
pub struct ActionSet {
    normal: Vec<Cents>,
    super_: Vec<Cents>,
}

#[derive(Serialize, Deserialize)]
struct RawActionSet {
    normal_cents: Vec<Cents>,
    super_cents: Vec<Cents>,
}

impl TryFrom<RawActionSet> for ActionSet {
    type Error = ModelError;
    fn try_from(raw: RawActionSet) -> Result<Self, ModelError> {
        ActionSet::new(raw.normal_cents, raw.super_cents)
    }
}

impl From<ActionSet> for RawActionSet {
    fn from(a: ActionSet) -> Self {
        RawActionSet { normal_cents: a.normal, super_cents: a.super_ }
    }
}

impl ActionSet {
    pub fn new(normal: Vec<Cents>, super_: Vec<Cents>) -> Result<Self, ModelError> {
        if normal.is_empty() || super_.is_empty() {
            return Err(ModelError::TooFewActions);
        }
        if normal.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::NotIncreasing("normal"));
        }
        if super_.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::NotIncreasing("super"));
        }
        let largest_normal = *normal.last().unwrap();
        let cheapest_super = super_[0];
        if cheapest_super <= largest_normal {
            return Err(ModelError::SuperNotAboveNormal { largest_normal, cheapest_super });
        }
        Ok(ActionSet { normal, super_ })
    }

    /// Ten normal bonuses from 0.65 to 1.05 and two super bonuses, 1.72 and 1.82.
    pub fn standard() -> Self {
        let normal = [65, 67, 71, 75, 79, 83, 87, 94, 101, 105].map(Cents).to_vec();
        let super_ = [172, 182].map(Cents).to_vec();
        ActionSet::new(normal, super_).expect("standard action set is valid")
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.super_.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cost(&self, action: usize) -> Cents {
        if action < self.normal.len() {
            self.normal[action]
        } else {
            self.super_[action - self.normal.len()]
        }
    }

    pub fn costs(&self) -> Vec<Cents> {
        self.normal.iter().chain(&self.super_).copied().collect()
    }

    pub fn normal_costs(&self) -> &[Cents] {
        &self.normal
    }

    pub fn super_costs(&self) -> &[Cents] {
        &self.super_
    }

    pub fn normal_range(&self) -> Range<usize> {
        0..self.normal.len()
    }

    pub fn super_range(&self) -> Range<usize> {
        self.normal.len()..self.len()
    }

    pub fn is_super(&self, action: usize) -> bool {
        action >= self.normal.len()
    }

    /// Actions that may be offered to a user who has already collected
    /// `bonuses_collected` bonuses in the current cycle.
    pub fn day_mask(&self, bonuses_collected: u8) -> Range<usize> {
        if bonuses_collected == SUPER_CLAIM {
            self.super_range()
        } else {
            self.normal_range()
        }
    }
}

/// Observable state of a user at a decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub features: Vec<f64>,
    pub day_in_cycle: u8,
    pub bonuses_collected: u8,
}

impl StateVector {
    /// Network input: the features followed by scaled counters and a one-hot
    /// encoding of `bonuses_collected`.
    pub fn input(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.features.len() + COUNTER_INPUTS);
        x.extend_from_slice(&self.features);
        x.push(self.day_in_cycle as f64 / DAYS_PER_CYCLE as f64);
        x.push(self.bonuses_collected as f64 / BONUSES_PER_CYCLE as f64);
        for k in 0..=BONUSES_PER_CYCLE {
            x.push(if self.bonuses_collected == k { 1.0 } else { 0.0 });
        }
        x
    }

    pub fn input_len(d: usize) -> usize {
        d + COUNTER_INPUTS
    }
}

/// One logged decision step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub user_id: u64,
    pub t: u32,
    pub state: StateVector,
    pub action_index: usize,
    pub reward: u8,
    pub cost: Cents,
    /// `None` marks a terminal transition.
    pub next_state: Option<StateVector>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn user_id(&self) -> Option<u64> {
        self.transitions.first().map(|t| t.user_id)
    }
}

/// A logged dataset together with the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub horizon: usize,
    pub actions: ActionSet,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions.iter())
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_dataset(&self.trajectories, &self.actions, self.d, self.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_gamma() -> f64 {
    1.0
}
fn default_xi() -> f64 {
    0.3
}
fn default_epsilon() -> f64 {
    0.01
}
fn default_kappa() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    64
}
fn default_sync() -> usize {
    500
}
fn default_steps() -> usize {
    5_000
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

/// Learning hyperparameters. The seed fully determines training for a given
/// dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_xi")]
    pub xi: f64,
    /// Uniform perturbation rate of the behavior policy during data generation.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sync")]
    pub target_sync_interval: usize,
    #[serde(default = "default_steps")]
    pub training_steps: usize,
    /// Steps for the behavior and reward classifiers; `None` reuses `training_steps`.
    #[serde(default)]
    pub classifier_steps: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            gamma: default_gamma(),
            xi: default_xi(),
            epsilon: default_epsilon(),
            kappa: default_kappa(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            target_sync_interval: default_sync(),
            training_steps: default_steps(),
            classifier_steps: None,
            hidden: default_hidden(),
            optimizer: default_optimizer(),
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ModelError::InvalidHyper { name, reason: format!("{v} is outside [0, 1]") })
            }
        };
        unit("gamma", self.gamma)?;
        unit("xi", self.xi)?;
        unit("epsilon", self.epsilon)?;
        if !(self.kappa > 0.0) {
            return Err(ModelError::InvalidHyper { name: "kappa", reason: format!("{} must be positive", self.kappa) });
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(ModelError::InvalidHyper {
                name: "learning_rate",
                reason: format!("{} must be finite and non-negative", self.learning_rate),
            });
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidHyper { name: "batch_size", reason: "must be at least 1".into() });
        }
        if self.target_sync_interval == 0 {
            return Err(ModelError::InvalidHyper { name: "target_sync_interval", reason: "must be at least 1".into() });
        }
        Ok(())
    }

    pub fn classifier_steps(&self) -> usize {
        self.classifier_steps.unwrap_or(self.training_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    EmptyTrajectory,
    ExceedsHorizon { len: usize, horizon: usize },
    FeatureLength { expected: usize, found: usize },
    DayOutOfRange(u8),
    BonusesOutOfRange(u8),
    ActionOutOfRange(usize),
    IneligibleAction { action: usize, bonuses_collected: u8 },
    CostMismatch { expected: Cents, found: Cents },
    RewardNotBinary(u8),
    DoneTerminalMismatch,
    ChainBroken,
    StepNotConsecutive,
    MixedUsers,
    MultipleSuperActions,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::EmptyTrajectory => write!(f, "empty trajectory"),
            ViolationKind::ExceedsHorizon { len, horizon } => {
                write!(f, "trajectory exceeds T: length {len} > {horizon}")
            }
            ViolationKind::FeatureLength { expected, found } => {
                write!(f, "feature length {found} differs from d = {expected}")
            }
            ViolationKind::DayOutOfRange(d) => write!(f, "day_in_cycle {d} outside 1..={DAYS_PER_CYCLE}"),
            ViolationKind::BonusesOutOfRange(b) => {
                write!(f, "bonuses_collected {b} not below {BONUSES_PER_CYCLE} at a decision")
            }
            ViolationKind::ActionOutOfRange(a) => write!(f, "action index {a} outside the action set"),
            ViolationKind::IneligibleAction { action, bonuses_collected } => {
                write!(f, "action {action} not allowed after {bonuses_collected} collected bonuses")
            }
            ViolationKind::CostMismatch { expected, found } => {
                write!(f, "cost mismatch: logged {found}, action costs {expected}")
            }
            ViolationKind::RewardNotBinary(r) => write!(f, "reward {r} is not 0 or 1"),
            ViolationKind::DoneTerminalMismatch => write!(f, "done flag disagrees with terminal next state"),
            ViolationKind::ChainBroken => write!(f, "next_state does not match the following state"),
            ViolationKind::StepNotConsecutive => write!(f, "time steps are not consecutive"),
            ViolationKind::MixedUsers => write!(f, "trajectory mixes user ids"),
            ViolationKind::MultipleSuperActions => write!(f, "more than one super bonus in a trajectory"),
        }
    }
}

/// A single invariant violation, located by user id and time step.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub user_id: Option<u64>,
    pub t: Option<u32>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.user_id, self.t) {
            (Some(u), Some(t)) => write!(f, "user {u} step {t}: {}", self.kind),
            (Some(u), None) => write!(f, "user {u}: {}", self.kind),
            _ => write!(f, "{}", self.kind),
        }
    }
}

/// Checks every dataset invariant and returns the violations, sorted so the
/// report does not depend on trajectory order. An empty report means valid.
pub fn validate_dataset(trajectories: &[Trajectory], actions: &ActionSet, d: usize, horizon: usize) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    for traj in trajectories {
        let uid = traj.user_id();
        let mut push = |t: Option<u32>, kind| {
            out.insert(Violation { user_id: uid, t, kind });
        };
        if traj.is_empty() {
            push(None, ViolationKind::EmptyTrajectory);
            continue;
        }
        if traj.len() > horizon {
            push(None, ViolationKind::ExceedsHorizon { len: traj.len(), horizon });
        }
        let supers = traj.transitions.iter().filter(|tr| tr.action_index < actions.len() && actions.is_super(tr.action_index)).count();
        if supers > 1 {
            push(None, ViolationKind::MultipleSuperActions);
        }
        for (k, tr) in traj.transitions.iter().enumerate() {
            let at = Some(tr.t);
            if Some(tr.user_id) != uid {
                push(at, ViolationKind::MixedUsers);
            }
            for s in std::iter::once(&tr.state).chain(tr.next_state.as_ref()) {
                if s.features.len() != d {
                    push(at, ViolationKind::FeatureLength { expected: d, found: s.features.len() });
                }
                if !(1..=DAYS_PER_CYCLE).contains(&s.day_in_cycle) {
                    push(at, ViolationKind::DayOutOfRange(s.day_in_cycle));
                }
            }
            if tr.state.bonuses_collected >= BONUSES_PER_CYCLE {
                push(at, ViolationKind::BonusesOutOfRange(tr.state.bonuses_collected));
            }
            if tr.action_index >= actions.len() {
                push(at, ViolationKind::ActionOutOfRange(tr.action_index));
            } else {
                if !actions.day_mask(tr.state.bonuses_collected).contains(&tr.action_index) {
                    push(
                        at,
                        ViolationKind::IneligibleAction {
                            action: tr.action_index,
                            bonuses_collected: tr.state.bonuses_collected,
                        },
                    );
                }
                let expected = actions.cost(tr.action_index);
                if expected != tr.cost {
                    push(at, ViolationKind::CostMismatch { expected, found: tr.cost });
                }
            }
            if tr.reward > 1 {
                push(at, ViolationKind::RewardNotBinary(tr.reward));
            }
            if tr.done != tr.next_state.is_none() {
                push(at, ViolationKind::DoneTerminalMismatch);
            }
            if let Some(next) = traj.transitions.get(k + 1) {
                if next.t != tr.t + 1 {
                    push(at, ViolationKind::StepNotConsecutive);
                }
                if tr.next_state.as_ref() != Some(&next.state) {
                    push(at, ViolationKind::ChainBroken);
                }
            }
        }
    }
    out.into_iter().collect()
}
