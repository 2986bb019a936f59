//! Synthetic check-in environment.
//!
//! Each simulated user belongs to a latent segment and walks through one
//! check-in cycle. At every login the user claims the offered bonus and then
//! returns the next day with probability
//!
//! ```text
//! sigmoid(base_logit + bonus_sensitivity * cost + streak_bonus * streak
//!         + carryover * last_bonus + user_offset)
//! ```
//!
//! where `streak` counts the consecutive logins so far in the cycle and
//! `user_offset ~ N(0, noise_scale)` is drawn once per user. A trajectory ends
//! when the user does not return, when four bonuses have been collected, or
//! when the horizon is reached.
//!
//! The observable [`StateVector`] exposes a noisy one-hot of the segment, a
//! few recent-behavior aggregates and optional irrelevant static features.
//! With every `noise_scale` at zero the environment is tabular and
//! [`oracle_value_iteration`] computes the exact optimal action values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSet, StateVector, Trajectory, Transition, BONUSES_PER_CYCLE, DAYS_PER_CYCLE};
use crate::money::Cents;

/// Recent-behavior aggregates following the segment block: streak, last bonus, mean bonus.
pub const DYNAMIC_FEATURES: usize = 3;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action} is not eligible after {bonuses_collected} collected bonuses")]
    IneligibleAction { action: usize, bonuses_collected: u8 },
    #[error("user {0} has already finished the cycle")]
    UserDone(u64),
    #[error("environment is not tabular: segment {0} has a nonzero noise_scale")]
    NotTabular(usize),
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("invalid behavior policy: {0}")]
    InvalidBehavior(String),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    /// Relative share of arriving users.
    #[serde(default = "one")]
    pub weight: f64,
    pub base_logit: f64,
    /// Logit increase per currency unit of bonus.
    pub bonus_sensitivity: f64,
    /// Logit increase per prior consecutive login in the cycle.
    #[serde(default)]
    pub streak_bonus: f64,
    /// Logit increase per currency unit of the previous bonus.
    #[serde(default)]
    pub carryover: f64,
    /// Standard deviation of the per-user logit offset.
    #[serde(default)]
    pub noise_scale: f64,
}

fn default_horizon() -> usize {
    BONUSES_PER_CYCLE as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub segments: Vec<SegmentParams>,
    /// Observable feature dimension; at least `segments.len() + DYNAMIC_FEATURES`.
    pub d: usize,
    /// Standard deviation of the noise on the observed segment one-hot.
    #[serde(default)]
    pub feature_noise: f64,
    /// Maximum trajectory length T.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "ActionSet::standard")]
    pub actions: ActionSet,
}

impl EnvConfig {
    /// Three segments with low, medium and high bonus sensitivity.
    pub fn standard() -> Self {
        EnvConfig {
            segments: vec![
                SegmentParams {
                    weight: 1.0,
                    base_logit: 0.2,
                    bonus_sensitivity: 0.0,
                    streak_bonus: 0.2,
                    carryover: 0.0,
                    noise_scale: 0.3,
                },
                SegmentParams {
                    weight: 1.0,
                    base_logit: -1.6,
                    bonus_sensitivity: 2.0,
                    streak_bonus: 0.2,
                    carryover: 0.0,
                    noise_scale: 0.3,
                },
                SegmentParams {
                    weight: 1.0,
                    base_logit: -5.0,
                    bonus_sensitivity: 6.0,
                    streak_bonus: 0.2,
                    carryover: 0.0,
                    noise_scale: 0.3,
                },
            ],
            d: 8,
            feature_noise: 0.2,
            horizon: default_horizon(),
            actions: ActionSet::standard(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.segments.is_empty() {
            return bad("at least one segment is required".into());
        }
        for (k, s) in self.segments.iter().enumerate() {
            if !(s.weight > 0.0) || !s.weight.is_finite() {
                return bad(format!("segment {k}: weight must be positive"));
            }
            if !(s.bonus_sensitivity >= 0.0) || !s.bonus_sensitivity.is_finite() {
                return bad(format!("segment {k}: bonus_sensitivity must be finite and non-negative"));
            }
            if !(s.noise_scale >= 0.0) || !s.noise_scale.is_finite() {
                return bad(format!("segment {k}: noise_scale must be finite and non-negative"));
            }
            if ![s.base_logit, s.streak_bonus, s.carryover].iter().all(|v| v.is_finite()) {
                return bad(format!("segment {k}: parameters must be finite"));
            }
        }
        if self.d < self.segments.len() + DYNAMIC_FEATURES {
            return bad(format!("d = {} is below segments + {DYNAMIC_FEATURES}", self.d));
        }
        if !(self.feature_noise >= 0.0) || !self.feature_noise.is_finite() {
            return bad("feature_noise must be finite and non-negative".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        Ok(())
    }

    pub fn is_tabular(&self) -> bool {
        self.segments.iter().all(|s| s.noise_scale == 0.0)
    }
}

/// A user's latent and observable simulation state.
#[derive(Debug, Clone, PartialEq)]
pub struct SimUser {
    pub id: u64,
    pub segment: usize,
    offset: f64,
    static_features: Vec<f64>,
    pub t: u32,
    pub day_in_cycle: u8,
    pub bonuses_collected: u8,
    pub last_bonus: Cents,
    total_bonus: Cents,
    pub done: bool,
}

impl SimUser {
    /// Consecutive logins so far in the cycle.
    pub fn streak(&self) -> u8 {
        self.bonuses_collected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: u8,
    pub next_state: Option<StateVector>,
    pub done: bool,
}

/// Independent random stream for one user, split from the master seed.
pub fn user_rng(seed: u64, user_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_id);
    rng
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    cumulative_weights: Vec<f64>,
}

impl Env {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let total: f64 = config.segments.iter().map(|s| s.weight).sum();
        let mut acc = 0.0;
        let cumulative_weights = config
            .segments
            .iter()
            .map(|s| {
                acc += s.weight / total;
                acc
            })
            .collect();
        Ok(Env { config, cumulative_weights })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn actions(&self) -> &ActionSet {
        &self.config.actions
    }

    pub fn n_segments(&self) -> usize {
        self.config.segments.len()
    }

    /// Draws a new user at the start of a cycle.
    pub fn spawn_user<R: Rng>(&self, id: u64, rng: &mut R) -> SimUser {
        let u: f64 = rng.random();
        let segment = self.cumulative_weights.iter().position(|&c| u < c).unwrap_or(self.n_segments() - 1);
        self.spawn_user_in(id, segment, rng)
    }

    /// Draws a new user from a given segment.
    pub fn spawn_user_in<R: Rng>(&self, id: u64, segment: usize, rng: &mut R) -> SimUser {
        let params = &self.config.segments[segment];
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let offset = if params.noise_scale > 0.0 { params.noise_scale * std_normal.sample(rng) } else { 0.0 };
        let n_seg = self.n_segments();
        let mut static_features = Vec::with_capacity(self.config.d - DYNAMIC_FEATURES);
        for k in 0..n_seg {
            let hot = if k == segment { 1.0 } else { 0.0 };
            let noise = if self.config.feature_noise > 0.0 { self.config.feature_noise * std_normal.sample(rng) } else { 0.0 };
            static_features.push(hot + noise);
        }
        for _ in n_seg + DYNAMIC_FEATURES..self.config.d {
            static_features.push(std_normal.sample(rng));
        }
        SimUser {
            id,
            segment,
            offset,
            static_features,
            t: 1,
            day_in_cycle: 1,
            bonuses_collected: 0,
            last_bonus: Cents::ZERO,
            total_bonus: Cents::ZERO,
            done: false,
        }
    }

    pub fn observe(&self, user: &SimUser) -> StateVector {
        let n_seg = self.n_segments();
        let mut features = Vec::with_capacity(self.config.d);
        features.extend_from_slice(&user.static_features[..n_seg]);
        features.push(user.streak() as f64 / BONUSES_PER_CYCLE as f64);
        features.push(user.last_bonus.units());
        let mean = if user.bonuses_collected > 0 { user.total_bonus.units() / user.bonuses_collected as f64 } else { 0.0 };
        features.push(mean);
        features.extend_from_slice(&user.static_features[n_seg..]);
        StateVector { features, day_in_cycle: user.day_in_cycle, bonuses_collected: user.bonuses_collected }
    }

    /// Observed segment proxy: the largest entry of the noisy one-hot block.
    pub fn segment_proxy(&self, state: &StateVector) -> usize {
        argmax_first(&state.features[..self.n_segments()])
    }

    fn check_eligible(&self, bonuses_collected: u8, action: usize) -> Result<(), EnvError> {
        if action >= self.actions().len() || !self.actions().day_mask(bonuses_collected).contains(&action) {
            return Err(EnvError::IneligibleAction { action, bonuses_collected });
        }
        Ok(())
    }

    fn logit(&self, segment: usize, streak: u8, last_bonus: Cents, offset: f64, cost: Cents) -> f64 {
        let p = &self.config.segments[segment];
        p.base_logit + p.bonus_sensitivity * cost.units() + p.streak_bonus * streak as f64 + p.carryover * last_bonus.units() + offset
    }

    /// Probability that the user logs in the next day after receiving `action`.
    pub fn retention_prob(&self, user: &SimUser, action: usize) -> Result<f64, EnvError> {
        self.check_eligible(user.bonuses_collected, action)?;
        let cost = self.actions().cost(action);
        let x = self.logit(user.segment, user.streak(), user.last_bonus, user.offset, cost);
        Ok(sigmoid(x).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    /// Applies one bonus decision, draws the login outcome and advances the user.
    pub fn step<R: Rng>(&self, user: &mut SimUser, action: usize, rng: &mut R) -> Result<StepOutcome, EnvError> {
        if user.done {
            return Err(EnvError::UserDone(user.id));
        }
        let p = self.retention_prob(user, action)?;
        let reward = u8::from(rng.random::<f64>() < p);
        let cost = self.actions().cost(action);
        let claimed = user.bonuses_collected + 1;
        let done = reward == 0
            || user.t as usize >= self.config.horizon
            || claimed >= BONUSES_PER_CYCLE
            || user.day_in_cycle >= DAYS_PER_CYCLE;
        user.done = done;
        if done {
            return Ok(StepOutcome { reward, next_state: None, done });
        }
        user.t += 1;
        user.day_in_cycle += 1;
        user.bonuses_collected = claimed;
        user.last_bonus = cost;
        user.total_bonus = user.total_bonus + cost;
        Ok(StepOutcome { reward, next_state: Some(self.observe(user)), done })
    }

    /// Tabular key of a simulated user.
    pub fn tabular_state(&self, user: &SimUser) -> TabularState {
        TabularState {
            segment: user.segment,
            bonuses_collected: user.bonuses_collected,
            last_bonus: self.tracks_last_bonus(user.segment).then_some(user.last_bonus),
        }
    }

    /// Tabular key recovered from an observed state. Exact when `feature_noise` is zero.
    pub fn tabular_state_of(&self, state: &StateVector) -> TabularState {
        let segment = self.segment_proxy(state);
        let last = Cents::from_units(state.features[self.n_segments() + 1]);
        TabularState {
            segment,
            bonuses_collected: state.bonuses_collected,
            last_bonus: self.tracks_last_bonus(segment).then_some(last),
        }
    }

    fn tracks_last_bonus(&self, segment: usize) -> bool {
        self.config.segments[segment].carryover != 0.0
    }

    /// Retention probability in a tabular state.
    pub fn tabular_prob(&self, state: &TabularState, action: usize) -> Result<f64, EnvError> {
        if !self.config.is_tabular() {
            let seg = self.config.segments.iter().position(|s| s.noise_scale != 0.0).unwrap();
            return Err(EnvError::NotTabular(seg));
        }
        self.check_eligible(state.bonuses_collected, action)?;
        let cost = self.actions().cost(action);
        let last = state.last_bonus.unwrap_or(Cents::ZERO);
        Ok(sigmoid(self.logit(state.segment, state.bonuses_collected, last, 0.0, cost)).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
    }

    /// Next tabular state after a successful login, or `None` when the
    /// trajectory ends there regardless of the outcome.
    pub fn tabular_next(&self, state: &TabularState, action: usize) -> Option<TabularState> {
        let claimed = state.bonuses_collected + 1;
        let t = claimed as usize;
        if t >= self.config.horizon || claimed >= BONUSES_PER_CYCLE || claimed >= DAYS_PER_CYCLE {
            return None;
        }
        Some(TabularState {
            segment: state.segment,
            bonuses_collected: claimed,
            last_bonus: self.tracks_last_bonus(state.segment).then(|| self.actions().cost(action)),
        })
    }

    pub fn initial_tabular_states(&self) -> Vec<TabularState> {
        (0..self.n_segments())
            .map(|segment| TabularState {
                segment,
                bonuses_collected: 0,
                last_bonus: self.tracks_last_bonus(segment).then_some(Cents::ZERO),
            })
            .collect()
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

/// Logging policy: a table of actions per (segment proxy, day in cycle),
/// perturbed uniformly over the eligible actions with probability `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicyConfig {
    /// `table[segment][day_in_cycle - 1]`, one entry per claim in the cycle.
    pub table: Vec<Vec<usize>>,
    pub noise: f64,
}

impl BehaviorPolicyConfig {
    /// A table that offers larger normal bonuses to higher-indexed segments
    /// and the cheapest super bonus on the fourth claim.
    pub fn standard(n_segments: usize, actions: &ActionSet, noise: f64) -> Self {
        let normal = actions.normal_range().len();
        let table = (0..n_segments)
            .map(|s| {
                let mid = (normal / 2 + 2 * s).saturating_sub(2).min(normal - 1);
                let mut row = vec![mid; (BONUSES_PER_CYCLE - 1) as usize];
                row.push(actions.super_range().start);
                row
            })
            .collect();
        BehaviorPolicyConfig { table, noise }
    }

    pub fn validate(&self, n_segments: usize, actions: &ActionSet) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidBehavior(m));
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if self.table.len() != n_segments {
            return bad(format!("table has {} rows for {n_segments} segments", self.table.len()));
        }
        for (s, row) in self.table.iter().enumerate() {
            if row.len() != BONUSES_PER_CYCLE as usize {
                return bad(format!("row {s} needs {BONUSES_PER_CYCLE} entries"));
            }
            for (day, &a) in row.iter().enumerate() {
                if !actions.day_mask(day as u8).contains(&a) {
                    return bad(format!("row {s} day {}: action {a} violates the day mask", day + 1));
                }
            }
        }
        Ok(())
    }

    pub fn table_action(&self, env: &Env, state: &StateVector) -> usize {
        self.table[env.segment_proxy(state)][state.bonuses_collected as usize]
    }

    pub fn sample<R: Rng>(&self, env: &Env, state: &StateVector, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        if u < self.noise {
            let mask = env.actions().day_mask(state.bonuses_collected);
            rng.random_range(mask)
        } else {
            self.table_action(env, state)
        }
    }
}

/// Simulates one user under the behavior policy until the trajectory ends.
pub fn simulate_user(env: &Env, behavior: &BehaviorPolicyConfig, user_id: u64, seed: u64) -> Trajectory {
    let mut rng = user_rng(seed, user_id);
    let mut user = env.spawn_user(user_id, &mut rng);
    let mut transitions = Vec::new();
    while !user.done {
        let state = env.observe(&user);
        let action = behavior.sample(env, &state, &mut rng);
        let t = user.t;
        let out = env.step(&mut user, action, &mut rng).expect("behavior actions respect the day mask");
        transitions.push(Transition {
            user_id,
            t,
            state,
            action_index: action,
            reward: out.reward,
            cost: env.actions().cost(action),
            next_state: out.next_state,
            done: out.done,
        });
    }
    Trajectory { transitions }
}

/// Logs one trajectory per user under the behavior policy. Each user draws
/// from its own stream of the master seed, so the result does not depend on
/// simulation order.
pub fn generate_dataset(
    env: &Env,
    behavior: &BehaviorPolicyConfig,
    n_users: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, EnvError> {
    behavior.validate(env.n_segments(), env.actions())?;
    Ok((0..n_users as u64).map(|id| simulate_user(env, behavior, id, seed)).collect())
}

/// Latent tabular state. `last_bonus` is tracked only for segments whose
/// retention depends on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TabularState {
    pub segment: usize,
    pub bonuses_collected: u8,
    pub last_bonus: Option<Cents>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSolution {
    /// Optimal action values over the day mask; `None` outside it.
    pub q: BTreeMap<TabularState, Vec<Option<f64>>>,
    pub value: BTreeMap<TabularState, f64>,
    /// Optimal action, ties toward the cheaper action.
    pub policy: BTreeMap<TabularState, usize>,
}

impl TabularSolution {
    pub fn states(&self) -> impl Iterator<Item = &TabularState> {
        self.q.keys()
    }
}

/// Exact optimal action values by backward induction over the reachable
/// tabular states of a noise-free environment.
pub fn oracle_value_iteration(env: &Env, gamma: f64) -> Result<TabularSolution, EnvError> {
    if let Some(seg) = env.config().segments.iter().position(|s| s.noise_scale != 0.0) {
        return Err(EnvError::NotTabular(seg));
    }
    let mut solution = TabularSolution { q: BTreeMap::new(), value: BTreeMap::new(), policy: BTreeMap::new() };
    for s0 in env.initial_tabular_states() {
        solve_state(env, gamma, s0, &mut solution)?;
    }
    Ok(solution)
}

fn solve_state(env: &Env, gamma: f64, state: TabularState, sol: &mut TabularSolution) -> Result<f64, EnvError> {
    if let Some(&v) = sol.value.get(&state) {
        return Ok(v);
    }
    let m = env.actions().len();
    let mut q = vec![None; m];
    let mut best: Option<(usize, f64)> = None;
    for a in env.actions().day_mask(state.bonuses_collected) {
        let p = env.tabular_prob(&state, a)?;
        let future = match env.tabular_next(&state, a) {
            Some(next) => solve_state(env, gamma, next, sol)?,
            None => 0.0,
        };
        let value = p * (1.0 + gamma * future);
        q[a] = Some(value);
        if best.is_none_or(|(_, v)| value > v) {
            best = Some((a, value));
        }
    }
    let (action, value) = best.expect("day mask is never empty");
    sol.q.insert(state, q);
    sol.value.insert(state, value);
    sol.policy.insert(state, action);
    Ok(value)
}
