//! Policy evaluation: matched-record scoring on logged data and online
//! simulation in virtual time.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{solve_lambda, AllocError, AllocationProblem, LambdaSnapshot, WindowStore};
use crate::env::{user_rng, Env, EnvConfig, EnvError, SimUser};
use crate::model::Trajectory;
use crate::money::Cents;
use crate::policy::{Policy, QSource};

pub const SECONDS_PER_DAY: u64 = 24 * 3600;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no matched steps: the metric is undefined")]
    EmptyMatchedSet,
    #[error("policy chose action {action} outside the day mask at {bonuses_collected} collected bonuses")]
    IneligibleDecision { action: usize, bonuses_collected: u8 },
    #[error("shifted environment must keep {segments} segments and d = {d}")]
    IncompatibleShift { segments: usize, d: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Keep each trajectory up to its first disagreement.
    #[default]
    Prefix,
    /// Keep only trajectories the policy reproduces entirely.
    FullTrajectory,
}

/// Logged trajectories (or prefixes) on which the policy agrees with the log.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub trajectories: Vec<Trajectory>,
    pub total_trajectories: usize,
    pub total_steps: usize,
}

impl MatchedSet {
    pub fn matched_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn matched_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn match_rate(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.matched_steps() as f64 / self.total_steps as f64
        }
    }
}

pub fn match_records(dataset: &[Trajectory], policy: &dyn Policy, mode: MatchMode) -> MatchedSet {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut kept = Vec::new();
    let mut total_steps = 0;
    for traj in dataset {
        total_steps += traj.len();
        let agree = traj
            .transitions
            .iter()
            .take_while(|tr| policy.act(&tr.state, &mut rng) == tr.action_index)
            .count();
        let keep = match mode {
            MatchMode::Prefix => agree,
            MatchMode::FullTrajectory if agree == traj.len() => agree,
            MatchMode::FullTrajectory => 0,
        };
        if keep > 0 {
            kept.push(Trajectory { transitions: traj.transitions[..keep].to_vec() });
        }
    }
    MatchedSet { trajectories: kept, total_trajectories: dataset.len(), total_steps }
}

/// Logins per matched step.
pub fn retention_rate(matched: &MatchedSet) -> Result<f64, EvalError> {
    let steps = matched.matched_steps();
    if steps == 0 {
        return Err(EvalError::EmptyMatchedSet);
    }
    let logins: usize = matched.trajectories.iter().flat_map(|t| &t.transitions).map(|tr| tr.reward as usize).sum();
    Ok(logins as f64 / steps as f64)
}

/// Bonus spend per matched step, in currency units.
pub fn avg_cost(matched: &MatchedSet) -> Result<f64, EvalError> {
    let steps = matched.matched_steps();
    if steps == 0 {
        return Err(EvalError::EmptyMatchedSet);
    }
    let spend: Cents = matched.trajectories.iter().flat_map(|t| &t.transitions).map(|tr| tr.cost).sum();
    Ok(spend.units() / steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub day: u32,
    pub decisions: usize,
    pub retained: usize,
    pub retention: f64,
    pub avg_cost: f64,
    /// Multiplier in force at the end of the day.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retention_rate: f64,
    pub avg_cost: f64,
    pub matched_trajectories: usize,
    pub matched_steps: usize,
    pub total_trajectories: usize,
    pub total_steps: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub days: Vec<DayStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_timeline: Vec<LambdaSnapshot>,
}

impl EvalReport {
    pub fn from_matched(matched: &MatchedSet) -> Result<Self, EvalError> {
        Ok(EvalReport {
            retention_rate: retention_rate(matched)?,
            avg_cost: avg_cost(matched)?,
            matched_trajectories: matched.matched_trajectories(),
            matched_steps: matched.matched_steps(),
            total_trajectories: matched.total_trajectories,
            total_steps: matched.total_steps,
            days: Vec::new(),
            lambda_timeline: Vec::new(),
        })
    }

    pub fn days_csv(&self) -> String {
        let mut out = String::from("day,decisions,retention,avg_cost,lambda\n");
        for d in &self.days {
            out.push_str(&format!("{},{},{},{},{}\n", d.day, d.decisions, d.retention, d.avg_cost, d.lambda));
        }
        out
    }

    pub fn lambda_csv(&self) -> String {
        let mut out = String::from("ts,lambda,window_len\n");
        for s in &self.lambda_timeline {
            out.push_str(&format!("{},{},{}\n", s.at, s.lambda, s.window_len));
        }
        out
    }
}

/// Matched-record evaluation of a policy on logged data.
pub fn evaluate_offline(dataset: &[Trajectory], policy: &dyn Policy, mode: MatchMode) -> Result<EvalReport, EvalError> {
    EvalReport::from_matched(&match_records(dataset, policy, mode))
}

/// Batch multiplier over a set of states, for scoring budgeted policies offline.
pub fn batch_lambda<'a>(
    source: &dyn QSource,
    states: impl Iterator<Item = &'a crate::model::StateVector>,
    costs: &[Cents],
    budget: Cents,
    tol: f64,
) -> Result<f64, EvalError> {
    let rows: Vec<_> = states.map(|s| source.q_row(s)).collect();
    let problem = AllocationProblem::new(rows, costs.to_vec(), budget)?;
    Ok(solve_lambda(&problem, tol)?)
}

/// How the simulator obtains decisions.
pub enum OnlinePolicy<'a> {
    Direct(&'a dyn Policy),
    /// Scores from `source`, actions from the store's multiplier; every
    /// decision is logged to the store.
    Budgeted { source: &'a dyn QSource, store: &'a mut WindowStore },
}

/// Replaces the environment (retention parameters and arrival mix) from the
/// start of a measured day onward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvShift {
    pub day: u32,
    pub env: EnvConfig,
}

fn default_days() -> u32 {
    7
}
fn default_arrivals() -> usize {
    2_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_days")]
    pub n_days: u32,
    #[serde(default = "default_arrivals")]
    pub arrivals_per_day: usize,
    /// Days simulated before measurement so the mix of cycle positions is stationary.
    #[serde(default)]
    pub warmup_days: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shift: Option<EnvShift>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n_days: default_days(), arrivals_per_day: default_arrivals(), warmup_days: 0, seed: 0, shift: None }
    }
}

struct Active {
    user: SimUser,
    rng: ChaCha8Rng,
}

#[derive(Default, Clone)]
struct DayAcc {
    decisions: usize,
    retained: usize,
    spend: Cents,
}

/// Runs users through the environment on a virtual clock. New users arrive
/// uniformly within each day; a retained user logs in again at a uniform time
/// the next day. Budgeted policies refresh the multiplier on the store's
/// refresh grid before every decision.
pub fn simulate_online(env: &Env, mut policy: OnlinePolicy<'_>, cfg: &SimConfig) -> Result<EvalReport, EvalError> {
    let shifted = match &cfg.shift {
        Some(shift) => {
            if shift.env.segments.len() != env.n_segments() || shift.env.d != env.config().d {
                return Err(EvalError::IncompatibleShift { segments: env.n_segments(), d: env.config().d });
            }
            Some((cfg.warmup_days + shift.day, Env::new(shift.env.clone())?))
        }
        None => None,
    };
    let env_on = |day: u32| -> &Env {
        match &shifted {
            Some((from, e)) if day >= *from => e,
            _ => env,
        }
    };

    let total_days = cfg.warmup_days + cfg.n_days;
    let measure_from = cfg.warmup_days as u64 * SECONDS_PER_DAY;
    let mut arrivals = ChaCha8Rng::seed_from_u64(cfg.seed);
    arrivals.set_stream(u64::MAX);

    let mut users: Vec<Option<Active>> = Vec::new();
    let mut queue: BinaryHeap<Reverse<(u64, u64, usize)>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut days = vec![DayAcc::default(); cfg.n_days as usize];
    let mut day_lambda = vec![0.0; cfg.n_days as usize];
    let mut timeline = Vec::new();
    let mut users_measured = 0usize;

    let mut next_arrival_day = 0u32;
    let mut schedule_day = |day: u32, users: &mut Vec<Option<Active>>, queue: &mut BinaryHeap<_>, seq: &mut u64| {
        let e = env_on(day);
        for _ in 0..cfg.arrivals_per_day {
            let id = users.len() as u64;
            let mut rng = user_rng(cfg.seed, id);
            let user = e.spawn_user(id, &mut rng);
            let ts = day as u64 * SECONDS_PER_DAY + arrivals.random_range(0..SECONDS_PER_DAY);
            users.push(Some(Active { user, rng }));
            queue.push(Reverse((ts, *seq, id as usize)));
            *seq += 1;
        }
    };

    loop {
        // Arrivals for a day are drawn once the clock reaches that day.
        let next_ts = queue.peek().map(|Reverse((ts, _, _))| *ts);
        if next_arrival_day < total_days && next_ts.is_none_or(|ts| ts >= next_arrival_day as u64 * SECONDS_PER_DAY) {
            schedule_day(next_arrival_day, &mut users, &mut queue, &mut seq);
            next_arrival_day += 1;
            continue;
        }
        let Some(Reverse((ts, _, idx))) = queue.pop() else { break };
        let day = (ts / SECONDS_PER_DAY) as u32;
        if day >= total_days {
            break;
        }
        let e = env_on(day);

        if let OnlinePolicy::Budgeted { store, .. } = &mut policy {
            for snap in store.catch_up(ts) {
                if snap.at >= measure_from {
                    timeline.push(snap);
                }
            }
        }

        let active = users[idx].as_mut().expect("scheduled user is active");
        let state = e.observe(&active.user);
        let mask = e.actions().day_mask(state.bonuses_collected);
        let action = match &mut policy {
            OnlinePolicy::Direct(p) => p.act(&state, &mut active.rng),
            OnlinePolicy::Budgeted { source, store } => {
                let row = source.q_row(&state);
                store.allocate_online(ts, &row, mask.clone())
            }
        };
        if !mask.contains(&action) {
            return Err(EvalError::IneligibleDecision { action, bonuses_collected: state.bonuses_collected });
        }
        let first_login = active.user.t == 1;
        let out = e.step(&mut active.user, action, &mut active.rng)?;

        if ts >= measure_from {
            let k = (day - cfg.warmup_days) as usize;
            let acc = &mut days[k];
            acc.decisions += 1;
            acc.retained += out.reward as usize;
            acc.spend = acc.spend + e.actions().cost(action);
            if first_login {
                users_measured += 1;
            }
            if let OnlinePolicy::Budgeted { store, .. } = &policy {
                day_lambda[k] = store.lambda();
            }
        }

        if out.done {
            users[idx] = None;
        } else {
            let next = (day as u64 + 1) * SECONDS_PER_DAY + active.rng.random_range(0..SECONDS_PER_DAY);
            queue.push(Reverse((next, seq, idx)));
            seq += 1;
        }
    }

    let day_stats: Vec<DayStats> = days
        .iter()
        .enumerate()
        .map(|(k, acc)| DayStats {
            day: k as u32 + 1,
            decisions: acc.decisions,
            retained: acc.retained,
            retention: if acc.decisions > 0 { acc.retained as f64 / acc.decisions as f64 } else { 0.0 },
            avg_cost: if acc.decisions > 0 { acc.spend.units() / acc.decisions as f64 } else { 0.0 },
            lambda: day_lambda[k],
        })
        .collect();
    let decisions: usize = days.iter().map(|d| d.decisions).sum();
    let retained: usize = days.iter().map(|d| d.retained).sum();
    let spend: Cents = days.iter().map(|d| d.spend).sum();
    Ok(EvalReport {
        retention_rate: if decisions > 0 { retained as f64 / decisions as f64 } else { 0.0 },
        avg_cost: if decisions > 0 { spend.units() / decisions as f64 } else { 0.0 },
        matched_trajectories: users_measured,
        matched_steps: decisions,
        total_trajectories: users_measured,
        total_steps: decisions,
        days: day_stats,
        lambda_timeline: timeline,
    })
}
