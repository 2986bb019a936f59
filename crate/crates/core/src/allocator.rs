//! Budget-constrained action assignment.
//!
//! Customer `i` receives exactly one action `j` with value `q_ij` and cost
//! `c_j`, and the mean cost per customer may not exceed the budget `c̄`.
//! Pricing the budget with a multiplier `λ ≥ 0` gives the one-dimensional
//! convex dual
//!
//! ```text
//! D(λ) = Σ_i max_j (q_ij − λ c_j) + λ N c̄
//! ```
//!
//! which [`solve_lambda`] minimizes by bisection on its subgradient and then
//! snaps to the exact breakpoint. [`assign`] applies the per-customer rule
//! `argmax_j {q_ij − λ(c_j − c̄) : q_ij − λ(c_j − c̄) ≥ 0}`, and
//! [`repair_feasibility`] raises `λ` until the hard budget holds.
//!
//! Ties always go to the cheaper action, which makes the chosen cost
//! non-increasing in `λ`.
//!
//! [`WindowStore`] keeps the last 24 hours of rows and periodically re-solves
//! `λ` for online decisions.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Cents;

/// Relative tolerance under which two scores count as tied.
const TIE_EPS: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("multiplier must be non-negative and finite, got {0}")]
    NegativeLambda(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("row {row} has {found} entries, expected {expected}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("row {0} has no eligible action")]
    EmptyRow(usize),
    #[error("row {row}: value for action {action} is not finite")]
    NonFiniteValue { row: usize, action: usize },
    #[error("infeasible: cheapest eligible actions cost {cheapest} in total, budget allows {allowed}")]
    Infeasible { cheapest: Cents, allowed: Cents },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    q: Vec<Vec<Option<f64>>>,
    costs: Vec<Cents>,
    budget: Cents,
}

impl AllocationProblem {
    pub fn new(q: Vec<Vec<Option<f64>>>, costs: Vec<Cents>, budget: Cents) -> Result<Self, AllocError> {
        let m = costs.len();
        for (row, r) in q.iter().enumerate() {
            if r.len() != m {
                return Err(AllocError::RowLength { row, expected: m, found: r.len() });
            }
            if r.iter().all(Option::is_none) {
                return Err(AllocError::EmptyRow(row));
            }
            if let Some(action) = r.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
                return Err(AllocError::NonFiniteValue { row, action });
            }
        }
        Ok(AllocationProblem { q, costs, budget })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.costs.len()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.q
    }

    pub fn costs(&self) -> &[Cents] {
        &self.costs
    }

    pub fn budget(&self) -> Cents {
        self.budget
    }

    /// Total spend the budget allows: `N · c̄`.
    pub fn allowed_total(&self) -> Cents {
        Cents(self.budget.0 * self.n() as i64)
    }

    fn cheapest(&self, row: &[Option<f64>]) -> usize {
        cheapest_present(row, &self.costs)
    }

    fn cheapest_total(&self) -> Cents {
        self.q.iter().map(|r| self.costs[self.cheapest(r)]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub chosen: Vec<usize>,
    pub lambda: f64,
    pub objective: f64,
    pub total_cost: Cents,
}

impl Assignment {
    fn from_choices(problem: &AllocationProblem, chosen: Vec<usize>, lambda: f64) -> Self {
        let objective = chosen.iter().zip(&problem.q).map(|(&j, r)| r[j].expect("chosen entry present")).sum();
        let total_cost = chosen.iter().map(|&j| problem.costs[j]).sum();
        Assignment { chosen, lambda, objective, total_cost }
    }

    pub fn mean_cost(&self) -> f64 {
        if self.chosen.is_empty() {
            0.0
        } else {
            self.total_cost.units() / self.chosen.len() as f64
        }
    }
}

fn check_lambda(lambda: f64) -> Result<(), AllocError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(AllocError::NegativeLambda(lambda));
    }
    Ok(())
}

fn beats(candidate: f64, incumbent: f64) -> bool {
    candidate > incumbent + TIE_EPS * (1.0 + incumbent.abs())
}

fn cheapest_present(row: &[Option<f64>], costs: &[Cents]) -> usize {
    let mut best: Option<usize> = None;
    for (j, v) in row.iter().enumerate() {
        if v.is_some() && best.is_none_or(|b| costs[j] < costs[b]) {
            best = Some(j);
        }
    }
    best.expect("row has a present entry")
}

/// Best present entry of `q_j − λ(c_j − c̄)`, ties toward the cheaper action.
fn scored_argmax(row: &[Option<f64>], costs: &[Cents], budget: Cents, lambda: f64) -> (usize, f64) {
    scored_argmax_by(row, costs, budget, lambda, |a, b| a < b)
}

fn scored_argmax_by(
    row: &[Option<f64>],
    costs: &[Cents],
    budget: Cents,
    lambda: f64,
    tie_prefers: impl Fn(Cents, Cents) -> bool,
) -> (usize, f64) {
    let cbar = budget.units();
    let mut best: Option<(usize, f64)> = None;
    for (j, v) in row.iter().enumerate() {
        let Some(q) = *v else { continue };
        let s = q - lambda * (costs[j].units() - cbar);
        best = match best {
            None => Some((j, s)),
            Some((b, bs)) => {
                if beats(s, bs) || (!beats(bs, s) && tie_prefers(costs[j], costs[b])) {
                    Some((j, s))
                } else {
                    Some((b, bs))
                }
            }
        };
    }
    best.expect("row has a present entry")
}

/// The per-customer assignment rule for one row at a given `λ`: the best
/// non-negative score, or the cheapest present action when every score is
/// negative.
pub fn choose_action(row: &[Option<f64>], costs: &[Cents], budget: Cents, lambda: f64) -> usize {
    let (j, s) = scored_argmax(row, costs, budget, lambda);
    if s >= -TIE_EPS * (1.0 + s.abs()) {
        j
    } else {
        cheapest_present(row, costs)
    }
}

/// `D(λ) = Σ_i max_j (q_ij − λ c_j) + λ N c̄`.
pub fn dual_objective(problem: &AllocationProblem, lambda: f64) -> Result<f64, AllocError> {
    check_lambda(lambda)?;
    let cbar = problem.budget.units();
    let mut total = lambda * problem.n() as f64 * cbar;
    for row in &problem.q {
        let best = row
            .iter()
            .zip(&problem.costs)
            .filter_map(|(v, c)| v.map(|q| q - lambda * c.units()))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    Ok(total)
}

/// Total cost of the dual maximizers at `λ` (ties toward cheaper). The dual
/// subgradient is `N c̄ − relaxed_cost(λ)`.
pub fn relaxed_cost(problem: &AllocationProblem, lambda: f64) -> Cents {
    problem.q.iter().map(|r| problem.costs[scored_argmax(r, &problem.costs, problem.budget, lambda).0]).sum()
}

/// Upper end of the search bracket: beyond it every row prefers its cheapest action.
fn lambda_bracket(problem: &AllocationProblem) -> f64 {
    let mut distinct: Vec<i64> = problem.costs.iter().map(|c| c.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let min_gap = distinct.windows(2).map(|w| (w[1] - w[0]) as f64 / 100.0).fold(f64::INFINITY, f64::min);
    let max_range = problem
        .q
        .iter()
        .map(|r| {
            let (lo, hi) = r.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max);
    if !min_gap.is_finite() {
        return 1.0;
    }
    (max_range / min_gap) * (1.0 + 1e-9) + 1e-12
}

/// Shrinks `[lo, hi]` where `feasible(lo)` fails and `feasible(hi)` holds,
/// then returns the smallest switch point in `(lo, hi]` that is feasible.
fn bisect_and_snap(
    problem: &AllocationProblem,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    choice: impl Fn(&[Option<f64>], f64) -> usize,
    switch_points: impl Fn(&[Option<f64>], usize, usize) -> Vec<f64>,
) -> f64 {
    let cost_at = |lambda: f64| -> Cents { problem.q.iter().map(|r| problem.costs[choice(r, lambda)]).sum() };
    let allowed = problem.allowed_total();
    let mut iters = 0;
    while hi - lo > tol && iters < MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if cost_at(mid) <= allowed {
            hi = mid;
        } else {
            lo = mid;
        }
        iters += 1;
    }
    let mut candidates: Vec<f64> = Vec::new();
    for r in &problem.q {
        let (a, b) = (choice(r, lo), choice(r, hi));
        if a != b {
            candidates.extend(switch_points(r, a, b).into_iter().filter(|&x| x > lo && x <= hi));
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.into_iter().find(|&x| cost_at(x) <= allowed).unwrap_or(hi)
}

/// Minimizer of the dual over `λ ≥ 0`. Returns 0 when the unconstrained
/// greedy choice already fits the budget. When even the cheapest actions
/// exceed the budget, returns the bracket end (every row at its cheapest).
pub fn solve_lambda(problem: &AllocationProblem, tol: f64) -> Result<f64, AllocError> {
    if !(tol > 0.0) {
        return Err(AllocError::InvalidTolerance(tol));
    }
    let allowed = problem.allowed_total();
    if relaxed_cost(problem, 0.0) <= allowed {
        return Ok(0.0);
    }
    let hi = lambda_bracket(problem);
    if relaxed_cost(problem, hi) > allowed {
        return Ok(hi);
    }
    let costs = &problem.costs;
    let budget = problem.budget;
    Ok(bisect_and_snap(
        problem,
        0.0,
        hi,
        tol,
        |r, l| scored_argmax(r, costs, budget, l).0,
        |r, a, b| {
            let (ca, cb) = (costs[a].units(), costs[b].units());
            if ca == cb {
                return vec![];
            }
            vec![(r[a].unwrap() - r[b].unwrap()) / (ca - cb)]
        },
    ))
}

/// Applies the assignment rule to every row at a fixed `λ`.
pub fn assign(problem: &AllocationProblem, lambda: f64) -> Result<Assignment, AllocError> {
    check_lambda(lambda)?;
    let chosen = problem.q.iter().map(|r| choose_action(r, &problem.costs, problem.budget, lambda)).collect();
    Ok(Assignment::from_choices(problem, chosen, lambda))
}

/// Raises `λ` to the first breakpoint at which the assignment meets the
/// budget. Feasible assignments are returned unchanged.
pub fn repair_feasibility(problem: &AllocationProblem, assignment: Assignment) -> Result<Assignment, AllocError> {
    let allowed = problem.allowed_total();
    if assignment.total_cost <= allowed {
        return Ok(assignment);
    }
    let cheapest = problem.cheapest_total();
    if problem.budget.0 < 0 || cheapest > allowed {
        return Err(AllocError::Infeasible { cheapest, allowed });
    }
    check_lambda(assignment.lambda)?;
    let lo = assignment.lambda;
    let mut hi = lo.max(lambda_bracket(problem));
    let mut attempt = assign(problem, hi)?;
    let mut doublings = 0;
    while attempt.total_cost > allowed && doublings < 64 {
        hi *= 2.0;
        attempt = assign(problem, hi)?;
        doublings += 1;
    }
    if attempt.total_cost > allowed {
        // Negative values can keep a pricier action selected at any λ.
        let chosen = problem.q.iter().map(|r| problem.cheapest(r)).collect();
        return Ok(Assignment::from_choices(problem, chosen, hi));
    }
    let costs = &problem.costs;
    let budget = problem.budget;
    let cbar = budget.units();
    let lambda = bisect_and_snap(
        problem,
        lo,
        hi,
        1e-12 * (1.0 + hi),
        |r, l| choose_action(r, costs, budget, l),
        |r, a, b| {
            let (ca, cb) = (costs[a].units(), costs[b].units());
            let mut pts = Vec::new();
            if ca != cb {
                pts.push((r[a].unwrap() - r[b].unwrap()) / (ca - cb));
            }
            if ca > cbar {
                pts.push(r[a].unwrap() / (ca - cbar));
            }
            pts
        },
    );
    Ok(fill_ties(problem, assign(problem, lambda)?))
}

/// Spends leftover budget on rows that are tied at the assignment's `λ`,
/// moving each to its pricier tied action while the total still fits.
pub fn fill_ties(problem: &AllocationProblem, assignment: Assignment) -> Assignment {
    let allowed = problem.allowed_total();
    let (costs, budget, lambda) = (&problem.costs, problem.budget, assignment.lambda);
    let mut upgrades: Vec<(Cents, usize, usize)> = Vec::new();
    for (i, (row, &j)) in problem.q.iter().zip(&assignment.chosen).enumerate() {
        let (up, s) = scored_argmax_by(row, costs, budget, lambda, |a, b| a > b);
        if up != j && costs[up] > costs[j] && s >= -TIE_EPS * (1.0 + s.abs()) && row[up] > row[j] {
            upgrades.push((costs[up] - costs[j], i, up));
        }
    }
    if upgrades.is_empty() {
        return assignment;
    }
    upgrades.sort();
    let mut total = assignment.total_cost;
    let mut chosen = assignment.chosen;
    for (extra, i, up) in upgrades {
        if total + extra <= allowed {
            total = total + extra;
            chosen[i] = up;
        }
    }
    Assignment::from_choices(problem, chosen, lambda)
}

/// Solve, assign, repair and fill ties in one call.
pub fn allocate(problem: &AllocationProblem, tol: f64) -> Result<Assignment, AllocError> {
    let lambda = solve_lambda(problem, tol)?;
    Ok(fill_ties(problem, repair_feasibility(problem, assign(problem, lambda)?)?))
}

// ── Sliding window ─────────────────────────────────────────────────────────

/// Read side of the published multiplier. Cloning shares the same snapshot;
/// loads never block on a refresh.
#[derive(Debug, Clone, Default)]
pub struct LambdaHandle(Arc<AtomicU64>);

impl LambdaHandle {
    pub fn load(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::Acquire))
    }

    fn publish(&self, lambda: f64) {
        self.0.store(lambda.to_bits(), Ordering::Release);
    }
}

fn default_span() -> u64 {
    24 * 3600
}
fn default_period() -> u64 {
    600
}
fn default_tol() -> f64 {
    1e-9
}

/// Window timing in logical seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    #[serde(default = "default_span")]
    pub span: u64,
    #[serde(default = "default_period")]
    pub refresh_period: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { span: default_span(), refresh_period: default_period(), tol: default_tol() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub ts: u64,
    pub q: Vec<Option<f64>>,
    pub action: usize,
    pub cost: Cents,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSnapshot {
    pub at: u64,
    pub lambda: f64,
    pub window_len: usize,
}

/// Time-ordered records of recent decisions plus the published multiplier.
#[derive(Debug)]
pub struct WindowStore {
    config: WindowConfig,
    costs: Vec<Cents>,
    budget: Cents,
    records: VecDeque<WindowRecord>,
    handle: LambdaHandle,
    last_refresh: Option<u64>,
    pinned: bool,
}

impl WindowStore {
    /// Starts cold at `λ = 0`.
    pub fn new(costs: Vec<Cents>, budget: Cents, config: WindowConfig) -> Self {
        WindowStore {
            config,
            costs,
            budget,
            records: VecDeque::new(),
            handle: LambdaHandle::default(),
            last_refresh: None,
            pinned: false,
        }
    }

    /// A store whose multiplier never moves from `lambda`.
    pub fn pinned(costs: Vec<Cents>, budget: Cents, lambda: f64) -> Self {
        let store = WindowStore { pinned: true, ..Self::new(costs, budget, WindowConfig::default()) };
        store.handle.publish(lambda);
        store
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn budget(&self) -> Cents {
        self.budget
    }

    pub fn costs(&self) -> &[Cents] {
        &self.costs
    }

    pub fn lambda(&self) -> f64 {
        self.handle.load()
    }

    pub fn handle(&self) -> LambdaHandle {
        self.handle.clone()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &WindowRecord> {
        self.records.iter()
    }

    pub fn push(&mut self, record: WindowRecord) {
        debug_assert!(self.records.back().is_none_or(|r| r.ts <= record.ts), "records arrive in time order");
        self.records.push_back(record);
    }

    /// Drops records at least one span old.
    pub fn evict(&mut self, now: u64) {
        while self.records.front().is_some_and(|r| now.saturating_sub(r.ts) >= self.config.span) {
            self.records.pop_front();
        }
    }

    /// Evicts expired records, re-solves `λ` on the survivors and publishes it.
    /// An empty window keeps the previous multiplier.
    pub fn refresh(&mut self, now: u64) -> LambdaSnapshot {
        if let Some(last) = self.last_refresh {
            debug_assert!(now >= last, "refresh clock moved backwards");
        }
        self.last_refresh = Some(now);
        self.evict(now);
        if !self.pinned && !self.records.is_empty() {
            let rows = self.records.iter().map(|r| r.q.clone()).collect();
            let problem = AllocationProblem::new(rows, self.costs.clone(), self.budget).expect("stored rows are valid");
            let lambda = solve_lambda(&problem, self.config.tol).expect("tolerance is positive");
            self.handle.publish(lambda);
        }
        LambdaSnapshot { at: now, lambda: self.lambda(), window_len: self.records.len() }
    }

    /// Runs every refresh scheduled at or before `now`, on the refresh-period grid.
    pub fn catch_up(&mut self, now: u64) -> Vec<LambdaSnapshot> {
        let period = self.config.refresh_period.max(1);
        let mut next = match self.last_refresh {
            Some(last) => last + period,
            None => 0,
        };
        let mut out = Vec::new();
        while next <= now {
            out.push(self.refresh(next));
            next += period;
        }
        out
    }

    /// Decides one customer with the current multiplier and logs the decision.
    pub fn allocate_online(&mut self, ts: u64, q_row: &[Option<f64>], day_mask: Range<usize>) -> usize {
        let row: Vec<Option<f64>> = q_row.iter().enumerate().map(|(j, v)| if day_mask.contains(&j) { *v } else { None }).collect();
        let action = choose_action(&row, &self.costs, self.budget, self.lambda());
        self.push(WindowRecord { ts, q: row, action, cost: self.costs[action] });
        action
    }
}
