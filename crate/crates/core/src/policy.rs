//! Policy interfaces shared by the evaluators and the simulator.

use rand::{Rng, RngCore};

use crate::allocator::choose_action;
use crate::model::{ActionSet, StateVector};
use crate::money::Cents;

/// Maps a state to one action inside its day mask.
pub trait Policy {
    fn act(&self, state: &StateVector, rng: &mut dyn RngCore) -> usize;
}

/// Per-action scores for a state, `None` outside the day mask. These are the
/// rows the budget allocator consumes.
pub trait QSource {
    fn q_row(&self, state: &StateVector) -> Vec<Option<f64>>;
}

/// Uniform over the day mask.
#[derive(Debug, Clone)]
pub struct UniformRandom {
    pub actions: ActionSet,
}

impl Policy for UniformRandom {
    fn act(&self, state: &StateVector, rng: &mut dyn RngCore) -> usize {
        rng.random_range(self.actions.day_mask(state.bonuses_collected))
    }
}

/// Always the cheapest eligible bonus.
#[derive(Debug, Clone)]
pub struct Cheapest {
    pub actions: ActionSet,
}

impl Policy for Cheapest {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        self.actions.day_mask(state.bonuses_collected).start
    }
}

/// Argmax of a score row with ties toward the cheaper (lower-index) action.
pub fn greedy_from_row(row: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, v) in row.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((a, v));
            }
        }
    }
    best.map(|(a, _)| a)
}

/// Unconstrained greedy over a score source.
pub struct Greedy<'a, Q: QSource + ?Sized> {
    pub source: &'a Q,
}

impl<Q: QSource + ?Sized> Policy for Greedy<'_, Q> {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        greedy_from_row(&self.source.q_row(state)).expect("q rows have at least one entry")
    }
}

/// The per-customer assignment rule with a fixed multiplier.
pub struct FixedLambda<'a, Q: QSource + ?Sized> {
    pub source: &'a Q,
    pub costs: Vec<Cents>,
    pub budget: Cents,
    pub lambda: f64,
}

impl<Q: QSource + ?Sized> Policy for FixedLambda<'_, Q> {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        let row = self.source.q_row(state);
        choose_action(&row, &self.costs, self.budget, self.lambda)
    }
}
