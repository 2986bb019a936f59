//! Comparison policies: a fixed expert table and a logistic-regression reward
//! model used either greedily or as input to the budget allocator.

use std::ops::Range;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcq::{layer_sizes, train_classifier, BcqError};
use crate::env::{BehaviorPolicyConfig, Env, EnvError};
use crate::model::{ActionSet, Dataset, HyperParams, StateVector};
use crate::neural::{softmax, Mlp};
use crate::policy::{Policy, QSource};

/// Anything that predicts next-day login probability for a state and action.
pub trait RewardPredictor {
    fn actions(&self) -> &ActionSet;
    fn predict(&self, state: &StateVector, action: usize) -> f64;
}

/// Logistic regression on the state, a one-hot of the action and the
/// action cost times each state feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub net: Mlp,
    pub actions: ActionSet,
    pub d: usize,
}

pub fn reward_input(state: &StateVector, action: usize, actions: &ActionSet) -> Vec<f64> {
    let mut x = state.input();
    let m = actions.len();
    x.extend((0..m).map(|a| if a == action { 1.0 } else { 0.0 }));
    let cost = actions.cost(action).units();
    x.extend(state.features.iter().map(|f| f * cost));
    x
}

fn reward_input_len(d: usize, m: usize) -> usize {
    StateVector::input_len(d) + m + d
}

impl RewardModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

impl RewardPredictor for RewardModel {
    fn actions(&self) -> &ActionSet {
        &self.actions
    }

    fn predict(&self, state: &StateVector, action: usize) -> f64 {
        let logits = self.net.forward(&reward_input(state, action, &self.actions)).expect("state matches model input");
        softmax(&logits)[1]
    }
}

/// Fits `P(login | s, a)` by cross-entropy over every logged step.
pub fn train_reward_model(ds: &Dataset, hyper: &HyperParams) -> Result<RewardModel, BcqError> {
    hyper.validate()?;
    if ds.n_transitions() == 0 {
        return Err(BcqError::EmptyDataset);
    }
    let m = ds.actions.len();
    if let Some(tr) = ds.transitions().find(|tr| tr.action_index >= m) {
        return Err(BcqError::ActionOutOfRange { action: tr.action_index, m });
    }
    let data: Vec<(Vec<f64>, usize)> = ds
        .transitions()
        .map(|tr| (reward_input(&tr.state, tr.action_index, &ds.actions), tr.reward as usize))
        .collect();
    let sizes = layer_sizes(reward_input_len(ds.d, m), &[], 2);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(3);
    let net = train_classifier(&data, &sizes, hyper, &mut rng)?;
    Ok(RewardModel { net, actions: ds.actions.clone(), d: ds.d })
}

/// Highest predicted retention within `mask`, ties toward the cheaper action.
pub fn greedy_policy<P: RewardPredictor + ?Sized>(model: &P, state: &StateVector, mask: Range<usize>) -> usize {
    let mut best = mask.start;
    let mut best_p = f64::NEG_INFINITY;
    for a in mask {
        let p = model.predict(state, a);
        if p > best_p {
            best = a;
            best_p = p;
        }
    }
    best
}

/// Row `i` holds predictions over the eligible actions of state `i`.
pub fn reward_model_q_matrix<P: RewardPredictor + ?Sized>(
    model: &P,
    states: &[StateVector],
    masks: &[Range<usize>],
) -> Vec<Vec<Option<f64>>> {
    let m = model.actions().len();
    states
        .iter()
        .zip(masks)
        .map(|(s, mask)| (0..m).map(|a| mask.contains(&a).then(|| model.predict(s, a))).collect())
        .collect()
}

/// Greedy over predicted retention, using each state's day mask.
pub struct LrGreedy<'a, P: RewardPredictor + ?Sized>(pub &'a P);

impl<P: RewardPredictor + ?Sized> Policy for LrGreedy<'_, P> {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        greedy_policy(self.0, state, self.0.actions().day_mask(state.bonuses_collected))
    }
}

impl QSource for RewardModel {
    fn q_row(&self, state: &StateVector) -> Vec<Option<f64>> {
        PredictedRetention(self).q_row(state)
    }
}

/// Predicted retention over the day mask, as allocator input.
pub struct PredictedRetention<'a, P: RewardPredictor + ?Sized>(pub &'a P);

impl<P: RewardPredictor + ?Sized> QSource for PredictedRetention<'_, P> {
    fn q_row(&self, state: &StateVector) -> Vec<Option<f64>> {
        let mask = self.0.actions().day_mask(state.bonuses_collected);
        reward_model_q_matrix(self.0, std::slice::from_ref(state), &[mask]).pop().unwrap()
    }
}

/// True immediate retention of a noise-free environment, read through the
/// observed state. Greedy over it is the best any myopic reward model can do.
pub struct TabularRetention<'a> {
    pub env: &'a Env,
}

impl RewardPredictor for TabularRetention<'_> {
    fn actions(&self) -> &ActionSet {
        self.env.actions()
    }

    fn predict(&self, state: &StateVector, action: usize) -> f64 {
        let key = self.env.tabular_state_of(state);
        self.env.tabular_prob(&key, action).expect("tabular environment and eligible action")
    }
}

/// Fixed table of actions per (segment proxy, day in cycle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertPolicy {
    pub table: Vec<Vec<usize>>,
    pub actions: ActionSet,
}

impl ExpertPolicy {
    pub fn new(table: Vec<Vec<usize>>, actions: ActionSet) -> Result<Self, EnvError> {
        let check = BehaviorPolicyConfig { table: table.clone(), noise: 0.0 };
        check.validate(table.len(), &actions)?;
        Ok(ExpertPolicy { table, actions })
    }

    /// The logging table without its noise.
    pub fn from_behavior(behavior: &BehaviorPolicyConfig, actions: &ActionSet) -> Result<Self, EnvError> {
        Self::new(behavior.table.clone(), actions.clone())
    }

    fn segment_proxy(&self, state: &StateVector) -> usize {
        let block = &state.features[..self.table.len()];
        let mut best = 0;
        for (k, &v) in block.iter().enumerate() {
            if v > block[best] {
                best = k;
            }
        }
        best
    }
}

impl Policy for ExpertPolicy {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        self.table[self.segment_proxy(state)][state.bonuses_collected as usize]
    }
}
