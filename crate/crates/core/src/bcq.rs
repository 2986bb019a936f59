//! Discrete batch-constrained Q-learning.
//!
//! A softmax classifier estimates the logging policy. Q-learning then only
//! bootstraps from, and the greedy policy only picks, actions whose estimated
//! logging probability is at least `xi` times that of the most likely action
//! in the same day mask.

use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSet, Dataset, HyperParams, ModelError, StateVector};
use crate::neural::{softmax, Loss, Mlp, NeuralError, Optimizer, Sample, Target};
use crate::policy::{Policy, QSource};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BcqError {
    #[error("dataset has no transitions")]
    EmptyDataset,
    #[error("logged action {action} outside the {m}-action set")]
    ActionOutOfRange { action: usize, m: usize },
    #[error("xi = {0} is outside [0, 1]")]
    InvalidXi(f64),
    #[error("empty day mask")]
    EmptyMask,
    #[error("non-finite loss at training step {step}: {source}")]
    NonFinite { step: usize, source: NeuralError },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Hyper(#[from] ModelError),
}

/// Softmax classifier over all M actions given the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorModel {
    pub net: Mlp,
}

impl BehaviorModel {
    pub fn probs(&self, state: &StateVector) -> Vec<f64> {
        let logits = self.net.forward(&state.input()).expect("state matches network input");
        softmax(&logits)
    }

    /// Most likely action within the state's day mask, ties toward the cheaper action.
    pub fn masked_argmax(&self, state: &StateVector, actions: &ActionSet) -> usize {
        let p = self.probs(state);
        let mask = actions.day_mask(state.bonuses_collected);
        let mut best = mask.start;
        for a in mask {
            if p[a] > p[best] {
                best = a;
            }
        }
        best
    }

    pub fn eligible(&self, state: &StateVector, xi: f64, mask: Range<usize>) -> Result<Vec<usize>, BcqError> {
        eligible_from_probs(&self.probs(state), xi, mask)
    }
}

/// Actions in `mask` whose probability relative to the masked maximum is at
/// least `xi`. Never empty for a non-empty mask.
pub fn eligible_from_probs(probs: &[f64], xi: f64, mask: Range<usize>) -> Result<Vec<usize>, BcqError> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(BcqError::InvalidXi(xi));
    }
    if mask.is_empty() {
        return Err(BcqError::EmptyMask);
    }
    let max = probs[mask.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(mask.filter(|&a| probs[a] >= xi * max).collect())
}

fn check_dataset(ds: &Dataset) -> Result<(), BcqError> {
    if ds.n_transitions() == 0 {
        return Err(BcqError::EmptyDataset);
    }
    let m = ds.actions.len();
    if let Some(tr) = ds.transitions().find(|tr| tr.action_index >= m) {
        return Err(BcqError::ActionOutOfRange { action: tr.action_index, m });
    }
    Ok(())
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    sizes.extend(hidden.iter().copied().filter(|&h| h > 0));
    sizes.push(output);
    sizes
}

/// Trains a classifier on `(input, class)` pairs with uniformly sampled minibatches.
pub(crate) fn train_classifier(
    data: &[(Vec<f64>, usize)],
    sizes: &[usize],
    hyper: &HyperParams,
    rng: &mut ChaCha8Rng,
) -> Result<Mlp, BcqError> {
    let mut net = Mlp::new(sizes, rng);
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate);
    let mut batch = Vec::with_capacity(hyper.batch_size);
    for step in 0..hyper.classifier_steps() {
        batch.clear();
        for _ in 0..hyper.batch_size {
            let (x, c) = &data[rng.random_range(0..data.len())];
            batch.push(Sample { input: x.clone(), target: Target::Class(*c) });
        }
        net.train_step(&batch, Loss::CrossEntropy, &mut opt).map_err(|source| BcqError::NonFinite { step, source })?;
    }
    Ok(net)
}

/// Fits the logging-policy classifier on every logged `(state, action)` pair.
pub fn train_behavior_model(ds: &Dataset, hyper: &HyperParams) -> Result<BehaviorModel, BcqError> {
    hyper.validate()?;
    check_dataset(ds)?;
    let data: Vec<(Vec<f64>, usize)> = ds.transitions().map(|tr| (tr.state.input(), tr.action_index)).collect();
    let sizes = layer_sizes(StateVector::input_len(ds.d), &hyper.hidden, ds.actions.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(1);
    Ok(BehaviorModel { net: train_classifier(&data, &sizes, hyper, &mut rng)? })
}

/// A trained agent: online and target Q-networks plus the behavior model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcqAgent {
    pub q_net: Mlp,
    pub target_net: Mlp,
    pub behavior: BehaviorModel,
    pub hyper: HyperParams,
    pub actions: ActionSet,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    /// Mean minibatch loss since the previous row.
    pub loss: f64,
    /// Share of probe states where the greedy policy picks the behavior argmax.
    pub behavior_agreement: f64,
}

impl BcqAgent {
    pub fn q_values(&self, state: &StateVector) -> Vec<f64> {
        self.q_net.forward(&state.input()).expect("state matches network input")
    }

    pub fn eligible_actions(&self, state: &StateVector, xi: f64) -> Result<Vec<usize>, BcqError> {
        self.behavior.eligible(state, xi, self.actions.day_mask(state.bonuses_collected))
    }

    /// Greedy action over the eligible set, ties toward the cheaper action.
    pub fn policy_action(&self, state: &StateVector, xi: f64) -> Result<usize, BcqError> {
        let eligible = self.eligible_actions(state, xi)?;
        Ok(pick_best(&self.q_values(state), &eligible))
    }

    /// Q-values over the day mask, `None` elsewhere.
    pub fn q_vector(&self, state: &StateVector) -> Vec<Option<f64>> {
        let q = self.q_values(state);
        let mask = self.actions.day_mask(state.bonuses_collected);
        q.into_iter().enumerate().map(|(a, v)| mask.contains(&a).then_some(v)).collect()
    }

    pub fn behavior_argmax(&self, state: &StateVector) -> usize {
        self.behavior.masked_argmax(state, &self.actions)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("agent serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Highest-valued candidate; candidates are in increasing index (and cost) order.
fn pick_best(q: &[f64], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &a in &candidates[1..] {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

impl Policy for BcqAgent {
    fn act(&self, state: &StateVector, _rng: &mut dyn RngCore) -> usize {
        self.policy_action(state, self.hyper.xi).expect("xi validated at training")
    }
}

impl QSource for BcqAgent {
    fn q_row(&self, state: &StateVector) -> Vec<Option<f64>> {
        self.q_vector(state)
    }
}

struct Prepared {
    input: Vec<f64>,
    action: usize,
    reward: f64,
    next: Option<(Vec<f64>, Vec<usize>)>,
}

/// Trains the behavior model and then the Q-network.
pub fn bcq_train(ds: &Dataset, hyper: &HyperParams) -> Result<(BcqAgent, Vec<TrainLogRow>), BcqError> {
    let behavior = train_behavior_model(ds, hyper)?;
    bcq_train_with_behavior(ds, hyper, behavior)
}

/// Q-learning with the Huber loss against `r + γ max_{a' eligible} Q'(s', a')`,
/// or `r` alone on terminal steps. The target network is a hard copy refreshed
/// every `target_sync_interval` steps.
pub fn bcq_train_with_behavior(
    ds: &Dataset,
    hyper: &HyperParams,
    behavior: BehaviorModel,
) -> Result<(BcqAgent, Vec<TrainLogRow>), BcqError> {
    hyper.validate()?;
    check_dataset(ds)?;
    let actions = ds.actions.clone();
    let m = actions.len();

    let mut prepared = Vec::with_capacity(ds.n_transitions());
    for tr in ds.transitions() {
        let next = match (&tr.next_state, tr.done) {
            (Some(s), false) => {
                let eligible = behavior.eligible(s, hyper.xi, actions.day_mask(s.bonuses_collected))?;
                Some((s.input(), eligible))
            }
            _ => None,
        };
        prepared.push(Prepared { input: tr.state.input(), action: tr.action_index, reward: tr.reward as f64, next });
    }

    let sizes = layer_sizes(StateVector::input_len(ds.d), &hyper.hidden, m);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(2);
    let q_net = Mlp::new(&sizes, &mut rng);
    let mut agent = BcqAgent { target_net: q_net.clone(), q_net, behavior, hyper: hyper.clone(), actions, d: ds.d };

    let probe: Vec<StateVector> = ds.transitions().take(512).map(|tr| tr.state.clone()).collect();
    let log_every = (hyper.training_steps / 100).max(1);
    let mut log = Vec::new();
    let mut opt = Optimizer::new(hyper.optimizer, hyper.learning_rate);
    let mut batch = Vec::with_capacity(hyper.batch_size);
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;

    for step in 0..hyper.training_steps {
        batch.clear();
        for _ in 0..hyper.batch_size {
            let p = &prepared[rng.random_range(0..prepared.len())];
            let value = match &p.next {
                None => p.reward,
                Some((x, eligible)) => {
                    let q_next = agent.target_net.forward(x)?;
                    let best = eligible.iter().map(|&a| q_next[a]).fold(f64::NEG_INFINITY, f64::max);
                    p.reward + hyper.gamma * best
                }
            };
            batch.push(Sample { input: p.input.clone(), target: Target::Value { output: p.action, value } });
        }
        let loss = agent
            .q_net
            .train_step(&batch, Loss::Huber { kappa: hyper.kappa }, &mut opt)
            .map_err(|source| BcqError::NonFinite { step, source })?;
        loss_acc += loss;
        loss_n += 1;

        if (step + 1) % hyper.target_sync_interval == 0 {
            agent.target_net = agent.q_net.clone();
        }
        if (step + 1) % log_every == 0 || step + 1 == hyper.training_steps {
            let agree = probe
                .iter()
                .filter(|s| agent.policy_action(s, hyper.xi).ok() == Some(agent.behavior_argmax(s)))
                .count();
            log.push(TrainLogRow {
                step: step + 1,
                loss: loss_acc / loss_n as f64,
                behavior_agreement: if probe.is_empty() { 0.0 } else { agree as f64 / probe.len() as f64 },
            });
            loss_acc = 0.0;
            loss_n = 0;
        }
    }
    Ok((agent, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::money::Cents;

    #[test]
    fn ratio_rule_hand_example() {
        let probs = [0.6, 0.3, 0.1];
        assert_eq!(eligible_from_probs(&probs, 0.3, 0..3).unwrap(), vec![0, 1]);
    }

    #[test]
    fn xi_zero_keeps_every_masked_action() {
        let probs = [0.7, 0.2, 0.05, 0.05];
        assert_eq!(eligible_from_probs(&probs, 0.0, 1..4).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn xi_one_keeps_only_the_argmax() {
        let probs = [0.1, 0.2, 0.5, 0.2];
        assert_eq!(eligible_from_probs(&probs, 1.0, 0..4).unwrap(), vec![2]);
        // the masked argmax, not the global one
        assert_eq!(eligible_from_probs(&probs, 1.0, 0..2).unwrap(), vec![1]);
    }

    #[test]
    fn eligible_errors() {
        assert_eq!(eligible_from_probs(&[1.0], 0.5, 0..0), Err(BcqError::EmptyMask));
        assert_eq!(eligible_from_probs(&[1.0], 1.5, 0..1), Err(BcqError::InvalidXi(1.5)));
    }

    fn toy_agent(q_bias: &[f64]) -> BcqAgent {
        let actions = ActionSet::new(vec![Cents(65), Cents(105)], vec![Cents(172)]).unwrap();
        let d = 1;
        let n_in = StateVector::input_len(d);
        let mut q_net = Mlp::zeros(&[n_in, 3]);
        q_net.layer_mut(0).1.copy_from_slice(q_bias);
        let behavior = BehaviorModel { net: Mlp::zeros(&[n_in, 3]) };
        BcqAgent { target_net: q_net.clone(), q_net, behavior, hyper: HyperParams::default(), actions, d }
    }

    fn day1() -> StateVector {
        StateVector { features: vec![0.0], day_in_cycle: 1, bonuses_collected: 0 }
    }

    #[test]
    fn policy_picks_higher_q_among_eligible() {
        let agent = toy_agent(&[0.4, 0.7, 0.0]);
        // uniform behavior: both normal actions eligible at any xi
        assert_eq!(agent.policy_action(&day1(), 0.3).unwrap(), 1);
    }

    #[test]
    fn policy_breaks_ties_toward_cheaper() {
        let agent = toy_agent(&[0.5, 0.5, 0.0]);
        assert_eq!(agent.policy_action(&day1(), 0.0).unwrap(), 0);
    }

    #[test]
    fn single_eligible_action_wins_regardless_of_q() {
        let mut agent = toy_agent(&[0.1, 0.9, 0.0]);
        // behavior strongly prefers action 0
        agent.behavior.net.layer_mut(0).1.copy_from_slice(&[5.0, 0.0, 0.0]);
        assert_eq!(agent.eligible_actions(&day1(), 0.3).unwrap(), vec![0]);
        assert_eq!(agent.policy_action(&day1(), 0.3).unwrap(), 0);
    }

    #[test]
    fn q_vector_applies_day_mask() {
        let agent = toy_agent(&[0.4, 0.7, 0.2]);
        assert_eq!(agent.q_vector(&day1()), vec![Some(0.4), Some(0.7), None]);
        let day4 = StateVector { features: vec![0.0], day_in_cycle: 4, bonuses_collected: 3 };
        assert_eq!(agent.q_vector(&day4), vec![None, None, Some(0.2)]);
    }

    #[test]
    fn agent_round_trips_through_json() {
        let agent = toy_agent(&[0.4, 0.7, 0.2]);
        assert_eq!(BcqAgent::from_json(&agent.to_json()).unwrap(), agent);
    }
}
