#![allow(dead_code)]

use promo_core::allocator::AllocationProblem;
use promo_core::model::ActionSet;
use promo_core::money::Cents;
use rand::seq::index::sample;
use rand::Rng;

/// Random instance with `n ≤ 8` rows and `m ≤ 4` actions whose costs come
/// from the standard action set. Some entries are absent; the budget lies
/// between the mean per-row cheapest cost and the largest cost.
pub fn random_problem<R: Rng>(rng: &mut R) -> AllocationProblem {
    let all = ActionSet::standard().costs();
    let n = rng.random_range(1..=8);
    let m = rng.random_range(1..=4);
    let mut costs: Vec<Cents> = sample(rng, all.len(), m).into_iter().map(|k| all[k]).collect();
    costs.sort();
    let q: Vec<Vec<Option<f64>>> = (0..n)
        .map(|_| {
            let keep = rng.random_range(0..m);
            (0..m).map(|j| (j == keep || rng.random_bool(0.8)).then(|| rng.random_range(0.0..1.0))).collect()
        })
        .collect();
    let cheapest: i64 = q
        .iter()
        .map(|r| (0..m).filter(|&j| r[j].is_some()).map(|j| costs[j].0).min().unwrap())
        .sum();
    let lo = (cheapest + n as i64 - 1) / n as i64;
    let hi = costs[m - 1].0;
    let budget = Cents(rng.random_range(lo..=hi.max(lo)));
    AllocationProblem::new(q, costs, budget).unwrap()
}

/// Best budget-feasible 0-1 assignment by exhaustive enumeration.
pub fn brute_force(p: &AllocationProblem) -> Option<(f64, Vec<usize>)> {
    let allowed = p.allowed_total();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut chosen = vec![0usize; p.n()];
    fn rec(
        p: &AllocationProblem,
        i: usize,
        chosen: &mut Vec<usize>,
        value: f64,
        cost: Cents,
        allowed: Cents,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if i == p.n() {
            if cost <= allowed && best.as_ref().is_none_or(|(b, _)| value > *b) {
                *best = Some((value, chosen.clone()));
            }
            return;
        }
        for j in 0..p.m() {
            if let Some(q) = p.rows()[i][j] {
                chosen[i] = j;
                rec(p, i + 1, chosen, value + q, cost + p.costs()[j], allowed, best);
            }
        }
    }
    rec(p, 0, &mut chosen, 0.0, Cents::ZERO, allowed, &mut best);
    best
}

pub fn max_row_range(p: &AllocationProblem) -> f64 {
    p.rows()
        .iter()
        .map(|r| {
            let vals: Vec<f64> = r.iter().flatten().copied().collect();
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

use promo_core::env::{Env, EnvConfig, SegmentParams, DYNAMIC_FEATURES};

/// Noise-free three-segment environment whose retention rises steeply with
/// the bonus and falls with the streak, so that every claim position has
/// clearly separated action values. The second segment remembers the
/// previous bonus.
pub fn tabular_env() -> Env {
    let seg = |base_logit: f64, bonus_sensitivity: f64, streak_bonus: f64, carryover: f64| SegmentParams {
        weight: 1.0,
        base_logit,
        bonus_sensitivity,
        streak_bonus,
        carryover,
        noise_scale: 0.0,
    };
    let segments = vec![seg(-6.4, 8.0, -2.0, 0.0), seg(-7.4, 8.0, -1.6, 0.8), seg(-4.0, 5.0, -1.2, 0.0)];
    Env::new(EnvConfig {
        d: segments.len() + DYNAMIC_FEATURES,
        segments,
        feature_noise: 0.0,
        horizon: 4,
        actions: ActionSet::standard(),
    })
    .unwrap()
}

use promo_core::neural::{Loss, Mlp, Sample, Target};

fn random_net<R: Rng>(rng: &mut R) -> Mlp {
    let n_in = rng.random_range(1..5);
    let hidden = rng.random_range(0..3);
    let mut sizes = vec![n_in];
    for _ in 0..hidden {
        sizes.push(rng.random_range(2..6));
    }
    sizes.push(rng.random_range(2..4));
    Mlp::new(&sizes, rng)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-3)
}

fn worst_gradient_error(net: &Mlp, batch: &[Sample], loss: Loss) -> f64 {
    let h = 1e-5;
    let (_, grad) = net.loss_and_grad(batch, loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, g) in grad.iter().enumerate() {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (plus.loss_and_grad(batch, loss).unwrap().0 - minus.loss_and_grad(batch, loss).unwrap().0) / (2.0 * h);
        worst = worst.max(rel_err(*g, fd));
    }
    worst
}

/// Largest relative error between analytic and central-difference gradients
/// over `n_nets` random networks, with Huber targets on both sides of `κ`
/// and with cross-entropy targets.
pub fn gradient_check<R: Rng>(n_nets: usize, rng: &mut R) -> f64 {
    let kappa = 1.0;
    let mut worst: f64 = 0.0;
    for _ in 0..n_nets {
        let net = random_net(rng);
        let input = |rng: &mut R| -> Vec<f64> { (0..net.input_len()).map(|_| rng.random_range(-2.0..2.0)).collect() };
        for offset in [0.3 * kappa, -0.4 * kappa, 2.5 * kappa, -3.0 * kappa] {
            let batch: Vec<Sample> = (0..3)
                .map(|_| {
                    let x = input(rng);
                    let output = rng.random_range(0..net.output_len());
                    let value = net.forward(&x).unwrap()[output] + offset;
                    Sample { input: x, target: Target::Value { output, value } }
                })
                .collect();
            worst = worst.max(worst_gradient_error(&net, &batch, Loss::Huber { kappa }));
        }
        let batch: Vec<Sample> = (0..3)
            .map(|_| Sample { input: input(rng), target: Target::Class(rng.random_range(0..net.output_len())) })
            .collect();
        worst = worst.max(worst_gradient_error(&net, &batch, Loss::CrossEntropy));
    }
    worst
}
