//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use promo_core::allocator::{
    allocate, assign, dual_objective, relaxed_cost, solve_lambda, AllocationProblem, WindowConfig, WindowStore,
};
use promo_core::baselines::{train_reward_model, LrGreedy, RewardModel};
use promo_core::bcq::{bcq_train, BcqAgent};
use promo_core::env::{
    generate_dataset, oracle_value_iteration, BehaviorPolicyConfig, Env, EnvConfig, SegmentParams, TabularState,
};
use promo_core::eval::{
    avg_cost, evaluate_offline, retention_rate, simulate_online, EnvShift, EvalReport, MatchMode,
    MatchedSet, OnlinePolicy, SimConfig,
};
use promo_core::io::write_dataset;
use promo_core::model::{Dataset, HyperParams, OptimizerKind, StateVector, Trajectory, Transition};
use promo_core::money::Cents;
use promo_core::neural::huber;
use promo_core::policy::{Cheapest, QSource, UniformRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: u32, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= limit;
    let pass = o.pass && in_time;
    println!(
        "{} criterion {id}: {name}: {} [{:.1}s of {:.0}s]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    pass
}

// ---- 1 and 2: allocator --------------------------------------------------

fn lp_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_101);
    let (mut feasible, mut within_range, mut gap_sum) = (0, 0, 0.0);
    let n = 200;
    for _ in 0..n {
        let p = common::random_problem(&mut rng);
        let (opt, _) = common::brute_force(&p).expect("instance has a feasible assignment");
        let a = allocate(&p, 1e-9).expect("allocation succeeds");
        if a.total_cost <= p.allowed_total() && a.chosen.len() == p.n() {
            feasible += 1;
        }
        let gap = opt - a.objective;
        if gap <= common::max_row_range(&p) + 1e-9 {
            within_range += 1;
        }
        gap_sum += if opt > 0.0 { gap / opt } else { 0.0 };
    }
    let mean_gap = gap_sum / n as f64;
    outcome(
        feasible == n && within_range == n && mean_gap <= 0.02,
        format!("feasible {feasible}/{n}, gap within row range {within_range}/{n}, mean relative gap {:.4}%", 100.0 * mean_gap),
    )
}

fn dual_solution() -> Outcome {
    let q = vec![vec![Some(1.0), Some(2.0)]];
    let costs = vec![Cents(0), Cents(100)];
    let slack = AllocationProblem::new(q.clone(), costs.clone(), Cents(100)).unwrap();
    let tight = AllocationProblem::new(q, costs, Cents(0)).unwrap();
    let l0 = solve_lambda(&slack, 1e-9).unwrap();
    let l1 = solve_lambda(&tight, 1e-9).unwrap();
    let hand = l0.abs() < 1e-6 && (l1 - 1.0).abs() < 1e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(7_777);
    let (mut convex, mut monotone, n) = (0, 0, 1000);
    for _ in 0..n {
        let p = common::random_problem(&mut rng);
        let (a, b) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let mid = 0.5 * (a + b);
        let d = |l| dual_objective(&p, l).unwrap();
        if d(mid) <= 0.5 * (d(a) + d(b)) + 1e-9 {
            convex += 1;
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let cost_ok = relaxed_cost(&p, hi) <= relaxed_cost(&p, lo);
        let assign_ok = assign(&p, hi).unwrap().total_cost <= assign(&p, lo).unwrap().total_cost;
        if cost_ok && assign_ok {
            monotone += 1;
        }
    }
    outcome(
        hand && convex == n && monotone == n,
        format!("lambda {l0:.2e} and {l1:.9}; convex {convex}/{n}; cost non-increasing {monotone}/{n}"),
    )
}

// ---- 3: tabular BCQ against value iteration -------------------------------

fn tabular_bcq() -> Outcome {
    let env = common::tabular_env();
    let sol = oracle_value_iteration(&env, 1.0).unwrap();
    let behavior = BehaviorPolicyConfig::standard(env.n_segments(), env.actions(), 1.0);
    let ds = Dataset {
        d: env.config().d,
        horizon: env.config().horizon,
        actions: env.actions().clone(),
        trajectories: generate_dataset(&env, &behavior, 100_000, 1).unwrap(),
    };
    let hyper = HyperParams {
        xi: 0.0,
        gamma: 1.0,
        kappa: 4.0,
        hidden: vec![64, 64],
        learning_rate: 3e-4,
        optimizer: OptimizerKind::Adam,
        batch_size: 128,
        training_steps: 40_000,
        classifier_steps: Some(2_000),
        target_sync_interval: 500,
        seed: 1,
        ..HyperParams::default()
    };
    let (agent, _) = bcq_train(&ds, &hyper).unwrap();

    let mut keys: BTreeMap<TabularState, (usize, usize)> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let (mut cloned, mut observed) = (0, 0);
    let (mut abs_err, mut n_err) = (0.0, 0);
    for tr in ds.transitions() {
        let key = env.tabular_state_of(&tr.state);
        abs_err += (agent.q_values(&tr.state)[tr.action_index] - sol.q[&key][tr.action_index].unwrap()).abs();
        n_err += 1;
        let bits: Vec<u64> = tr.state.features.iter().map(|f| f.to_bits()).collect();
        if !seen.insert((bits, tr.state.bonuses_collected)) {
            continue;
        }
        observed += 1;
        let cell = keys.entry(key).or_default();
        cell.1 += 1;
        if agent.policy_action(&tr.state, 0.0).unwrap() == sol.policy[&key] {
            cell.0 += 1;
        }
        if agent.policy_action(&tr.state, 1.0).unwrap() == agent.behavior_argmax(&tr.state) {
            cloned += 1;
        }
    }
    let agree: usize = keys.values().map(|c| c.0).sum();
    let share = agree as f64 / observed as f64;
    let covered = keys.len() == sol.policy.len();
    outcome(
        share >= 0.95 && cloned == observed && covered,
        format!(
            "optimal action on {agree}/{observed} observed states ({} of {} reachable keys), xi = 1 clones behavior {cloned}/{observed}, mean |Q - Q*| {:.4}",
            keys.len(),
            sol.policy.len(),
            abs_err / n_err as f64
        ),
    )
}

// ---- 4: loss and gradients -------------------------------------------------

fn huber_and_gradients() -> Outcome {
    let values = [huber(0.0, 1.0).unwrap(), huber(0.5, 1.0).unwrap(), huber(2.0, 1.0).unwrap()];
    let exact = values == [0.0, 0.125, 1.5];
    let worst = common::gradient_check(50, &mut ChaCha8Rng::seed_from_u64(4));
    outcome(exact && worst < 1e-4, format!("huber {values:?}; worst relative gradient error over 50 nets {worst:.2e}"))
}

// ---- 5 and 6: online simulation --------------------------------------------

fn seg(base_logit: f64, bonus_sensitivity: f64, carryover: f64) -> SegmentParams {
    SegmentParams { weight: 1.0, base_logit, bonus_sensitivity, streak_bonus: 0.0, carryover, noise_scale: 0.3 }
}

/// One segment is indifferent today but rewards yesterday's bonus, so a
/// one-step model undervalues spending on it.
fn long_horizon_config() -> EnvConfig {
    EnvConfig { segments: vec![seg(-1.5, 0.0, 3.0), seg(-3.5, 4.0, 0.0), seg(1.0, 0.0, 0.0)], ..EnvConfig::standard() }
}

struct Trained {
    env: Env,
    agent: BcqAgent,
    reward: RewardModel,
}

fn train_pipeline(config: EnvConfig, kappa: f64) -> Trained {
    let env = Env::new(config).unwrap();
    let behavior = BehaviorPolicyConfig::standard(env.n_segments(), env.actions(), 0.3);
    let ds = Dataset {
        d: env.config().d,
        horizon: env.config().horizon,
        actions: env.actions().clone(),
        trajectories: generate_dataset(&env, &behavior, 30_000, 1).unwrap(),
    };
    let hyper = HyperParams {
        xi: 0.3,
        kappa,
        hidden: vec![64, 64],
        learning_rate: 3e-4,
        optimizer: OptimizerKind::Adam,
        batch_size: 128,
        training_steps: 20_000,
        classifier_steps: Some(4_000),
        seed: 1,
        ..HyperParams::default()
    };
    let (agent, _) = bcq_train(&ds, &hyper).unwrap();
    let lr_hyper = HyperParams { hidden: vec![], learning_rate: 0.02, classifier_steps: Some(6_000), ..hyper };
    let reward = train_reward_model(&ds, &lr_hyper).unwrap();
    Trained { env, agent, reward }
}

fn sim_config(seed: u64) -> SimConfig {
    SimConfig { n_days: 7, arrivals_per_day: 2_000, warmup_days: 4, seed, shift: None }
}

fn budgeted(env: &Env, source: &dyn QSource, budget: Cents, cfg: &SimConfig) -> EvalReport {
    let mut store = WindowStore::new(env.actions().costs(), budget, WindowConfig::default());
    simulate_online(env, OnlinePolicy::Budgeted { source, store: &mut store }, cfg).unwrap()
}

fn in_band(cost: f64, budget: Cents) -> bool {
    (cost - budget.units()).abs() <= 0.05 * budget.units()
}

fn day_costs(r: &EvalReport) -> String {
    r.days.iter().map(|d| format!("{:.3}", d.avg_cost)).collect::<Vec<_>>().join(" ")
}

fn online_budget(t: &Trained) -> Outcome {
    let budget = Cents(87);
    let steady = budgeted(&t.env, &t.agent, budget, &sim_config(3));
    let steady_ok = steady.days.iter().all(|d| in_band(d.avg_cost, budget));

    let mut shifted_env = t.env.config().clone();
    for (s, w) in shifted_env.segments.iter_mut().zip([0.5, 1.0, 2.0]) {
        s.weight = w;
        s.bonus_sensitivity *= 1.25;
    }
    let shift_day = 3;
    let cfg = SimConfig { shift: Some(EnvShift { day: shift_day, env: shifted_env }), ..sim_config(5) };
    let shifted = budgeted(&t.env, &t.agent, budget, &cfg);
    // Measured day k (1-based) starts at shift + (k - 1 - shift_day) spans.
    let shifted_ok = shifted
        .days
        .iter()
        .filter(|d| d.day <= shift_day || d.day > shift_day + 1)
        .all(|d| in_band(d.avg_cost, budget));
    outcome(
        steady_ok && shifted_ok,
        format!(
            "budget {budget}: steady daily cost [{}]; shifted at day {} [{}]",
            day_costs(&steady),
            shift_day + 1,
            day_costs(&shifted)
        ),
    )
}

fn retention_lift(standard: &Trained, long: &Trained) -> Outcome {
    let cfg = sim_config(3);
    let direct = |env: &Env, p: &dyn promo_core::policy::Policy| simulate_online(env, OnlinePolicy::Direct(p), &cfg).unwrap();

    let env = &standard.env;
    let uniform = direct(env, &UniformRandom { actions: env.actions().clone() });
    let cheapest = direct(env, &Cheapest { actions: env.actions().clone() });
    let budget = Cents::from_units(uniform.avg_cost);
    let ours = budgeted(env, &standard.agent, budget, &cfg);
    let lift_ok = ours.retention_rate >= uniform.retention_rate + 0.02
        && ours.retention_rate >= cheapest.retention_rate + 0.02
        && ours.avg_cost <= budget.units() * 1.05;

    let env = &long.env;
    let long_uniform = direct(env, &UniformRandom { actions: env.actions().clone() });
    let long_budget = Cents::from_units(long_uniform.avg_cost);
    let long_ours = budgeted(env, &long.agent, long_budget, &cfg);
    let long_lr = budgeted(env, &long.reward, long_budget, &cfg);
    let long_ok = long_ours.retention_rate >= long_lr.retention_rate;

    outcome(
        lift_ok && long_ok,
        format!(
            "standard at {budget}: ours {:.4} (cost {:.3}) vs uniform {:.4}, cheapest {:.4}; long horizon at {long_budget}: ours {:.4} vs LR-greedy+LP {:.4}",
            ours.retention_rate,
            ours.avg_cost,
            uniform.retention_rate,
            cheapest.retention_rate,
            long_ours.retention_rate,
            long_lr.retention_rate
        ),
    )
}

// ---- 7: offline metrics -------------------------------------------------------

fn hand_trajectory(user: u64, rewards: &[u8], costs: &[i64]) -> Trajectory {
    let n = rewards.len();
    let s = |k: usize| StateVector { features: vec![0.0], day_in_cycle: k as u8 + 1, bonuses_collected: k as u8 };
    Trajectory {
        transitions: (0..n)
            .map(|k| Transition {
                user_id: user,
                t: k as u32 + 1,
                state: s(k),
                action_index: 0,
                reward: rewards[k],
                cost: Cents(costs[k]),
                next_state: (k + 1 < n).then(|| s(k + 1)),
                done: k + 1 == n,
            })
            .collect(),
    }
}

fn offline_metrics() -> Outcome {
    let hand = MatchedSet {
        trajectories: vec![hand_trajectory(0, &[1, 1, 0], &[80, 90, 85]), hand_trajectory(1, &[1, 1], &[80, 90])],
        total_trajectories: 2,
        total_steps: 5,
    };
    let (r, c) = (retention_rate(&hand).unwrap(), avg_cost(&hand).unwrap());
    let hand_ok = (r - 0.8).abs() < 1e-12 && (c - 0.85).abs() < 1e-12;

    let mut cfg = EnvConfig::standard();
    cfg.feature_noise = 0.0;
    for s in &mut cfg.segments {
        s.noise_scale = 0.0;
    }
    let env = Env::new(cfg).unwrap();
    let behavior = BehaviorPolicyConfig::standard(env.n_segments(), env.actions(), 0.0);
    let data = generate_dataset(&env, &behavior, 3_000, 1).unwrap();
    let expert = promo_core::baselines::ExpertPolicy::from_behavior(&behavior, env.actions()).unwrap();
    let report = evaluate_offline(&data, &expert, MatchMode::Prefix).unwrap();
    let steps: Vec<_> = data.iter().flat_map(|t| &t.transitions).collect();
    let ret = steps.iter().map(|tr| tr.reward as f64).sum::<f64>() / steps.len() as f64;
    let cost = steps.iter().map(|tr| tr.cost).sum::<Cents>().units() / steps.len() as f64;
    let self_ok = report.matched_trajectories == data.len() && report.retention_rate == ret && report.avg_cost == cost;
    outcome(
        hand_ok && self_ok,
        format!(
            "hand example retention {r} cost {c}; behavior self-evaluation {:.4}/{:.4} vs logged {ret:.4}/{cost:.4} on {}/{} trajectories",
            report.retention_rate,
            report.avg_cost,
            report.matched_trajectories,
            data.len()
        ),
    )
}

// ---- 8: determinism ------------------------------------------------------------

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn dir_digest(dir: &Path) -> String {
    let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        h.update(name.as_encoded_bytes());
        h.update(std::fs::read(dir.join(&name)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn stage_digests() -> Vec<(&'static str, String)> {
    let env = Env::new(EnvConfig::standard()).unwrap();
    let behavior = BehaviorPolicyConfig::standard(env.n_segments(), env.actions(), 0.3);
    let ds = Dataset {
        d: env.config().d,
        horizon: env.config().horizon,
        actions: env.actions().clone(),
        trajectories: generate_dataset(&env, &behavior, 2_000, 9).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();

    let hyper = HyperParams {
        hidden: vec![32],
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        training_steps: 1_000,
        classifier_steps: Some(1_000),
        seed: 9,
        ..HyperParams::default()
    };
    let (agent, log) = bcq_train(&ds, &hyper).unwrap();
    let reward = train_reward_model(&ds, &HyperParams { hidden: vec![], learning_rate: 0.02, ..hyper.clone() }).unwrap();

    let states: Vec<_> = ds.transitions().map(|tr| tr.state.clone()).collect();
    let rows = states.iter().map(|s| agent.q_row(s)).collect();
    let problem = AllocationProblem::new(rows, env.actions().costs(), Cents(87)).unwrap();
    let allocation = allocate(&problem, 1e-9).unwrap();

    let cfg = SimConfig { n_days: 2, arrivals_per_day: 300, warmup_days: 1, seed: 9, shift: None };
    let sim = budgeted(&env, &agent, Cents(87), &cfg);
    let offline = evaluate_offline(&ds.trajectories, &LrGreedy(&reward), MatchMode::Prefix).unwrap();

    vec![
        ("dataset", dir_digest(dir.path())),
        ("bcq", digest(agent.to_json().as_bytes())),
        ("training log", digest(serde_json::to_string(&log).unwrap().as_bytes())),
        ("reward model", digest(reward.to_json().as_bytes())),
        ("allocation", digest(serde_json::to_string(&allocation).unwrap().as_bytes())),
        ("simulation", digest(serde_json::to_string(&sim).unwrap().as_bytes())),
        ("offline evaluation", digest(serde_json::to_string(&offline).unwrap().as_bytes())),
    ]
}

fn determinism() -> Outcome {
    let (a, b) = (stage_digests(), stage_digests());
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let names: Vec<&str> = a.iter().map(|x| x.0).collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("identical sha256 across two runs for {}", names.join(", "))
        } else {
            format!("differing stages: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run(1, "LP oracle equivalence", secs(10), lp_equivalence);
    ok &= run(2, "dual solution", secs(10), dual_solution);
    ok &= run(3, "BCQ on a tabular MDP", secs(300), tabular_bcq);
    ok &= run(4, "Huber loss and gradients", secs(60), huber_and_gradients);

    let start = Instant::now();
    let standard = train_pipeline(EnvConfig::standard(), 4.0);
    let long = train_pipeline(long_horizon_config(), 4.0);
    println!("training for criteria 5 and 6 took {:.1}s", start.elapsed().as_secs_f64());
    ok &= run(5, "online budget compliance", secs(60), || online_budget(&standard));
    ok &= run(6, "retention over baselines", secs(600), || retention_lift(&standard, &long));

    ok &= run(7, "offline metrics", secs(60), offline_metrics);
    ok &= run(8, "determinism", secs(120), determinism);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
