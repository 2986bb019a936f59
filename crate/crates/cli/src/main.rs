//! `promo`: generate logged data, train policies, allocate under a budget and
//! evaluate, offline or in the simulator.

mod artifacts;
mod config;
mod error;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use promo_core::allocator::{allocate, AllocationProblem, LambdaSnapshot, WindowConfig, WindowStore};
use promo_core::baselines::{train_reward_model, ExpertPolicy};
use promo_core::bcq::bcq_train;
use promo_core::env::{generate_dataset, Env};
use promo_core::eval::{batch_lambda, evaluate_offline, simulate_online, EvalReport, MatchMode, OnlinePolicy};
use promo_core::io::{read_dataset, write_dataset, MANIFEST_FILE};
use promo_core::model::Dataset;
use promo_core::money::Cents;
use promo_core::policy::FixedLambda;

use artifacts::{
    decider, write_csv, write_report, AssignmentRow, Baseline, Decider, Decision, ModelFile, ASSIGNMENT_FILE,
    DECISIONS_FILE, LAMBDA_FILE, MODEL_FILE, TRAINING_LOG_FILE,
};
use config::{create_dir, require, ExperimentConfig, RunRecord};
use error::CliError;

const ALLOCATION_TOL: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(name = "promo", version, about = "Budget-constrained cash-bonus allocation with offline reinforcement learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate users under the logging policy and write a JSONL dataset directory
    GenerateData(GenerateArgs),
    /// Fit a policy to a logged dataset
    Train(TrainArgs),
    /// Assign one bonus per customer under an average-cost budget
    Allocate(AllocateArgs),
    /// Score a policy offline against a logged dataset
    Evaluate(EvaluateArgs),
    /// Run a policy against simulated users, day by day
    Simulate(SimulateArgs),
    /// generate-data, train (BCQ), simulate and evaluate with one seed
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Number of simulated users
    #[arg(long)]
    users: Option<usize>,
    /// Uniform perturbation rate of the logging policy
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Bcq,
    LrGreedy,
    LrLp,
    Expert,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by generate-data
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Policy to fit; expert copies the logging table from the config
    #[arg(long, value_enum, default_value = "bcq")]
    policy: PolicyKind,
    /// Behavior-probability threshold for eligible actions
    #[arg(long)]
    xi: Option<f64>,
    /// Discount factor
    #[arg(long)]
    gamma: Option<f64>,
    /// Huber threshold
    #[arg(long)]
    kappa: Option<f64>,
    /// Gradient steps for the Q-network
    #[arg(long)]
    steps: Option<usize>,
    /// Optimizer step size
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Transitions per minibatch
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("input").required(true).args(["q_matrix", "stream", "model"])))]
struct AllocateArgs {
    /// Experiment config (TOML); supplies the action set when no model is given
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory, created if missing
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Average cost per customer in currency units, e.g. 0.87
    #[arg(long, value_parser = parse_budget)]
    budget: Option<Cents>,
    /// Batch mode: CSV with a header and one column per action; empty cells are ineligible
    #[arg(long, value_name = "FILE")]
    q_matrix: Option<PathBuf>,
    /// Stream mode: JSONL of {"ts": seconds, "q": [score or null, ...]} in time order
    #[arg(long, value_name = "FILE")]
    stream: Option<PathBuf>,
    /// Batch mode: score every state of --dataset with this model
    #[arg(long, value_name = "FILE", requires = "dataset")]
    model: Option<PathBuf>,
    /// Dataset directory whose states --model scores
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("policy").required(true).args(["model", "baseline"])))]
struct PolicyArgs {
    /// Model file written by train
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Untrained baseline to run instead of a model
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Average cost per decision for bcq and lr-lp, in currency units
    #[arg(long, value_parser = parse_budget)]
    budget: Option<Cents>,
    /// Act greedily on bcq or lr-lp scores instead of allocating under the budget
    #[arg(long)]
    no_budget: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Prefix,
    Full,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by generate-data
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Which logged steps count as matched
    #[arg(long, value_enum, default_value = "prefix")]
    mode: Mode,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Measured days
    #[arg(long)]
    days: Option<u32>,
    /// New users per day
    #[arg(long)]
    arrivals: Option<usize>,
    /// Unmeasured days before measurement starts
    #[arg(long)]
    warmup: Option<u32>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
}

fn parse_budget(s: &str) -> Result<Cents, String> {
    let c: Cents = s.parse().map_err(|e: promo_core::money::ParseMoneyError| e.to_string())?;
    if c.0 <= 0 {
        return Err(format!("budget {c} is not positive"));
    }
    Ok(c)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Simulate(a) => simulate(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn record(command: &str, inputs: &[&Path], output: &Path) -> RunRecord {
    RunRecord { command: command.into(), inputs: inputs.iter().map(|p| p.to_path_buf()).collect(), output: output.into() }
}

fn require_dataset(dir: &Path) -> Result<(), CliError> {
    require(dir)?;
    require(&dir.join(MANIFEST_FILE))
}

fn check_actions(model: &ModelFile, env: &Env) -> Result<(), CliError> {
    if model.actions() != env.actions() {
        return Err(CliError::value("env.actions", "the model was trained on a different action set".into()));
    }
    Ok(())
}

// ---- generate-data ----------------------------------------------------------

fn generate(a: GenerateArgs) -> Result<(), CliError> {
    let mut cfg = load(&a.common)?;
    if let Some(users) = a.users {
        cfg.users = users;
    }
    if let Some(eps) = a.epsilon {
        cfg.hyper.epsilon = eps;
        cfg.behavior = None;
    }
    let (cfg, env) = cfg.resolve()?;
    create_dir(&a.common.out)?;
    write_generated(&cfg, &env, &a.common.out)?;
    cfg.write_snapshot(&a.common.out, record("generate-data", &[], &a.common.out))
}

fn write_generated(cfg: &ExperimentConfig, env: &Env, out: &Path) -> Result<Dataset, CliError> {
    let trajectories =
        generate_dataset(env, cfg.behavior(), cfg.users, cfg.seed).map_err(|e| CliError::value("env", e.to_string()))?;
    let ds = Dataset { d: env.config().d, horizon: env.config().horizon, actions: env.actions().clone(), trajectories };
    write_dataset(out, &ds)?;
    Ok(ds)
}

// ---- train ----------------------------------------------------------------------

fn train(a: TrainArgs) -> Result<(), CliError> {
    require_dataset(&a.dataset)?;
    if let Some(path) = &a.common.config {
        require(path)?;
    }
    let mut cfg = load(&a.common)?;
    let h = &mut cfg.hyper;
    h.xi = a.xi.unwrap_or(h.xi);
    h.gamma = a.gamma.unwrap_or(h.gamma);
    h.kappa = a.kappa.unwrap_or(h.kappa);
    h.training_steps = a.steps.unwrap_or(h.training_steps);
    h.learning_rate = a.learning_rate.unwrap_or(h.learning_rate);
    h.batch_size = a.batch_size.unwrap_or(h.batch_size);
    let (cfg, _) = cfg.resolve()?;
    let ds = read_dataset(&a.dataset)?;
    create_dir(&a.common.out)?;
    train_into(&cfg, &ds, a.policy, &a.common.out)?;
    cfg.write_snapshot(&a.common.out, record("train", &[&a.dataset], &a.common.out))
}

fn train_into(cfg: &ExperimentConfig, ds: &Dataset, kind: PolicyKind, out: &Path) -> Result<ModelFile, CliError> {
    let model = match kind {
        PolicyKind::Bcq => {
            let (agent, log) = bcq_train(ds, &cfg.hyper)?;
            write_csv(&out.join(TRAINING_LOG_FILE), &log)?;
            ModelFile::Bcq { agent }
        }
        PolicyKind::LrGreedy => ModelFile::LrGreedy { model: train_reward_model(ds, &cfg.hyper)? },
        PolicyKind::LrLp => ModelFile::LrLp { model: train_reward_model(ds, &cfg.hyper)? },
        PolicyKind::Expert => ModelFile::Expert {
            expert: ExpertPolicy::from_behavior(cfg.behavior(), &ds.actions)
                .map_err(|e| CliError::value("behavior", e.to_string()))?,
        },
    };
    model.save(&out.join(MODEL_FILE))?;
    Ok(model)
}

// ---- allocate ---------------------------------------------------------------------

fn allocate_cmd(a: AllocateArgs) -> Result<(), CliError> {
    for path in [&a.config, &a.q_matrix, &a.stream, &a.model].into_iter().flatten() {
        require(path)?;
    }
    if let Some(dir) = &a.dataset {
        require_dataset(dir)?;
    }
    let mut cfg = ExperimentConfig::load(a.config.as_deref())?;
    if let Some(b) = a.budget {
        cfg.budget = b.units();
    }
    let (cfg, env) = cfg.resolve()?;
    let budget = cfg.budget_cents()?;
    let model = a.model.as_deref().map(ModelFile::load).transpose()?;
    let actions = model.as_ref().map_or(env.actions(), |m| m.actions()).clone();
    create_dir(&a.out)?;

    if let Some(path) = &a.stream {
        let events = artifacts::read_stream(path, actions.len())?;
        let mut store = WindowStore::new(actions.costs(), budget, WindowConfig::default());
        let mut timeline: Vec<LambdaSnapshot> = Vec::new();
        let mut lines = String::new();
        for ev in &events {
            timeline.extend(store.catch_up(ev.ts));
            let action = store.allocate_online(ev.ts, &ev.q, 0..actions.len());
            let d = Decision { ts: ev.ts, action, cost_cents: actions.cost(action), lambda: store.lambda() };
            lines.push_str(&serde_json::to_string(&d).expect("decision serializes"));
            lines.push('\n');
        }
        config::write(&a.out.join(DECISIONS_FILE), lines.as_bytes())?;
        let report = EvalReport {
            retention_rate: 0.0,
            avg_cost: 0.0,
            matched_trajectories: 0,
            matched_steps: 0,
            total_trajectories: 0,
            total_steps: 0,
            days: vec![],
            lambda_timeline: timeline,
        };
        config::write(&a.out.join(LAMBDA_FILE), report.lambda_csv().as_bytes())?;
        return cfg.write_snapshot(&a.out, record("allocate", &[path], &a.out));
    }

    let (rows, inputs): (Vec<Vec<Option<f64>>>, Vec<&Path>) = match (&a.q_matrix, &model, &a.dataset) {
        (Some(path), _, _) => (artifacts::read_q_matrix(path, actions.len())?, vec![path]),
        (None, Some(m), Some(dir)) => {
            let source = m
                .q_source()
                .ok_or_else(|| CliError::value("model", "an expert table has no scores to allocate with".into()))?;
            let ds = read_dataset(dir)?;
            let rows = ds.transitions().map(|tr| source.q_row(&tr.state)).collect();
            (rows, vec![a.model.as_deref().expect("model given"), dir])
        }
        _ => unreachable!("clap requires an input"),
    };
    let problem = AllocationProblem::new(rows, actions.costs(), budget)?;
    let assignment = allocate(&problem, ALLOCATION_TOL)?;
    let out_rows: Vec<AssignmentRow> = assignment
        .chosen
        .iter()
        .enumerate()
        .map(|(i, &j)| AssignmentRow {
            customer: i,
            action: j,
            cost_cents: actions.cost(j),
            q: problem.rows()[i][j].expect("chosen entry present"),
            lambda: assignment.lambda,
            objective: assignment.objective,
            total_cost_cents: assignment.total_cost,
        })
        .collect();
    write_csv(&a.out.join(ASSIGNMENT_FILE), &out_rows)?;
    cfg.write_snapshot(&a.out, record("allocate", &inputs, &a.out))
}

// ---- evaluate and simulate -----------------------------------------------------

fn policy_inputs(p: &PolicyArgs, cfg: &mut ExperimentConfig) -> Result<Option<ModelFile>, CliError> {
    if let Some(b) = p.budget {
        cfg.budget = b.units();
    }
    p.model.as_deref().map(ModelFile::load).transpose()
}

fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    require_dataset(&a.dataset)?;
    for path in [&a.common.config, &a.policy.model].into_iter().flatten() {
        require(path)?;
    }
    let mut cfg = load(&a.common)?;
    let model = policy_inputs(&a.policy, &mut cfg)?;
    let (cfg, _) = cfg.resolve()?;
    let ds = read_dataset(&a.dataset)?;
    let mode = match a.mode {
        Mode::Prefix => MatchMode::Prefix,
        Mode::Full => MatchMode::FullTrajectory,
    };
    create_dir(&a.common.out)?;
    let report = evaluate_into(&cfg, &ds, model.as_ref(), a.policy.baseline, a.policy.no_budget, mode)?;
    write_report(&a.common.out, &report)?;
    let mut inputs: Vec<&Path> = vec![&a.dataset];
    inputs.extend(a.policy.model.as_deref());
    cfg.write_snapshot(&a.common.out, record("evaluate", &inputs, &a.common.out))
}

/// Budgeted policies are scored offline with the batch multiplier over the
/// dataset's states.
fn evaluate_into(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    model: Option<&ModelFile>,
    baseline: Option<Baseline>,
    no_budget: bool,
    mode: MatchMode,
) -> Result<EvalReport, CliError> {
    if model.is_some_and(|m| m.actions() != &ds.actions) {
        return Err(CliError::value("model", "the dataset uses a different action set".into()));
    }
    match decider(model, baseline, &ds.actions, no_budget) {
        Decider::Direct(policy) => Ok(evaluate_offline(&ds.trajectories, policy.as_ref(), mode)?),
        Decider::Budgeted(source) => {
            let budget = cfg.budget_cents()?;
            let costs = ds.actions.costs();
            let lambda = batch_lambda(source, ds.transitions().map(|tr| &tr.state), &costs, budget, ALLOCATION_TOL)?;
            let policy = FixedLambda { source, costs, budget, lambda };
            let mut report = evaluate_offline(&ds.trajectories, &policy, mode)?;
            report.lambda_timeline = vec![LambdaSnapshot { at: 0, lambda, window_len: ds.n_transitions() }];
            Ok(report)
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    for path in [&a.common.config, &a.policy.model].into_iter().flatten() {
        require(path)?;
    }
    let mut cfg = load(&a.common)?;
    let model = policy_inputs(&a.policy, &mut cfg)?;
    cfg.sim.n_days = a.days.unwrap_or(cfg.sim.n_days);
    cfg.sim.arrivals_per_day = a.arrivals.unwrap_or(cfg.sim.arrivals_per_day);
    cfg.sim.warmup_days = a.warmup.unwrap_or(cfg.sim.warmup_days);
    let (cfg, env) = cfg.resolve()?;
    create_dir(&a.common.out)?;
    let report = simulate_into(&cfg, &env, model.as_ref(), a.policy.baseline, a.policy.no_budget)?;
    write_report(&a.common.out, &report)?;
    let inputs: Vec<&Path> = a.policy.model.as_deref().into_iter().collect();
    cfg.write_snapshot(&a.common.out, record("simulate", &inputs, &a.common.out))
}

fn simulate_into(
    cfg: &ExperimentConfig,
    env: &Env,
    model: Option<&ModelFile>,
    baseline: Option<Baseline>,
    no_budget: bool,
) -> Result<EvalReport, CliError> {
    if let Some(m) = model {
        check_actions(m, env)?;
    }
    match decider(model, baseline, env.actions(), no_budget) {
        Decider::Direct(policy) => Ok(simulate_online(env, OnlinePolicy::Direct(policy.as_ref()), &cfg.sim)?),
        Decider::Budgeted(source) => {
            let mut store = WindowStore::new(env.actions().costs(), cfg.budget_cents()?, WindowConfig::default());
            Ok(simulate_online(env, OnlinePolicy::Budgeted { source, store: &mut store }, &cfg.sim)?)
        }
    }
}

// ---- pipeline ---------------------------------------------------------------------

fn pipeline(a: PipelineArgs) -> Result<(), CliError> {
    if let Some(path) = &a.common.config {
        require(path)?;
    }
    let (cfg, env) = load(&a.common)?.resolve()?;
    let out = &a.common.out;
    let (data_dir, model_dir, sim_dir, eval_dir) =
        (out.join("data"), out.join("model"), out.join("simulate"), out.join("evaluate"));
    for dir in [out, &data_dir, &model_dir, &sim_dir, &eval_dir] {
        create_dir(dir)?;
    }

    write_generated(&cfg, &env, &data_dir)?;
    cfg.write_snapshot(&data_dir, record("generate-data", &[], &data_dir))?;

    // Train from the files on disk so the pipeline exercises the same path as `train`.
    let ds_read = read_dataset(&data_dir)?;
    let model = train_into(&cfg, &ds_read, PolicyKind::Bcq, &model_dir)?;
    cfg.write_snapshot(&model_dir, record("train", &[&data_dir], &model_dir))?;

    let model_path = model_dir.join(MODEL_FILE);
    let report = simulate_into(&cfg, &env, Some(&model), None, false)?;
    write_report(&sim_dir, &report)?;
    cfg.write_snapshot(&sim_dir, record("simulate", &[&model_path], &sim_dir))?;

    let report = evaluate_into(&cfg, &ds_read, Some(&model), None, false, MatchMode::Prefix)?;
    write_report(&eval_dir, &report)?;
    cfg.write_snapshot(&eval_dir, record("evaluate", &[&data_dir, &model_path], &eval_dir))?;

    cfg.write_snapshot(out, record("pipeline", &[], out))
}
