//! Files passed between subcommands.

use std::io::BufRead;
use std::path::Path;

use promo_core::baselines::{ExpertPolicy, LrGreedy, RewardModel};
use promo_core::bcq::BcqAgent;
use promo_core::eval::EvalReport;
use promo_core::model::ActionSet;
use promo_core::policy::{Cheapest, Greedy, Policy, QSource, UniformRandom};
use promo_core::money::Cents;
use serde::{Deserialize, Serialize};

use crate::config::{read_to_string, write};
use crate::error::CliError;

pub const MODEL_FILE: &str = "model.json";
pub const TRAINING_LOG_FILE: &str = "training-log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const DAYS_FILE: &str = "days.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.csv";
pub const DECISIONS_FILE: &str = "decisions.jsonl";

/// A trained policy tagged with its kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum ModelFile {
    Bcq { agent: BcqAgent },
    LrGreedy { model: RewardModel },
    LrLp { model: RewardModel },
    Expert { expert: ExpertPolicy },
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::input(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        write(path, serde_json::to_string(self).expect("model serializes").as_bytes())
    }

    pub fn actions(&self) -> &ActionSet {
        match self {
            ModelFile::Bcq { agent } => &agent.actions,
            ModelFile::LrGreedy { model } | ModelFile::LrLp { model } => &model.actions,
            ModelFile::Expert { expert } => &expert.actions,
        }
    }

    /// Per-customer scores for budgeted allocation, if this policy has them.
    pub fn q_source(&self) -> Option<&dyn QSource> {
        match self {
            ModelFile::Bcq { agent } => Some(agent),
            ModelFile::LrGreedy { model } | ModelFile::LrLp { model } => Some(model),
            ModelFile::Expert { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Uniform,
    Cheapest,
}

/// How a model or baseline makes decisions.
pub enum Decider<'a> {
    Direct(Box<dyn Policy + 'a>),
    Budgeted(&'a dyn QSource),
}

struct Borrowed<'a, P: Policy>(&'a P);

impl<P: Policy> Policy for Borrowed<'_, P> {
    fn act(&self, state: &promo_core::model::StateVector, rng: &mut dyn rand::RngCore) -> usize {
        self.0.act(state, rng)
    }
}

/// BCQ and LR-LP allocate under the budget unless `unconstrained`, in which
/// case they act greedily on their scores.
pub fn decider<'a>(
    model: Option<&'a ModelFile>,
    baseline: Option<Baseline>,
    actions: &ActionSet,
    unconstrained: bool,
) -> Decider<'a> {
    match (model, baseline) {
        (Some(ModelFile::Bcq { agent }), _) if unconstrained => Decider::Direct(Box::new(Borrowed(agent))),
        (Some(ModelFile::LrLp { model }), _) if unconstrained => Decider::Direct(Box::new(Greedy { source: model })),
        (Some(ModelFile::Bcq { agent }), _) => Decider::Budgeted(agent),
        (Some(ModelFile::LrLp { model }), _) => Decider::Budgeted(model),
        (Some(ModelFile::LrGreedy { model }), _) => Decider::Direct(Box::new(LrGreedy(model))),
        (Some(ModelFile::Expert { expert }), _) => Decider::Direct(Box::new(Borrowed(expert))),
        (None, Some(Baseline::Cheapest)) => Decider::Direct(Box::new(Cheapest { actions: actions.clone() })),
        (None, _) => Decider::Direct(Box::new(UniformRandom { actions: actions.clone() })),
    }
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join(REPORT_FILE), json.as_bytes())?;
    write(&dir.join(DAYS_FILE), report.days_csv().as_bytes())?;
    write(&dir.join(LAMBDA_FILE), report.lambda_csv().as_bytes())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a q-matrix: a header row, then one row per customer with one cell
/// per action; an empty cell marks an action the customer cannot receive.
pub fn read_q_matrix(path: &Path, m: usize) -> Result<Vec<Vec<Option<f64>>>, CliError> {
    crate::config::require(path)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::input(path, e.to_string()))?;
    let width = reader.headers().map_err(|e| CliError::input(path, e.to_string()))?.len();
    if width != m {
        return Err(CliError::input(path, format!("{width} columns but the action set has {m} actions")));
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::input(path, e.to_string()))?;
        let row = record
            .iter()
            .map(|cell| {
                let cell = cell.trim();
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(Some)
                    .ok_or_else(|| CliError::input(path, format!("row {}: bad value {cell:?}", k + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// One line of a stream-mode input file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamEvent {
    pub ts: u64,
    pub q: Vec<Option<f64>>,
}

pub fn read_stream(path: &Path, m: usize) -> Result<Vec<StreamEvent>, CliError> {
    crate::config::require(path)?;
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut events: Vec<StreamEvent> = Vec::new();
    for (k, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let event: StreamEvent =
            serde_json::from_str(&line).map_err(|e| CliError::input(path, format!("line {}: {e}", k + 1)))?;
        if event.q.len() != m || event.q.iter().all(Option::is_none) {
            return Err(CliError::input(path, format!("line {}: expected {m} scores with at least one present", k + 1)));
        }
        if events.last().is_some_and(|prev| prev.ts > event.ts) {
            return Err(CliError::input(path, format!("line {}: timestamps must not decrease", k + 1)));
        }
        events.push(event);
    }
    Ok(events)
}

#[derive(Debug, Serialize)]
pub struct AssignmentRow {
    pub customer: usize,
    pub action: usize,
    pub cost_cents: Cents,
    pub q: f64,
    pub lambda: f64,
    pub objective: f64,
    pub total_cost_cents: Cents,
}

#[derive(Debug, Serialize)]
pub struct Decision {
    pub ts: u64,
    pub action: usize,
    pub cost_cents: Cents,
    pub lambda: f64,
}
