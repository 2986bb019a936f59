//! On-disk dataset layout: a directory holding `manifest.json` and one or
//! more append-only JSONL files with one transition per line.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActionSet, Dataset, StateVector, Trajectory, Transition};
use crate::money::Cents;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}: unsupported manifest version {version}")]
    Version { path: PathBuf, version: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetIoError + '_ {
    move |source| DatasetIoError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub actions: ActionSet,
    pub files: Vec<String>,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub user_id: u64,
    pub t: u32,
    pub state: Vec<f64>,
    pub day_in_cycle: u8,
    pub bonuses_collected: u8,
    pub action_index: usize,
    pub reward: u8,
    pub cost_cents: i64,
    pub done: bool,
}

impl From<&Transition> for TransitionRecord {
    fn from(tr: &Transition) -> Self {
        TransitionRecord {
            user_id: tr.user_id,
            t: tr.t,
            state: tr.state.features.clone(),
            day_in_cycle: tr.state.day_in_cycle,
            bonuses_collected: tr.state.bonuses_collected,
            action_index: tr.action_index,
            reward: tr.reward,
            cost_cents: tr.cost.0,
            done: tr.done,
        }
    }
}

impl TransitionRecord {
    fn state(&self) -> StateVector {
        StateVector {
            features: self.state.clone(),
            day_in_cycle: self.day_in_cycle,
            bonuses_collected: self.bonuses_collected,
        }
    }
}

/// Appends trajectories to a dataset directory.
pub struct DatasetWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl DatasetWriter {
    /// Creates the directory and manifest and opens the first part file.
    pub fn create(dir: &Path, d: usize, horizon: usize, actions: &ActionSet) -> Result<Self, DatasetIoError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let part = "part-00000.jsonl".to_string();
        let manifest = Manifest { version: MANIFEST_VERSION, d, horizon, actions: actions.clone(), files: vec![part.clone()] };
        let mpath = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, body + "\n").map_err(io_err(&mpath))?;
        let path = dir.join(part);
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(io_err(&path))?;
        Ok(DatasetWriter { path, out: BufWriter::new(file) })
    }

    pub fn append(&mut self, traj: &Trajectory) -> Result<(), DatasetIoError> {
        for tr in &traj.transitions {
            let line = serde_json::to_string(&TransitionRecord::from(tr)).expect("record serializes");
            writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), DatasetIoError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetIoError> {
    let mut w = DatasetWriter::create(dir, ds.d, ds.horizon, &ds.actions)?;
    for traj in &ds.trajectories {
        w.append(traj)?;
    }
    w.finish()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetIoError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| DatasetIoError::Json { path: path.clone(), line: source.line(), source })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DatasetIoError::Version { path, version: manifest.version });
    }
    Ok(manifest)
}

/// Reads a dataset directory. Lines are grouped per user in file order; a
/// user's trajectory ends at a `done` line, and each non-terminal step's
/// `next_state` is the state of that user's following line.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetIoError> {
    let manifest = read_manifest(dir)?;
    let mut records: Vec<TransitionRecord> = Vec::new();
    for name in &manifest.files {
        let path = dir.join(name);
        let file = File::open(&path).map_err(io_err(&path))?;
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|source| DatasetIoError::Json { path: path.clone(), line: k + 1, source })?;
            records.push(rec);
        }
    }

    // Per-user open trajectory, keyed to its slot in `trajectories`.
    let mut open: HashMap<u64, usize> = HashMap::new();
    let mut pending: Vec<Vec<TransitionRecord>> = Vec::new();
    for rec in records {
        let slot = match open.get(&rec.user_id) {
            Some(&slot) => slot,
            None => {
                pending.push(Vec::new());
                open.insert(rec.user_id, pending.len() - 1);
                pending.len() - 1
            }
        };
        let done = rec.done;
        let uid = rec.user_id;
        pending[slot].push(rec);
        if done {
            open.remove(&uid);
        }
    }

    let trajectories = pending
        .into_iter()
        .map(|recs| {
            let transitions = recs
                .iter()
                .enumerate()
                .map(|(k, rec)| Transition {
                    user_id: rec.user_id,
                    t: rec.t,
                    state: rec.state(),
                    action_index: rec.action_index,
                    reward: rec.reward,
                    cost: Cents(rec.cost_cents),
                    next_state: if rec.done { None } else { recs.get(k + 1).map(TransitionRecord::state) },
                    done: rec.done,
                })
                .collect();
            Trajectory { transitions }
        })
        .collect();

    Ok(Dataset { d: manifest.d, horizon: manifest.horizon, actions: manifest.actions, trajectories })
}
