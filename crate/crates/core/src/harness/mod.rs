//! Executing workflows on dataset instances.
//!
//! A [`Backend`] turns `(graph, instance, seed)` into a [`Trace`]. The
//! simulated backend is a pure function of its inputs; the remote backend
//! talks to a chat-completions endpoint. Either way, backend trouble becomes
//! an error-status trace rather than an `Err`.

mod remote;
mod sim;

pub use remote::{
    parse_reply, ChatClient, ChatMessage, ChatReply, ChatRequest, HttpChatClient, RemoteBackend, RemoteConfig,
    RemoteError, BACKEND_ERROR_PREFIX,
};
pub use sim::{PlantedMode, RepairPattern, RepairRule, SimWorldSpec, SimulatedBackend, Trigger, WorldError};

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, WorkflowGraph};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInstance {
    pub id: String,
    pub input: String,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fixed_set: bool,
}

impl DatasetInstance {
    pub fn new(id: impl Into<String>, input: impl Into<String>, ground_truth: impl Into<String>) -> Self {
        DatasetInstance {
            id: id.into(),
            input: input.into(),
            ground_truth: ground_truth.into(),
            split: None,
            fixed_set: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: NodeId,
    pub input: String,
    pub output: String,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub error_message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub instance_id: String,
    pub records: Vec<NodeRecord>,
    pub final_output: String,
    pub success: bool,
    pub seed: u64,
    /// Node executions (simulated) or tokens (remote) spent producing the trace.
    pub cost_units: u64,
}

impl Trace {
    /// The earliest error-status record in execution order.
    pub fn first_error(&self) -> Option<&NodeRecord> {
        self.records.iter().find(|r| r.status == NodeStatus::Error)
    }
}

/// Output checker. Exact match after normalization unless a numeric
/// tolerance is configured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verifier {
    #[serde(default)]
    pub numeric_tolerance: Option<f64>,
}

impl Verifier {
    pub fn check(&self, output: &str, y: &str) -> bool {
        if verify(output, y) {
            return true;
        }
        match self.numeric_tolerance {
            Some(tol) => match (normalize(output).parse::<f64>(), normalize(y).parse::<f64>()) {
                (Ok(a), Ok(b)) => (a - b).abs() <= tol,
                _ => false,
            },
            None => false,
        }
    }
}

/// Trim, lowercase, collapse internal whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn verify(output: &str, y: &str) -> bool {
    normalize(output) == normalize(y)
}

/// Something that can execute a workflow on one instance.
pub trait Backend: Sync {
    fn execute(&self, graph: &WorkflowGraph, instance: &DatasetInstance, seed: u64) -> Trace;
}

/// Seed for one instance within a run; independent of instance order.
pub fn instance_seed(run_seed: u64, instance_id: &str) -> u64 {
    seed::derive(run_seed, instance_id)
}

pub fn execute(backend: &dyn Backend, graph: &WorkflowGraph, instance: &DatasetInstance, seed: u64) -> Trace {
    backend.execute(graph, instance, seed)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub success_rate: f64,
    pub successes: usize,
    pub total: usize,
    pub failures: Vec<Trace>,
    pub cost_units: u64,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no instances to run")]
    EmptyInstances,
    #[error("dataset io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error at {path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate instance id {0}")]
    DuplicateId(String),
}

/// Runs every instance (in parallel) and collects the failures in input order.
pub fn run_dataset(
    graph: &WorkflowGraph,
    instances: &[DatasetInstance],
    backend: &dyn Backend,
    seed: u64,
) -> Result<RunOutcome, HarnessError> {
    if instances.is_empty() {
        return Err(HarnessError::EmptyInstances);
    }
    let traces: Vec<Trace> = instances
        .par_iter()
        .map(|x| backend.execute(graph, x, instance_seed(seed, &x.id)))
        .collect();
    let cost_units = traces.iter().map(|t| t.cost_units).sum();
    let successes = traces.iter().filter(|t| t.success).count();
    let failures: Vec<Trace> = traces.into_iter().filter(|t| !t.success).collect();
    Ok(RunOutcome {
        success_rate: successes as f64 / instances.len() as f64,
        successes,
        total: instances.len(),
        failures,
        cost_units,
    })
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetInstance>, HarnessError> {
    let p = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| HarnessError::Io { path: p.clone(), source })?;
    let mut out: Vec<DatasetInstance> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: DatasetInstance = serde_json::from_str(&line).map_err(|source| HarnessError::Parse {
            path: p.clone(),
            line: i + 1,
            source,
        })?;
        if !seen.insert(inst.id.clone()) {
            return Err(HarnessError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, instances: &[DatasetInstance]) -> Result<(), HarnessError> {
    let p = path.display().to_string();
    let io = |source| HarnessError::Io { path: p.clone(), source };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serialization is infallible");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verify_normalizes() {
        assert!(verify("  42 ", "42"));
        assert!(!verify("43", "42"));
        assert!(verify("The  Answer\tIS x", "the answer is x"));
        assert!(!verify("", "0"));
    }

    #[test]
    fn numeric_tolerance_is_opt_in() {
        assert!(!Verifier::default().check("3.1400", "3.14"));
        let v = Verifier {
            numeric_tolerance: Some(1e-6),
        };
        assert!(v.check("3.1400", "3.14"));
        assert!(!v.check("3.15", "3.14"));
        assert!(!v.check("pi", "3.14"));
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut a = DatasetInstance::new("a", "1+1", "2");
        a.split = Some(Split::Validation);
        let data = vec![a, DatasetInstance::new("b", "2+2", "4")];
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"split\":\"validation\""));
    }

    #[test]
    fn dataset_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = vec![DatasetInstance::new("a", "x", "y"), DatasetInstance::new("a", "x", "y")];
        write_dataset(&path, &data).unwrap();
        assert!(matches!(read_dataset(&path), Err(HarnessError::DuplicateId(_))));
    }
}
