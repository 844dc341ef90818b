//! Run configuration: one JSON file, paths relative to the file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::{Diagnoser, LlmDiagnoser, RuleDiagnoser};
use crate::graph::{OperatorLibrary, WorkflowGraph};
use crate::harness::{
    read_dataset, Backend, ChatClient, DatasetInstance, HttpChatClient, RemoteBackend, RemoteConfig, SimWorldSpec,
    SimulatedBackend, Verifier,
};
use crate::optimizer::{optimize, Components, Hyperparams, OptimizationState, Splits, SuccessRateScorer};
use crate::propose::{LlmProposer, Proposer, RuleProposer};
use crate::report::{presplit, split_dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulated { world: PathBuf },
    Remote(RemoteConfig),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Helper {
    #[default]
    Rule,
    Llm,
}

fn default_operators() -> Vec<String> {
    vec!["base".into()]
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub graph: PathBuf,
    pub backend: BackendConfig,
    #[serde(default = "default_operators")]
    pub operators: Vec<String>,
    #[serde(default)]
    pub diagnoser: Helper,
    #[serde(default)]
    pub proposer: Helper,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default)]
    pub verifier: Verifier,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

impl RunConfig {
    /// Loads, resolves relative paths against the config's directory, and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = parse(path, &read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset);
        resolve(&mut cfg.graph);
        resolve(&mut cfg.out);
        if let BackendConfig::Simulated { world } = &mut cfg.backend {
            resolve(world);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut paths = vec![&self.dataset, &self.graph];
        if let BackendConfig::Simulated { world } = &self.backend {
            paths.push(world);
        }
        if let Some(p) = paths.into_iter().find(|p| !p.is_file()) {
            return Err(ConfigError::Invalid(format!("file not found: {}", p.display())));
        }
        let uses_llm = self.diagnoser == Helper::Llm || self.proposer == Helper::Llm;
        if uses_llm && !matches!(self.backend, BackendConfig::Remote(_)) {
            return Err(ConfigError::Invalid("llm diagnoser/proposer require a remote backend".into()));
        }
        if self.split.iter().any(|r| *r < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!("split ratios {:?} must sum to 1", self.split)));
        }
        OperatorLibrary::with_names(&self.operators).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.hyperparams().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Hyperparameters with the top-level seed applied.
    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            seed: self.seed,
            ..self.hyperparams.clone()
        }
    }

    pub fn load_graph(&self) -> Result<WorkflowGraph, ConfigError> {
        let g: WorkflowGraph = parse(&self.graph, &read(&self.graph)?)?;
        g.validate().map_err(|e| ConfigError::Invalid(format!("{}: {e}", self.graph.display())))?;
        Ok(g)
    }

    pub fn load_dataset(&self) -> Result<Vec<DatasetInstance>, ConfigError> {
        read_dataset(&self.dataset).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Dataset splits: the instances' own labels if complete, else a seeded split.
    pub fn splits(&self, instances: &[DatasetInstance]) -> Result<Splits, ConfigError> {
        match presplit(instances) {
            Some(s) => Ok(s),
            None => split_dataset(instances, self.split, self.seed).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }
}

/// Owned collaborators built from a config.
pub struct Runtime {
    pub backend: Box<dyn Backend>,
    pub diagnoser: Box<dyn Diagnoser>,
    pub proposer: Box<dyn Proposer>,
    pub library: OperatorLibrary,
    pub hyperparams: Hyperparams,
}

impl Runtime {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let mut client: Option<Arc<dyn ChatClient>> = None;
        let backend: Box<dyn Backend> = match &cfg.backend {
            BackendConfig::Simulated { world } => {
                let spec: SimWorldSpec = parse(world, &read(world)?)?;
                Box::new(SimulatedBackend::new(spec).map_err(|e| invalid(&e))?.with_verifier(cfg.verifier))
            }
            BackendConfig::Remote(rc) => {
                let c: Arc<dyn ChatClient> = Arc::new(HttpChatClient::new(rc.clone()).map_err(|e| invalid(&e))?);
                client = Some(c.clone());
                Box::new(RemoteBackend::new(c).with_verifier(cfg.verifier))
            }
        };
        let diagnoser: Box<dyn Diagnoser> = match (cfg.diagnoser, &client) {
            (Helper::Llm, Some(c)) => Box::new(LlmDiagnoser::new(c.clone())),
            _ => Box::new(RuleDiagnoser),
        };
        let proposer: Box<dyn Proposer> = match (cfg.proposer, &client) {
            (Helper::Llm, Some(c)) => Box::new(LlmProposer::new(c.clone())),
            _ => Box::new(RuleProposer),
        };
        Ok(Runtime {
            backend,
            diagnoser,
            proposer,
            library: OperatorLibrary::with_names(&cfg.operators).map_err(|e| invalid(&e))?,
            hyperparams: cfg.hyperparams(),
        })
    }

    pub fn run(&self, w0: &WorkflowGraph, splits: &Splits) -> Result<(WorkflowGraph, OptimizationState), ConfigError> {
        let parts = Components {
            backend: self.backend.as_ref(),
            diagnoser: self.diagnoser.as_ref(),
            proposer: self.proposer.as_ref(),
            library: self.library.clone(),
            embedder: self
                .hyperparams
                .hashing_embedder()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            scorer: &SuccessRateScorer,
        };
        optimize(w0, splits, &self.hyperparams, &parts).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
