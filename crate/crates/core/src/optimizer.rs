//! The outer refinement loop: collect failures, cluster them, repair the
//! densest mode with a verified edit, and repeat until validation scores
//! stop moving or the round budget runs out.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{cluster_quality, densest_mode, fit_gmm, GmmOptions, ModeSelection};
use crate::diagnosis::{distill, Diagnoser, DiagnosisOutcome, DEFAULT_CONFIDENCE_FLOOR};
use crate::graph::{Edit, OperatorLibrary, WorkflowGraph};
use crate::harness::{instance_seed, run_dataset, Backend, DatasetInstance, HarnessError, Trace};
use crate::propose::{
    estimate_with_sample, propose, select_edit, verification_sample, Proposer, DEFAULT_K, DEFAULT_N,
};
use crate::seed;
use crate::signature::{EmbedError, FailureSignature, HashingEmbedder, SemanticEmbedder, SignatureSpace, DEFAULT_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Candidate edits per round (besides identity).
    pub n: usize,
    /// Verification samples per candidate.
    pub k: usize,
    pub k_window: usize,
    pub eps_tol: f64,
    pub t_max: usize,
    pub dim: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub confidence_floor: f64,
    pub seed: u64,
    /// Convergence-aware stopping; when off, exactly `t_max` rounds run
    /// unless the pool empties.
    pub stopping: bool,
    pub w_struct: f64,
    /// Seed of the hashing embedder's hash family.
    pub embed_seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n: DEFAULT_N,
            k: DEFAULT_K,
            k_window: 5,
            eps_tol: 0.01,
            t_max: 20,
            dim: DEFAULT_DIM,
            k_min: 1,
            k_max: 10,
            confidence_floor: DEFAULT_CONFIDENCE_FLOOR,
            seed: 0,
            stopping: true,
            w_struct: 1.0,
            embed_seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: &str| Err(OptimizeError::Config(m.to_string()));
        if self.n == 0 || self.k == 0 || self.k_window == 0 || self.t_max == 0 {
            return bad("n, k, k_window and t_max must be at least 1");
        }
        if !(self.eps_tol > 0.0) {
            return bad("eps_tol must be positive");
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad("k range must satisfy 1 <= k_min <= k_max");
        }
        if !(0.0..=1.0).contains(&self.confidence_floor) {
            return bad("confidence_floor must be in [0, 1]");
        }
        if self.dim < crate::signature::MIN_DIM {
            return bad("embedding dimension is too small");
        }
        Ok(())
    }

    /// The default embedder for these settings.
    pub fn hashing_embedder(&self) -> Result<Arc<dyn SemanticEmbedder>, EmbedError> {
        Ok(Arc::new(HashingEmbedder::new(self.dim, self.embed_seed)?))
    }

    fn gmm_options(&self) -> GmmOptions {
        GmmOptions {
            k_min: self.k_min,
            k_max: self.k_max,
            ..GmmOptions::default()
        }
    }
}

/// True iff at least `k_window` scores exist and the population variance of
/// the last `k_window` is below `eps_tol`.
pub fn converged(scores: &[f64], k_window: usize, eps_tol: f64) -> bool {
    if k_window == 0 || scores.len() < k_window {
        return false;
    }
    let w = &scores[scores.len() - k_window..];
    let mean = w.iter().sum::<f64>() / k_window as f64;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k_window as f64;
    var < eps_tol
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<DatasetInstance>,
    pub validation: Vec<DatasetInstance>,
    pub test: Vec<DatasetInstance>,
}

/// Produces the validation score `g_t` for the graph after round `round`.
pub trait ValidationScorer: Sync {
    fn score(&self, round: usize, graph: &WorkflowGraph, validation: &[DatasetInstance], backend: &dyn Backend, seed: u64)
        -> (f64, u64);
}

/// Success rate on the validation split.
#[derive(Clone, Copy, Debug, Default)]
pub struct SuccessRateScorer;

impl ValidationScorer for SuccessRateScorer {
    fn score(&self, _: usize, graph: &WorkflowGraph, validation: &[DatasetInstance], backend: &dyn Backend, seed: u64) -> (f64, u64) {
        match run_dataset(graph, validation, backend, seed) {
            Ok(out) => (out.success_rate, out.cost_units),
            Err(_) => (0.0, 0),
        }
    }
}

/// Everything the loop calls out to.
pub struct Components<'a> {
    pub backend: &'a dyn Backend,
    pub diagnoser: &'a dyn Diagnoser,
    pub proposer: &'a dyn Proposer,
    pub library: OperatorLibrary,
    pub embedder: Arc<dyn SemanticEmbedder>,
    pub scorer: &'a dyn ValidationScorer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub instance_id: String,
    pub trace: Trace,
    pub diagnosis: DiagnosisOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub edit: String,
    pub v: f64,
    pub k_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub pool_size: usize,
    pub undiagnosable: usize,
    pub signatures: usize,
    pub train_failure_rate: f64,
    pub k_fit: Option<usize>,
    pub bic: Option<f64>,
    pub silhouette: Option<f64>,
    pub davies_bouldin: Option<f64>,
    pub mode_summary: Option<String>,
    pub mode_soft_mass: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub chosen_edit: String,
    pub chosen_v: Option<f64>,
    pub identity_v: Option<f64>,
    pub graph_version: u64,
    pub validation_score: f64,
    pub e0_accuracy: Option<f64>,
    pub cost_units: u64,
}

/// Artifacts of one round kept for export.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundArtifacts {
    pub pool: Vec<PoolEntry>,
    pub signatures: Vec<FailureSignature>,
    /// Registry width when the round's signatures were clustered.
    pub width: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoFailures,
    Converged,
    MaxRounds,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalScores {
    pub train: f64,
    pub validation: f64,
    pub test: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationState {
    pub rounds: Vec<RoundRecord>,
    pub validation_scores: Vec<f64>,
    pub e0_ids: Vec<String>,
    /// FNV-1a of the newline-joined E_0 ids; constant for the whole run.
    pub e0_hash: u64,
    /// Accuracy on E_0: round 0 baseline, then one entry per round.
    pub e0_trajectory: Vec<f64>,
    pub artifacts: Vec<RoundArtifacts>,
    pub registry_json: String,
    pub graph: WorkflowGraph,
    pub initial_graph: WorkflowGraph,
    pub stop_reason: StopReason,
    pub final_scores: FinalScores,
    pub cost_units: u64,
    pub hyperparams: Hyperparams,
}

pub fn e0_hash(ids: &[String]) -> u64 {
    seed::fnv1a64(ids.join("\n").as_bytes())
}

/// Fraction of the E_0 instances the graph now solves.
pub fn eval_fixed_set(
    graph: &WorkflowGraph,
    e0: &[&DatasetInstance],
    backend: &dyn Backend,
    seed: u64,
) -> (f64, u64) {
    if e0.is_empty() {
        return (0.0, 0);
    }
    let traces: Vec<Trace> = e0
        .par_iter()
        .map(|x| backend.execute(graph, x, instance_seed(seed, &x.id)))
        .collect();
    let ok = traces.iter().filter(|t| t.success).count();
    (ok as f64 / e0.len() as f64, traces.iter().map(|t| t.cost_units).sum())
}

/// Executes the graph on the training instances and diagnoses each failure.
pub fn populate_pool(
    graph: &WorkflowGraph,
    train: &[DatasetInstance],
    backend: &dyn Backend,
    diagnoser: &dyn Diagnoser,
    confidence_floor: f64,
    seed: u64,
) -> Result<(Vec<PoolEntry>, u64), HarnessError> {
    let out = run_dataset(graph, train, backend, seed)?;
    let pool = out
        .failures
        .into_par_iter()
        .map(|trace| PoolEntry {
            instance_id: trace.instance_id.clone(),
            diagnosis: distill(&trace, diagnoser, confidence_floor),
            trace,
        })
        .collect();
    Ok((pool, out.cost_units))
}

/// Round-stable execution seeds derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub train: u64,
    pub validation: u64,
    pub test: u64,
    pub e0: u64,
}

impl RunSeeds {
    pub fn new(master: u64) -> Self {
        RunSeeds {
            train: seed::derive(master, "train"),
            validation: seed::derive(master, "validation"),
            test: seed::derive(master, "test"),
            // E_0 is re-run under the exact conditions that made it fail, so
            // its accuracy moves only when the graph changes.
            e0: seed::derive(master, "train"),
        }
    }

    fn round(master: u64, t: usize) -> u64 {
        seed::derive_index(seed::derive(master, "round"), t as u64)
    }
}

/// Runs the loop from `w0`. Deterministic per `hp.seed` on a pure backend.
pub fn optimize(
    w0: &WorkflowGraph,
    splits: &Splits,
    hp: &Hyperparams,
    parts: &Components<'_>,
) -> Result<(WorkflowGraph, OptimizationState), OptimizeError> {
    hp.validate()?;
    w0.validate()
        .map_err(|e| OptimizeError::Config(format!("initial graph is invalid: {e}")))?;
    if splits.train.is_empty() {
        return Err(HarnessError::EmptyInstances.into());
    }
    let seeds = RunSeeds::new(hp.seed);
    let by_id: BTreeMap<&str, &DatasetInstance> = splits.train.iter().map(|x| (x.id.as_str(), x)).collect();
    let mut space = SignatureSpace::new(parts.embedder.clone(), hp.w_struct);

    let mut graph = w0.clone();
    let mut rounds = Vec::new();
    let mut artifacts = Vec::new();
    let mut scores = Vec::new();
    let mut e0_ids: Vec<String> = Vec::new();
    let mut e0_trajectory = Vec::new();
    let mut cost = 0u64;
    let mut stop_reason = StopReason::MaxRounds;

    for t in 0..hp.t_max {
        let round_seed = RunSeeds::round(hp.seed, t);
        let (pool, c) = populate_pool(&graph, &splits.train, parts.backend, parts.diagnoser, hp.confidence_floor, seeds.train)?;
        cost += c;
        if t == 0 {
            e0_ids = pool.iter().map(|p| p.instance_id.clone()).collect();
            if !e0_ids.is_empty() {
                let e0: Vec<&DatasetInstance> = e0_ids.iter().map(|id| by_id[id.as_str()]).collect();
                let (acc, c) = eval_fixed_set(&graph, &e0, parts.backend, seeds.e0);
                cost += c;
                e0_trajectory.push(acc);
            }
        }
        if pool.is_empty() {
            stop_reason = StopReason::NoFailures;
            break;
        }

        // Signatures for the diagnosable part of the pool.
        let mut sigs = Vec::new();
        let mut undiagnosable = 0;
        for entry in &pool {
            match entry.diagnosis.diagnosis().map(|d| space.signature(&entry.instance_id, d)) {
                Some(Ok(s)) => sigs.push(s),
                _ => undiagnosable += 1,
            }
        }
        let width = space.registry.width();
        let mut record = RoundRecord {
            round: t + 1,
            pool_size: pool.len(),
            undiagnosable,
            signatures: sigs.len(),
            train_failure_rate: pool.len() as f64 / splits.train.len() as f64,
            k_fit: None,
            bic: None,
            silhouette: None,
            davies_bouldin: None,
            mode_summary: None,
            mode_soft_mass: None,
            candidates: Vec::new(),
            chosen_edit: Edit::identity().to_string(),
            chosen_v: None,
            identity_v: None,
            graph_version: graph.version(),
            validation_score: 0.0,
            e0_accuracy: None,
            cost_units: 0,
        };

        let mut labels = Vec::new();
        let mode: Option<ModeSelection> = match sigs.len() {
            0 => None,
            1 => Some(ModeSelection::single(&sigs[0])),
            _ => {
                let data = space.matrix(&sigs);
                let fit = fit_gmm(&data, &hp.gmm_options(), seed::derive(round_seed, "gmm"))
                    .expect("at least two signatures of equal width");
                let sel = densest_mode(&fit.model, &data, &sigs).expect("dimensions match");
                let q = cluster_quality(&data, &sel.labels, None);
                record.k_fit = Some(fit.model.k_fit);
                record.bic = Some(fit.model.bic);
                record.silhouette = q.silhouette;
                record.davies_bouldin = q.davies_bouldin;
                Some(sel)
            }
        };

        if let Some(mode) = mode {
            labels = mode.labels.clone();
            record.mode_summary = Some(mode.summary.text());
            record.mode_soft_mass = Some(mode.soft_mass);
            let members: Vec<&DatasetInstance> = mode
                .members
                .iter()
                .map(|&i| by_id[sigs[i].instance_id.as_str()])
                .collect();
            let set = propose(
                &mode.summary,
                &graph,
                &parts.library,
                hp.n,
                parts.proposer,
                seed::derive(round_seed, "propose"),
            );
            let ids: Vec<&str> = members.iter().map(|m| m.id.as_str()).collect();
            let sample = verification_sample(&ids, hp.k, seed::derive(round_seed, "verify"));
            let utils: Vec<_> = set
                .candidates
                .par_iter()
                .map(|e| estimate_with_sample(&graph, e, &parts.library, &members, &sample, parts.backend))
                .collect();
            cost += utils.iter().map(|u| u.cost_units).sum::<u64>();
            let best = select_edit(&set.candidates, &utils);
            record.candidates = set
                .candidates
                .iter()
                .zip(&utils)
                .map(|(e, u)| CandidateRecord {
                    edit: e.to_string(),
                    v: u.v,
                    k_used: u.k_used,
                })
                .collect();
            record.identity_v = Some(utils[0].v);
            record.chosen_v = Some(utils[best].v);
            let chosen = &set.candidates[best];
            record.chosen_edit = chosen.to_string();
            if !chosen.is_identity() {
                graph = parts.library.apply(&graph, chosen).expect("candidates are pre-validated");
            }
        }
        record.graph_version = graph.version();

        let (g, c) = parts
            .scorer
            .score(t + 1, &graph, &splits.validation, parts.backend, seeds.validation);
        cost += c;
        record.validation_score = g;
        scores.push(g);
        if !e0_ids.is_empty() {
            let e0: Vec<&DatasetInstance> = e0_ids.iter().map(|id| by_id[id.as_str()]).collect();
            let (acc, c) = eval_fixed_set(&graph, &e0, parts.backend, seeds.e0);
            cost += c;
            record.e0_accuracy = Some(acc);
            e0_trajectory.push(acc);
        }
        record.cost_units = cost;
        rounds.push(record);
        artifacts.push(RoundArtifacts {
            pool,
            signatures: sigs,
            width,
            labels,
        });
        if hp.stopping && converged(&scores, hp.k_window, hp.eps_tol) {
            stop_reason = StopReason::Converged;
            break;
        }
    }

    let rate = |xs: &[DatasetInstance], s: u64| run_dataset(&graph, xs, parts.backend, s).ok();
    let train = rate(&splits.train, seeds.train).expect("train split is nonempty");
    let val = rate(&splits.validation, seeds.validation);
    let test = rate(&splits.test, seeds.test);
    cost += train.cost_units + val.as_ref().map_or(0, |o| o.cost_units) + test.as_ref().map_or(0, |o| o.cost_units);
    let final_scores = FinalScores {
        train: train.success_rate,
        validation: val.map_or(0.0, |o| o.success_rate),
        test: test.map(|o| o.success_rate),
    };

    let state = OptimizationState {
        rounds,
        validation_scores: scores,
        e0_hash: e0_hash(&e0_ids),
        e0_ids,
        e0_trajectory,
        artifacts,
        registry_json: space.registry.to_json(),
        graph: graph.clone(),
        initial_graph: w0.clone(),
        stop_reason,
        final_scores,
        cost_units: cost,
        hyperparams: hp.clone(),
    };
    Ok((graph, state))
}
