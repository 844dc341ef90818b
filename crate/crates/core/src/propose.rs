//! Candidate edits for a failure mode, and Monte-Carlo verification of them.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ModeSummary;
use crate::graph::{edit_space_sample, Arg, Edit, NodeId, NodeKind, OperatorLibrary, WorkflowGraph};
use crate::harness::{Backend, ChatClient, ChatMessage, DatasetInstance};
use crate::seed;

pub const DEFAULT_N: usize = 5;
pub const DEFAULT_K: usize = 10;

/// Prompt sent to the proposing model.
pub const PROPOSER_TEMPLATE: &str = "You are a workflow refinement expert.\nFailure mode summary: [FAILURE_MODE_SUMMARY].\nOperator library: [OPERATOR_LIBRARY_DEFINITION].\n\nPropose N=5 diverse graph edits using only these operators.\nOutput as a list of JSON objects: [{\"edit\": \"OperatorName(arg1, arg2)\", \"explanation\": \"brief_reason\"}].";

/// Raw edit suggestions for a mode. Validity is enforced by [`propose`].
pub trait Proposer: Send + Sync {
    fn name(&self) -> &str;
    fn suggest(
        &self,
        mode: &ModeSummary,
        graph: &WorkflowGraph,
        library: &OperatorLibrary,
        n: usize,
        seed: u64,
    ) -> Vec<Edit>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Identity first, then at most `n` distinct applicable edits.
    pub candidates: Vec<Edit>,
    pub summary: String,
}

/// Asks the proposer, keeps applicable distinct edits (at most `n`), and puts
/// the identity edit in front.
pub fn propose(
    mode: &ModeSummary,
    graph: &WorkflowGraph,
    library: &OperatorLibrary,
    n: usize,
    proposer: &dyn Proposer,
    seed: u64,
) -> CandidateSet {
    let mut seen = BTreeSet::from([Edit::identity().to_string()]);
    let mut candidates = vec![Edit::identity()];
    for e in proposer.suggest(mode, graph, library, n, seed) {
        if candidates.len() > n {
            break;
        }
        if !e.is_identity() && library.apply(graph, &e).is_ok() && seen.insert(e.to_string()) {
            candidates.push(e);
        }
    }
    CandidateSet {
        candidates,
        summary: mode.text(),
    }
}

/// Deterministic edits aimed at the mode's modal node, padded with a seeded
/// sample of the edit space.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleProposer;

impl RuleProposer {
    fn targeted(mode: &ModeSummary, graph: &WorkflowGraph, library: &OperatorLibrary) -> Vec<Edit> {
        let v = NodeId::new(mode.node_id.clone());
        let Some(node) = graph.node(&v) else {
            return Vec::new();
        };
        let focus = mode.top_tokens.join(", ");
        let mut out = Vec::new();
        if node.kind.has_prompt() {
            let text = format!("{} Pay particular attention to: {focus}.", node.prompt);
            out.push(Edit::new("RevisePrompt", vec![Arg::Node(v.clone()), Arg::Text(text)]));
        }
        let children = graph.children(&v);
        if let Some(&child) = children.first() {
            out.push(Edit::new(
                "InsertNode",
                vec![
                    Arg::Node(v.clone()),
                    Arg::Node(child.clone()),
                    Arg::Kind(NodeKind::VerifyStep),
                    Arg::Text(format!("Verify the output of {v}: {focus}")),
                ],
            ));
        }
        if library.contains("AddVerifierNode") && !children.is_empty() {
            out.push(Edit::new(
                "AddVerifierNode",
                vec![Arg::Node(v.clone()), Arg::Text(format!("no {focus}"))],
            ));
        }
        if library.contains("AddExceptionHandler") {
            let exception = mode.top_tokens.first().cloned().unwrap_or_else(|| "error".into());
            out.push(Edit::new("AddExceptionHandler", vec![Arg::Node(v.clone()), Arg::Text(exception)]));
        }
        if library.contains("InsertPreconditionCheck") {
            if let Some(&parent) = graph.parents(&v).first() {
                out.push(Edit::new(
                    "InsertPreconditionCheck",
                    vec![
                        Arg::Node(parent.clone()),
                        Arg::Node(v.clone()),
                        Arg::Text(format!("input to {v} is free of: {focus}")),
                    ],
                ));
            }
        }
        out
    }
}

impl Proposer for RuleProposer {
    fn name(&self) -> &str {
        "rule"
    }

    fn suggest(
        &self,
        mode: &ModeSummary,
        graph: &WorkflowGraph,
        library: &OperatorLibrary,
        n: usize,
        seed: u64,
    ) -> Vec<Edit> {
        let mut out = Self::targeted(mode, graph, library);
        out.extend(edit_space_sample(graph, library, n + 1, seed).into_iter().skip(1));
        out
    }
}

/// Fills the proposer template and parses the JSON list in the reply.
pub struct LlmProposer {
    client: Arc<dyn ChatClient>,
}

impl LlmProposer {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        LlmProposer { client }
    }

    pub fn prompt(summary: &str, library: &OperatorLibrary) -> String {
        PROPOSER_TEMPLATE
            .replace("[FAILURE_MODE_SUMMARY]", summary)
            .replace("[OPERATOR_LIBRARY_DEFINITION]", &library.definition())
    }
}

#[derive(Deserialize)]
struct Suggestion {
    edit: String,
}

/// Edits parsed from a `[{"edit": .., "explanation": ..}]` reply; entries that
/// do not parse against the library are dropped.
pub fn parse_proposer_reply(text: &str, library: &OperatorLibrary) -> Vec<Edit> {
    let text = text.trim();
    let list: Option<Vec<serde_json::Value>> = serde_json::from_str(text).ok().or_else(|| {
        let start = text.find('[')?;
        let end = text.rfind(']')?;
        serde_json::from_str(text.get(start..=end)?).ok()
    });
    list.unwrap_or_default()
        .into_iter()
        .filter_map(|v| serde_json::from_value::<Suggestion>(v).ok())
        .filter_map(|s| library.parse_edit(&s.edit).ok())
        .collect()
}

impl Proposer for LlmProposer {
    fn name(&self) -> &str {
        "llm"
    }

    fn suggest(
        &self,
        mode: &ModeSummary,
        _graph: &WorkflowGraph,
        library: &OperatorLibrary,
        _n: usize,
        _seed: u64,
    ) -> Vec<Edit> {
        let prompt = Self::prompt(&mode.text(), library);
        match self.client.complete(&[ChatMessage::user(prompt)]) {
            Ok(reply) => parse_proposer_reply(&reply.content, library),
            Err(_) => Vec::new(),
        }
    }
}

/// Instances and execution seeds shared by every candidate in a round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerificationSample {
    pub indices: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// `min(k, members)` members drawn uniformly without replacement, each paired
/// with a fresh execution seed.
pub fn verification_sample(member_ids: &[&str], k: usize, seed: u64) -> VerificationSample {
    let m = k.min(member_ids.len());
    let mut rng = seed::rng(seed::derive(seed, "verification_sample"));
    let indices: Vec<usize> = index::sample(&mut rng, member_ids.len(), m).into_vec();
    let seeds = indices
        .iter()
        .enumerate()
        .map(|(j, &i)| seed::derive_index(seed::derive(seed, member_ids[i]), j as u64))
        .collect();
    VerificationSample { indices, seeds }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate {
    pub edit: Edit,
    pub v: f64,
    pub k_used: usize,
    pub outcomes: Vec<bool>,
    pub sample_ids: Vec<String>,
    #[serde(default)]
    pub cost_units: u64,
}

/// Runs `graph ⊕ edit` on the sampled members and reports the success ratio.
/// An edit that fails to apply scores zero on every sample.
pub fn estimate_with_sample(
    graph: &WorkflowGraph,
    edit: &Edit,
    library: &OperatorLibrary,
    members: &[&DatasetInstance],
    sample: &VerificationSample,
    backend: &dyn Backend,
) -> UtilityEstimate {
    let edited = library.apply(graph, edit).ok();
    let runs: Vec<(bool, u64)> = sample
        .indices
        .par_iter()
        .zip(&sample.seeds)
        .map(|(&i, &s)| match &edited {
            Some(g) => {
                let t = backend.execute(g, members[i], s);
                (t.success, t.cost_units)
            }
            None => (false, 0),
        })
        .collect();
    let outcomes: Vec<bool> = runs.iter().map(|r| r.0).collect();
    let k_used = outcomes.len();
    let hits = outcomes.iter().filter(|&&b| b).count();
    UtilityEstimate {
        edit: edit.clone(),
        v: if k_used == 0 { 0.0 } else { hits as f64 / k_used as f64 },
        k_used,
        outcomes,
        sample_ids: sample.indices.iter().map(|&i| members[i].id.clone()).collect(),
        cost_units: runs.iter().map(|r| r.1).sum(),
    }
}

pub fn estimate_utility(
    graph: &WorkflowGraph,
    edit: &Edit,
    library: &OperatorLibrary,
    members: &[&DatasetInstance],
    k: usize,
    backend: &dyn Backend,
    seed: u64,
) -> UtilityEstimate {
    let ids: Vec<&str> = members.iter().map(|m| m.id.as_str()).collect();
    let sample = verification_sample(&ids, k, seed);
    estimate_with_sample(graph, edit, library, members, &sample, backend)
}

/// Index of the best candidate: highest V, ties to identity, then lowest index.
pub fn select_edit(candidates: &[Edit], utilities: &[UtilityEstimate]) -> usize {
    assert_eq!(candidates.len(), utilities.len(), "one utility per candidate");
    let best = utilities.iter().map(|u| u.v).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..utilities.len()).filter(|&i| utilities[i].v == best).collect();
    tied.iter()
        .copied()
        .find(|&i| candidates[i].is_identity())
        .unwrap_or(tied[0])
}
