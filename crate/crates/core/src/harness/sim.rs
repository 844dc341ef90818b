//! Simulated backend: a desk-scale stand-in for stochastic LLM failures.
//!
//! A world plants failure modes at graph locations. A mode fires at the first
//! node in topological order that matches its trigger, with the mode's
//! probability. Repair rules describe graph shapes (a prompt phrase, a verifier
//! after a node, ...) that neutralize a mode; the backend inspects the graph it
//! is given, so an edit repairs a mode exactly when it produces such a shape.
//!
//! All random draws are keyed by `(instance seed, mode id)`, never by graph
//! shape, so two graphs see the same noise and differ only where their
//! structure differs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, DatasetInstance, NodeRecord, NodeStatus, Trace, Verifier};
use crate::graph::{Node, NodeId, NodeKind, WorkflowGraph};
use crate::seed;

/// Where a planted mode can fire.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    /// Fire only at this node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    /// Fire only at nodes of this kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<NodeKind>,
    /// Fire only if the (lowercased) input contains every one of these.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_contains: Vec<String>,
}

impl Trigger {
    pub fn matches(&self, node: &Node, instance: &DatasetInstance) -> bool {
        if self.node.as_ref().is_some_and(|n| n != &node.id) {
            return false;
        }
        if self.kind.is_some_and(|k| k != node.kind) {
            return false;
        }
        let input = instance.input.to_lowercase();
        self.input_contains
            .iter()
            .all(|t| input.contains(&t.to_lowercase()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedMode {
    pub mode_id: String,
    pub trigger: Trigger,
    pub probability: f64,
    /// Error message; `{node}`, `{instance}` and `{input}` are substituted.
    pub message: String,
}

impl PlantedMode {
    pub fn render(&self, node: &NodeId, instance: &DatasetInstance) -> String {
        self.message
            .replace("{node}", node.as_str())
            .replace("{instance}", &instance.id)
            .replace("{input}", &instance.input)
    }
}

/// A graph shape that neutralizes a mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RepairPattern {
    /// The node's prompt contains the phrase (case-insensitive).
    PromptContains { node: NodeId, phrase: String },
    /// A VerifyStep is a direct successor of the node.
    VerifierAfter { node: NodeId },
    /// A VerifyStep is a direct predecessor of the node.
    CheckBefore { node: NodeId },
    /// The node has an `on_error` handler (optionally for a specific type).
    HandlerOn {
        node: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exception: Option<String>,
    },
}

impl RepairPattern {
    pub fn holds(&self, graph: &WorkflowGraph) -> bool {
        let is_verify = |id: &NodeId| graph.node(id).is_some_and(|n| n.kind == NodeKind::VerifyStep);
        match self {
            RepairPattern::PromptContains { node, phrase } => graph
                .node(node)
                .is_some_and(|n| n.prompt.to_lowercase().contains(&phrase.to_lowercase())),
            RepairPattern::VerifierAfter { node } => graph.children(node).into_iter().any(is_verify),
            RepairPattern::CheckBefore { node } => graph.parents(node).into_iter().any(is_verify),
            RepairPattern::HandlerOn { node, exception } => graph.node(node).is_some_and(|n| {
                match (n.params.get("on_error"), exception) {
                    (Some(_), None) => true,
                    (Some(h), Some(e)) => h.eq_ignore_ascii_case(e),
                    (None, _) => false,
                }
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairRule {
    pub mode_id: String,
    pub pattern: RepairPattern,
    /// Probability that a firing of the mode is suppressed when the pattern holds.
    #[serde(default = "one")]
    pub effectiveness: f64,
}

fn one() -> f64 {
    1.0
}

fn default_noise_message() -> String {
    "unstable output from model".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorldSpec {
    pub modes: Vec<PlantedMode>,
    #[serde(default)]
    pub base_noise_rate: f64,
    #[serde(default = "default_noise_message")]
    pub noise_message: String,
    #[serde(default)]
    pub repairs: Vec<RepairRule>,
    /// Deleting any of these breaks every output.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub essential_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("probability {value} for {what} is outside [0, 1]")]
    Probability { what: String, value: f64 },
    #[error("duplicate mode id {0}")]
    DuplicateMode(String),
    #[error("repair rule references unknown mode {0}")]
    UnknownMode(String),
}

fn check_prob(what: &str, value: f64) -> Result<(), WorldError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(WorldError::Probability {
            what: what.to_string(),
            value,
        })
    }
}

impl SimWorldSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        let mut ids = BTreeSet::new();
        for m in &self.modes {
            check_prob(&m.mode_id, m.probability)?;
            if !ids.insert(m.mode_id.as_str()) {
                return Err(WorldError::DuplicateMode(m.mode_id.clone()));
            }
        }
        check_prob("base noise", self.base_noise_rate)?;
        for r in &self.repairs {
            check_prob(&format!("repair of {}", r.mode_id), r.effectiveness)?;
            if !ids.contains(r.mode_id.as_str()) {
                return Err(WorldError::UnknownMode(r.mode_id.clone()));
            }
        }
        Ok(())
    }

    /// True if `mode_id` is suppressed for this draw on this graph.
    fn repaired(&self, graph: &WorkflowGraph, mode_id: &str, instance_seed: u64) -> bool {
        self.repairs
            .iter()
            .enumerate()
            .filter(|(_, r)| r.mode_id == mode_id && r.pattern.holds(graph))
            .any(|(i, r)| {
                let s = seed::derive(instance_seed, &format!("repair:{mode_id}:{i}"));
                seed::unit(s) < r.effectiveness
            })
    }

    /// Modes with at least one repair pattern holding on `graph`.
    pub fn modes_with_active_repair(&self, graph: &WorkflowGraph) -> BTreeSet<String> {
        self.repairs
            .iter()
            .filter(|r| r.pattern.holds(graph))
            .map(|r| r.mode_id.clone())
            .collect()
    }
}

#[derive(Debug)]
pub struct SimulatedBackend {
    world: SimWorldSpec,
    verifier: Verifier,
}

impl SimulatedBackend {
    pub fn new(world: SimWorldSpec) -> Result<Self, WorldError> {
        world.validate()?;
        Ok(SimulatedBackend {
            world,
            verifier: Verifier::default(),
        })
    }

    pub fn with_verifier(mut self, verifier: Verifier) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn world(&self) -> &SimWorldSpec {
        &self.world
    }

    /// The node and message of the first planted failure, if any.
    fn planted_failure(
        &self,
        graph: &WorkflowGraph,
        order: &[NodeId],
        instance: &DatasetInstance,
        instance_seed: u64,
    ) -> Option<(NodeId, String)> {
        let fires: Vec<bool> = self
            .world
            .modes
            .iter()
            .map(|m| {
                let u = seed::unit(seed::derive(instance_seed, &format!("mode:{}", m.mode_id)));
                u < m.probability && !self.world.repaired(graph, &m.mode_id, instance_seed)
            })
            .collect();
        for id in order {
            let node = graph.node(id).expect("order comes from graph");
            for (m, &fire) in self.world.modes.iter().zip(&fires) {
                if fire && m.trigger.matches(node, instance) {
                    return Some((id.clone(), m.render(id, instance)));
                }
            }
        }
        None
    }
}

impl Backend for SimulatedBackend {
    fn execute(&self, graph: &WorkflowGraph, instance: &DatasetInstance, instance_seed: u64) -> Trace {
        let order = graph
            .topological_order()
            .expect("workflow graphs are acyclic by construction");
        let exit = graph.exit().clone();

        let mut failure = self.planted_failure(graph, &order, instance, instance_seed);
        if failure.is_none() {
            if let Some(missing) = self.world.essential_nodes.iter().find(|n| !graph.contains(n)) {
                failure = Some((exit.clone(), format!("missing required step {missing}")));
            } else if seed::unit(seed::derive(instance_seed, "noise")) < self.world.base_noise_rate {
                failure = Some((exit.clone(), self.world.noise_message.clone()));
            }
        }

        let mut outputs: BTreeMap<&NodeId, String> = BTreeMap::new();
        let mut records = Vec::with_capacity(order.len());
        let mut corrupted: Option<String> = None;
        for id in &order {
            let parents = graph.parents(id);
            let input = if parents.is_empty() {
                instance.input.clone()
            } else {
                parents
                    .iter()
                    .map(|p| outputs.get(p).map(String::as_str).unwrap_or_default())
                    .collect::<Vec<_>>()
                    .join("\n")
            };
            let (output, status, error_message) = match (&failure, &corrupted) {
                (Some((at, msg)), None) if at == id => {
                    let out = format!("error: {msg}");
                    corrupted = Some(out.clone());
                    (out, NodeStatus::Error, msg.clone())
                }
                (_, Some(bad)) => (bad.clone(), NodeStatus::Ok, String::new()),
                _ if id == &exit => (instance.ground_truth.clone(), NodeStatus::Ok, String::new()),
                _ => (format!("{id}: ok"), NodeStatus::Ok, String::new()),
            };
            outputs.insert(id, output.clone());
            records.push(NodeRecord {
                node_id: id.clone(),
                input,
                output,
                status,
                error_message,
            });
        }
        let final_output = outputs.get(&exit).cloned().unwrap_or_default();
        Trace {
            instance_id: instance.id.clone(),
            success: self.verifier.check(&final_output, &instance.ground_truth),
            final_output,
            cost_units: records.len() as u64,
            records,
            seed: instance_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Arg, Edit, OperatorLibrary};
    use crate::harness::run_dataset;

    fn chain() -> WorkflowGraph {
        WorkflowGraph::chain(vec![
            Node::prompt_step("A", "read"),
            Node::prompt_step("B", "solve"),
            Node::aggregate("C"),
        ])
        .unwrap()
    }

    fn world(p: f64) -> SimWorldSpec {
        SimWorldSpec {
            modes: vec![PlantedMode {
                mode_id: "m1".into(),
                trigger: Trigger {
                    node: Some("B".into()),
                    input_contains: vec!["sum".into()],
                    ..Trigger::default()
                },
                probability: p,
                message: "sum was incorrect".into(),
            }],
            base_noise_rate: 0.0,
            noise_message: default_noise_message(),
            repairs: vec![RepairRule {
                mode_id: "m1".into(),
                pattern: RepairPattern::PromptContains {
                    node: "B".into(),
                    phrase: "carry".into(),
                },
                effectiveness: 1.0,
            }],
            essential_nodes: vec![],
        }
    }

    #[test]
    fn no_trigger_means_success() {
        let b = SimulatedBackend::new(SimWorldSpec {
            modes: vec![],
            ..world(1.0)
        })
        .unwrap_err();
        assert!(matches!(b, WorldError::UnknownMode(_)));

        let b = SimulatedBackend::new(world(1.0)).unwrap();
        let x = DatasetInstance::new("x1", "what is the product", "6");
        for s in 0..20 {
            let t = b.execute(&chain(), &x, s);
            assert!(t.success);
            assert_eq!(t.final_output, "6");
            assert!(t.first_error().is_none());
        }
    }

    #[test]
    fn certain_trigger_errors_at_node() {
        let b = SimulatedBackend::new(world(1.0)).unwrap();
        let x = DatasetInstance::new("x1", "compute the sum", "6");
        let t = b.execute(&chain(), &x, 3);
        assert!(!t.success);
        let errs: Vec<_> = t.records.iter().filter(|r| r.status == NodeStatus::Error).collect();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].node_id.as_str(), "B");
        assert_eq!(errs[0].error_message, "sum was incorrect");
        assert_eq!(t.records.iter().map(|r| r.node_id.as_str()).collect::<Vec<_>>(), ["A", "B", "C"]);
        assert_eq!(t.records[2].input, "error: sum was incorrect");
    }

    #[test]
    fn repair_pattern_neutralizes() {
        let b = SimulatedBackend::new(world(1.0)).unwrap();
        let x = DatasetInstance::new("x1", "compute the sum", "6");
        let fixed = OperatorLibrary::base()
            .apply(&chain(), &Edit::new("RevisePrompt", vec![Arg::node("B"), Arg::text("solve; mind the carry")]))
            .unwrap();
        assert!(b.execute(&fixed, &x, 3).success);
    }

    #[test]
    fn essential_node_deletion_breaks_output() {
        let mut w = world(0.0);
        w.essential_nodes = vec!["B".into()];
        let b = SimulatedBackend::new(w).unwrap();
        let g = OperatorLibrary::base()
            .apply(&chain(), &Edit::new("DeleteNode", vec![Arg::node("B")]))
            .unwrap();
        let t = b.execute(&g, &DatasetInstance::new("x", "y", "z"), 0);
        assert!(!t.success);
        assert_eq!(t.first_error().unwrap().node_id.as_str(), "C");
    }

    #[test]
    fn deterministic_failures_counted() {
        // Instances 3 and 7 carry the trigger token.
        let b = SimulatedBackend::new(world(1.0)).unwrap();
        let xs: Vec<_> = (0..10)
            .map(|i| {
                let q = if i == 3 || i == 7 { "the sum" } else { "the product" };
                DatasetInstance::new(format!("i{i}"), q, "1")
            })
            .collect();
        let out = run_dataset(&chain(), &xs, &b, 5).unwrap();
        assert_eq!(out.success_rate, 0.8);
        let ids: Vec<_> = out.failures.iter().map(|t| t.instance_id.as_str()).collect();
        assert_eq!(ids, ["i3", "i7"]);
        assert_eq!(out.cost_units, 30);
    }

    #[test]
    fn world_validation() {
        let mut w = world(1.5);
        assert!(matches!(w.validate(), Err(WorldError::Probability { .. })));
        w.modes[0].probability = 0.5;
        w.modes.push(w.modes[0].clone());
        assert!(matches!(w.validate(), Err(WorldError::DuplicateMode(_))));
    }

    #[test]
    fn world_json_shape() {
        let text = serde_json::to_string(&world(0.3)).unwrap();
        assert!(text.contains(r#""pattern":{"type":"prompt_contains","node":"B","phrase":"carry"}"#));
        let back: SimWorldSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, world(0.3));
    }
}
