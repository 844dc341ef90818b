//! A small planted world used by tests, examples and the fixture generator.
//!
//! A four-step math pipeline (`parse -> reason -> compute -> answer`) fails on
//! three kinds of problem. Each problem carries one topic tag; the tag decides
//! which planted mode (if any) hits it, so the mode masses equal the tag
//! frequencies: 0.30 (`algebra`), 0.15 (`arith`) and 0.05 (`units`).

use rand::Rng;

use crate::graph::{Node, NodeId, WorkflowGraph};
use crate::harness::{DatasetInstance, PlantedMode, RepairPattern, RepairRule, SimWorldSpec, Trigger};
use crate::seed;

/// `(tag, mass)` of each planted mode, largest first.
pub const MODE_MASSES: [(&str, f64); 3] = [("algebra", 0.30), ("arith", 0.15), ("units", 0.05)];

pub fn pipeline() -> WorkflowGraph {
    WorkflowGraph::chain(vec![
        Node::prompt_step("parse", "Restate the problem and list the given quantities."),
        Node::prompt_step("reason", "Derive the solution step by step."),
        Node::tool_call("compute", "calculator"),
        Node::aggregate("answer"),
    ])
    .expect("static pipeline is valid")
}

fn mode(id: &str, node: &str, tag: &str, message: &str) -> PlantedMode {
    PlantedMode {
        mode_id: id.into(),
        trigger: Trigger {
            node: Some(node.into()),
            kind: None,
            input_contains: vec![format!("[{tag}]")],
        },
        probability: 1.0,
        message: message.into(),
    }
}

/// The planted world; `noise` is the base rate of unrepairable failures.
pub fn world(noise: f64) -> SimWorldSpec {
    SimWorldSpec {
        modes: vec![
            mode("algebra", "reason", "algebra", "incorrect factorization in quadratic equations"),
            mode("arith", "compute", "arith", "the sum was incorrect"),
            mode("units", "parse", "units", "unit conversion missing"),
        ],
        base_noise_rate: noise,
        noise_message: "unstable output from model".into(),
        repairs: vec![
            RepairRule {
                mode_id: "algebra".into(),
                pattern: RepairPattern::PromptContains {
                    node: "reason".into(),
                    phrase: "factorization".into(),
                },
                effectiveness: 1.0,
            },
            RepairRule {
                mode_id: "arith".into(),
                pattern: RepairPattern::VerifierAfter { node: "compute".into() },
                effectiveness: 1.0,
            },
            RepairRule {
                mode_id: "units".into(),
                pattern: RepairPattern::PromptContains {
                    node: "parse".into(),
                    phrase: "conversion".into(),
                },
                effectiveness: 1.0,
            },
        ],
        essential_nodes: ["parse", "reason", "compute", "answer"].map(NodeId::from).to_vec(),
    }
}

/// `n` problems with topic tags drawn from [`MODE_MASSES`] (rest untagged).
pub fn dataset(n: usize, seed: u64) -> Vec<DatasetInstance> {
    let mut rng = seed::rng(seed::derive(seed, "scenario"));
    (0..n)
        .map(|i| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let tag = MODE_MASSES
                .iter()
                .find(|(_, m)| {
                    acc += m;
                    u < acc
                })
                .map_or("plain", |(t, _)| t);
            let a = rng.gen_range(2..50);
            let b = rng.gen_range(2..50);
            DatasetInstance::new(
                format!("q{i:04}"),
                format!("[{tag}] problem {i}: combine {a} and {b}"),
                (a + b).to_string(),
            )
        })
        .collect()
}
