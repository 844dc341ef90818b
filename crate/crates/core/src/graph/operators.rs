//! The operator library: every legal way to edit a workflow graph.
//!
//! Built-ins come in packs. [`BASE_PACK`] holds the domain-agnostic operators;
//! [`CODE_PACK`] and [`MATH_PACK`] add domain-specific ones. `Identity` is
//! always present and cannot be disabled.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use super::edit::{split_call, Arg, Edit};
use super::{GraphError, Node, NodeId, NodeKind, WorkflowGraph};

pub const IDENTITY: &str = "Identity";
pub const BASE_PACK: &[&str] = &["RevisePrompt", "InsertNode", "DeleteNode"];
pub const CODE_PACK: &[&str] = &["AddExceptionHandler", "InsertPreconditionCheck"];
pub const MATH_PACK: &[&str] = &["AddVerifierNode", "AddBranch"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("unknown operator {0}")]
    UnknownOperator(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("edit would create a cycle through {from} -> {to}")]
    CycleWouldForm { from: NodeId, to: NodeId },
    #[error("edit would remove or disconnect entry/exit node {0}")]
    EntryExitViolation(NodeId),
    #[error("malformed arguments: {0}")]
    MalformedArgs(String),
    #[error("edit produced an invalid graph: {0}")]
    InvalidResult(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Node,
    Text,
    Kind,
}

#[derive(Clone, Copy, Debug)]
pub struct ParamSpec {
    pub name: &'static str,
    pub kind: ParamKind,
    pub required: bool,
}

const fn req(name: &'static str, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: true,
    }
}

const fn opt(name: &'static str, kind: ParamKind) -> ParamSpec {
    ParamSpec {
        name,
        kind,
        required: false,
    }
}

/// A graph-edit operator.
///
/// `check` is the applicability predicate; `transform` is only called after
/// `check` passed, on a private clone of the graph.
pub trait OperatorSpec: Send + Sync {
    fn name(&self) -> &'static str;
    fn params(&self) -> &'static [ParamSpec];
    fn description(&self) -> &'static str;
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError>;
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]);
    /// Candidate bindings on `graph`, in a deterministic order.
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>>;

    fn signature(&self) -> String {
        let ps: Vec<String> = self
            .params()
            .iter()
            .map(|p| {
                let ty = match p.kind {
                    ParamKind::Node => "node_id",
                    ParamKind::Text => "text",
                    ParamKind::Kind => "PromptStep|VerifyStep|Aggregate",
                };
                if p.required {
                    format!("{}: {ty}", p.name)
                } else {
                    format!("{}?: {ty}", p.name)
                }
            })
            .collect();
        format!("{}({})", self.name(), ps.join(", "))
    }
}

/// Checks arity and argument kinds against the operator's parameter list.
fn check_shape(op: &dyn OperatorSpec, args: &[Arg]) -> Result<(), EditError> {
    let params = op.params();
    let required = params.iter().filter(|p| p.required).count();
    if args.len() < required || args.len() > params.len() {
        return Err(EditError::MalformedArgs(format!(
            "{} expects {}..={} arguments, got {}",
            op.name(),
            required,
            params.len(),
            args.len()
        )));
    }
    for (p, a) in params.iter().zip(args) {
        let ok = matches!(
            (p.kind, a),
            (ParamKind::Node, Arg::Node(_)) | (ParamKind::Text, Arg::Text(_)) | (ParamKind::Kind, Arg::Kind(_))
        );
        if !ok {
            return Err(EditError::MalformedArgs(format!(
                "{}: parameter {} has the wrong type",
                op.name(),
                p.name
            )));
        }
    }
    Ok(())
}

fn node_arg(args: &[Arg], i: usize) -> &NodeId {
    match &args[i] {
        Arg::Node(id) => id,
        _ => unreachable!("shape checked"),
    }
}

fn text_arg(args: &[Arg], i: usize) -> Option<&str> {
    match args.get(i) {
        Some(Arg::Text(t)) => Some(t),
        _ => None,
    }
}

fn kind_arg(args: &[Arg], i: usize) -> NodeKind {
    match &args[i] {
        Arg::Kind(k) => *k,
        _ => unreachable!("shape checked"),
    }
}

fn exists(graph: &WorkflowGraph, id: &NodeId) -> Result<(), EditError> {
    if graph.contains(id) {
        Ok(())
    } else {
        Err(EditError::UnknownNode(id.clone()))
    }
}

/// Builds the node inserted by the splitting operators.
fn new_node(id: NodeId, kind: NodeKind, text: &str) -> Node {
    let mut node = Node {
        id,
        kind,
        prompt: String::new(),
        params: BTreeMap::new(),
    };
    if kind.has_prompt() {
        node.prompt = text.to_string();
    }
    if kind == NodeKind::VerifyStep {
        node.params.insert("criterion".into(), text.to_string());
    }
    node
}

fn check_insertable_kind(kind: NodeKind) -> Result<(), EditError> {
    if kind == NodeKind::ToolCall {
        return Err(EditError::MalformedArgs(
            "cannot insert a ToolCall node without a tool binding".into(),
        ));
    }
    Ok(())
}

/// Shared predicate for operators that split an existing edge.
fn check_split(graph: &WorkflowGraph, parent: &NodeId, child: &NodeId) -> Result<(), EditError> {
    exists(graph, parent)?;
    exists(graph, child)?;
    if graph.has_edge(parent, child) {
        return Ok(());
    }
    if graph.reaches(child, parent) {
        return Err(EditError::CycleWouldForm {
            from: parent.clone(),
            to: child.clone(),
        });
    }
    Err(EditError::MalformedArgs(format!(
        "no edge {parent} -> {child} to split"
    )))
}

fn split_edge(graph: &mut WorkflowGraph, parent: &NodeId, child: &NodeId, node: Node) {
    let id = node.id.clone();
    graph.insert_node(node);
    graph.remove_edge(parent, child);
    graph.add_edge(parent.clone(), id.clone());
    graph.add_edge(id, child.clone());
}

struct Identity;

impl OperatorSpec for Identity {
    fn name(&self) -> &'static str {
        IDENTITY
    }
    fn params(&self) -> &'static [ParamSpec] {
        &[]
    }
    fn description(&self) -> &'static str {
        "leave the workflow unchanged"
    }
    fn check(&self, _: &WorkflowGraph, _: &[Arg]) -> Result<(), EditError> {
        Ok(())
    }
    fn transform(&self, _: &mut WorkflowGraph, _: &[Arg]) {}
    fn enumerate(&self, _: &WorkflowGraph) -> Vec<Vec<Arg>> {
        Vec::new()
    }
}

struct RevisePrompt;

impl OperatorSpec for RevisePrompt {
    fn name(&self) -> &'static str {
        "RevisePrompt"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("node_id", ParamKind::Node), req("new_prompt", ParamKind::Text)];
        P
    }
    fn description(&self) -> &'static str {
        "replace the prompt text of a PromptStep or VerifyStep node"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        let id = node_arg(args, 0);
        exists(graph, id)?;
        let node = graph.node(id).expect("exists");
        if !node.kind.has_prompt() {
            return Err(EditError::MalformedArgs(format!(
                "{id} is a {} node and has no prompt",
                node.kind
            )));
        }
        if text_arg(args, 1).is_none_or(|t| t.trim().is_empty()) {
            return Err(EditError::MalformedArgs("new prompt is empty".into()));
        }
        Ok(())
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let id = node_arg(args, 0).clone();
        let text = text_arg(args, 1).unwrap_or_default().to_string();
        let node = graph.node_mut(&id).expect("checked");
        if node.kind == NodeKind::VerifyStep {
            node.params.insert("criterion".into(), text.clone());
        }
        node.prompt = text;
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .nodes()
            .filter(|n| n.kind.has_prompt())
            .map(|n| {
                let text = format!("{} Double-check each intermediate result.", n.prompt);
                vec![Arg::Node(n.id.clone()), Arg::Text(text.trim().to_string())]
            })
            .collect()
    }
}

struct InsertNode;

impl OperatorSpec for InsertNode {
    fn name(&self) -> &'static str {
        "InsertNode"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            req("parent_id", ParamKind::Node),
            req("child_id", ParamKind::Node),
            req("kind", ParamKind::Kind),
            opt("prompt", ParamKind::Text),
        ];
        P
    }
    fn description(&self) -> &'static str {
        "insert a new node on the existing edge parent -> child"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        check_split(graph, node_arg(args, 0), node_arg(args, 1))?;
        check_insertable_kind(kind_arg(args, 2))
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let kind = kind_arg(args, 2);
        let text = text_arg(args, 3).unwrap_or("Check the previous step.");
        let node = new_node(graph.fresh_id(), kind, text);
        split_edge(graph, &node_arg(args, 0).clone(), &node_arg(args, 1).clone(), node);
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .edges()
            .map(|(p, c)| {
                vec![
                    Arg::Node(p.clone()),
                    Arg::Node(c.clone()),
                    Arg::Kind(NodeKind::VerifyStep),
                    Arg::Text(format!("Verify the output of {p}.")),
                ]
            })
            .collect()
    }
}

struct DeleteNode;

impl OperatorSpec for DeleteNode {
    fn name(&self) -> &'static str {
        "DeleteNode"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("node_id", ParamKind::Node)];
        P
    }
    fn description(&self) -> &'static str {
        "remove an interior node, wiring each parent to each child"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        let id = node_arg(args, 0);
        exists(graph, id)?;
        if id == graph.entry() || id == graph.exit() {
            return Err(EditError::EntryExitViolation(id.clone()));
        }
        Ok(())
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let id = node_arg(args, 0).clone();
        let parents: Vec<NodeId> = graph.parents(&id).into_iter().cloned().collect();
        let children: Vec<NodeId> = graph.children(&id).into_iter().cloned().collect();
        graph.remove_node(&id);
        for p in &parents {
            for c in &children {
                graph.add_edge(p.clone(), c.clone());
            }
        }
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .nodes()
            .filter(|n| &n.id != graph.entry() && &n.id != graph.exit())
            .map(|n| vec![Arg::Node(n.id.clone())])
            .collect()
    }
}

struct AddExceptionHandler;

impl OperatorSpec for AddExceptionHandler {
    fn name(&self) -> &'static str {
        "AddExceptionHandler"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("node_id", ParamKind::Node), req("exception_type", ParamKind::Text)];
        P
    }
    fn description(&self) -> &'static str {
        "wrap a node so that the named exception type is caught and retried"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        exists(graph, node_arg(args, 0))?;
        if text_arg(args, 1).is_none_or(|t| t.trim().is_empty()) {
            return Err(EditError::MalformedArgs("exception type is empty".into()));
        }
        Ok(())
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let id = node_arg(args, 0).clone();
        let exc = text_arg(args, 1).unwrap_or_default().trim().to_string();
        graph
            .node_mut(&id)
            .expect("checked")
            .params
            .insert("on_error".into(), exc);
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .nodes()
            .filter(|n| !n.params.contains_key("on_error"))
            .map(|n| vec![Arg::Node(n.id.clone()), Arg::text("Exception")])
            .collect()
    }
}

struct InsertPreconditionCheck;

impl OperatorSpec for InsertPreconditionCheck {
    fn name(&self) -> &'static str {
        "InsertPreconditionCheck"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            req("parent_id", ParamKind::Node),
            req("child_id", ParamKind::Node),
            req("condition", ParamKind::Text),
        ];
        P
    }
    fn description(&self) -> &'static str {
        "insert a VerifyStep on edge parent -> child that asserts a condition before child runs"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        check_split(graph, node_arg(args, 0), node_arg(args, 1))?;
        if text_arg(args, 2).is_none_or(|t| t.trim().is_empty()) {
            return Err(EditError::MalformedArgs("condition is empty".into()));
        }
        Ok(())
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let cond = text_arg(args, 2).unwrap_or_default();
        let mut node = new_node(graph.fresh_id(), NodeKind::VerifyStep, cond);
        node.params.insert("condition".into(), cond.to_string());
        split_edge(graph, &node_arg(args, 0).clone(), &node_arg(args, 1).clone(), node);
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .edges()
            .map(|(p, c)| {
                vec![
                    Arg::Node(p.clone()),
                    Arg::Node(c.clone()),
                    Arg::Text(format!("inputs to {c} are well-formed")),
                ]
            })
            .collect()
    }
}

struct AddVerifierNode;

impl OperatorSpec for AddVerifierNode {
    fn name(&self) -> &'static str {
        "AddVerifierNode"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[req("node_id", ParamKind::Node), req("criterion", ParamKind::Text)];
        P
    }
    fn description(&self) -> &'static str {
        "route every output of a non-exit node through a new VerifyStep"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        let id = node_arg(args, 0);
        exists(graph, id)?;
        if id == graph.exit() {
            return Err(EditError::EntryExitViolation(id.clone()));
        }
        if text_arg(args, 1).is_none_or(|t| t.trim().is_empty()) {
            return Err(EditError::MalformedArgs("criterion is empty".into()));
        }
        Ok(())
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let id = node_arg(args, 0).clone();
        let node = new_node(graph.fresh_id(), NodeKind::VerifyStep, text_arg(args, 1).unwrap_or_default());
        let vid = node.id.clone();
        let children: Vec<NodeId> = graph.children(&id).into_iter().cloned().collect();
        graph.insert_node(node);
        for c in children {
            graph.remove_edge(&id, &c);
            graph.add_edge(vid.clone(), c);
        }
        graph.add_edge(id, vid);
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .nodes()
            .filter(|n| &n.id != graph.exit())
            .map(|n| vec![Arg::Node(n.id.clone()), Arg::Text(format!("output of {} is correct", n.id))])
            .collect()
    }
}

struct AddBranch;

impl OperatorSpec for AddBranch {
    fn name(&self) -> &'static str {
        "AddBranch"
    }
    fn params(&self) -> &'static [ParamSpec] {
        const P: &[ParamSpec] = &[
            req("from_id", ParamKind::Node),
            req("to_id", ParamKind::Node),
            req("kind", ParamKind::Kind),
            opt("prompt", ParamKind::Text),
        ];
        P
    }
    fn description(&self) -> &'static str {
        "add a parallel node fed by from and feeding to, keeping existing edges"
    }
    fn check(&self, graph: &WorkflowGraph, args: &[Arg]) -> Result<(), EditError> {
        let (from, to) = (node_arg(args, 0), node_arg(args, 1));
        exists(graph, from)?;
        exists(graph, to)?;
        if from == to || graph.reaches(to, from) {
            return Err(EditError::CycleWouldForm {
                from: from.clone(),
                to: to.clone(),
            });
        }
        check_insertable_kind(kind_arg(args, 2))
    }
    fn transform(&self, graph: &mut WorkflowGraph, args: &[Arg]) {
        let text = text_arg(args, 3).unwrap_or("Solve the task independently.");
        let node = new_node(graph.fresh_id(), kind_arg(args, 2), text);
        let id = node.id.clone();
        graph.insert_node(node);
        graph.add_edge(node_arg(args, 0).clone(), id.clone());
        graph.add_edge(id, node_arg(args, 1).clone());
    }
    fn enumerate(&self, graph: &WorkflowGraph) -> Vec<Vec<Arg>> {
        graph
            .edges()
            .map(|(p, c)| {
                vec![
                    Arg::Node(p.clone()),
                    Arg::Node(c.clone()),
                    Arg::Kind(NodeKind::PromptStep),
                    Arg::text("Solve the task independently."),
                ]
            })
            .collect()
    }
}

fn builtin(name: &str) -> Option<Arc<dyn OperatorSpec>> {
    let op: Arc<dyn OperatorSpec> = match name {
        IDENTITY => Arc::new(Identity),
        "RevisePrompt" => Arc::new(RevisePrompt),
        "InsertNode" => Arc::new(InsertNode),
        "DeleteNode" => Arc::new(DeleteNode),
        "AddExceptionHandler" => Arc::new(AddExceptionHandler),
        "InsertPreconditionCheck" => Arc::new(InsertPreconditionCheck),
        "AddVerifierNode" => Arc::new(AddVerifierNode),
        "AddBranch" => Arc::new(AddBranch),
        _ => return None,
    };
    Some(op)
}

/// Registry of enabled operators, keyed by name.
#[derive(Clone)]
pub struct OperatorLibrary {
    ops: BTreeMap<&'static str, Arc<dyn OperatorSpec>>,
}

impl std::fmt::Debug for OperatorLibrary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.ops.keys()).finish()
    }
}

impl Default for OperatorLibrary {
    fn default() -> Self {
        OperatorLibrary::base()
    }
}

impl OperatorLibrary {
    /// `Identity` plus the named built-ins. Names may also be pack names
    /// (`base`, `code`, `math`).
    pub fn with_names<S: AsRef<str>>(names: &[S]) -> Result<Self, EditError> {
        let mut lib = OperatorLibrary { ops: BTreeMap::new() };
        lib.register(Arc::new(Identity));
        for name in names {
            let pack = match name.as_ref() {
                "base" => BASE_PACK,
                "code" => CODE_PACK,
                "math" => MATH_PACK,
                other => {
                    let op = builtin(other).ok_or_else(|| EditError::UnknownOperator(other.to_string()))?;
                    lib.register(op);
                    continue;
                }
            };
            for n in pack {
                lib.register(builtin(n).expect("pack members are built-ins"));
            }
        }
        Ok(lib)
    }

    pub fn base() -> Self {
        OperatorLibrary::with_names(BASE_PACK).expect("built-ins")
    }

    /// Base set plus both domain packs.
    pub fn full() -> Self {
        OperatorLibrary::with_names(&["base", "code", "math"]).expect("built-ins")
    }

    /// Adds (or replaces) an operator.
    pub fn register(&mut self, op: Arc<dyn OperatorSpec>) {
        self.ops.insert(op.name(), op);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn OperatorSpec>> {
        self.ops.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ops.contains_key(name)
    }

    /// Enabled operators except `Identity`, in name order.
    pub fn operators(&self) -> impl Iterator<Item = &Arc<dyn OperatorSpec>> {
        self.ops.values().filter(|o| o.name() != IDENTITY)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.ops.keys().copied().collect()
    }

    /// One-line description of the library, used in proposer prompts.
    pub fn definition(&self) -> String {
        self.operators()
            .map(|o| format!("{}: {}", o.signature(), o.description()))
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Applicability predicate for `edit` on `graph`.
    pub fn check(&self, graph: &WorkflowGraph, edit: &Edit) -> Result<(), EditError> {
        let op = self
            .get(&edit.operator)
            .ok_or_else(|| EditError::UnknownOperator(edit.operator.clone()))?;
        check_shape(op.as_ref(), &edit.args)?;
        op.check(graph, &edit.args)
    }

    /// `graph ⊕ edit`: a new, validated graph with its version bumped.
    pub fn apply(&self, graph: &WorkflowGraph, edit: &Edit) -> Result<WorkflowGraph, EditError> {
        self.check(graph, edit)?;
        let op = self.get(&edit.operator).expect("checked");
        let mut out = graph.clone();
        op.transform(&mut out, &edit.args);
        out.validate()?;
        out.bump_version();
        Ok(out)
    }

    /// Parses `OperatorName(arg1, arg2, ...)` against the operator's signature.
    pub fn parse_edit(&self, text: &str) -> Result<Edit, EditError> {
        let (name, raw) = split_call(text)
            .ok_or_else(|| EditError::MalformedArgs(format!("cannot parse edit {text:?}")))?;
        let op = self
            .get(&name)
            .ok_or_else(|| EditError::UnknownOperator(name.clone()))?;
        let params = op.params();
        if raw.len() > params.len() {
            return Err(EditError::MalformedArgs(format!(
                "{name} takes at most {} arguments",
                params.len()
            )));
        }
        let args = params
            .iter()
            .zip(raw)
            .map(|(p, a)| match p.kind {
                ParamKind::Node => Ok(Arg::Node(NodeId(a))),
                ParamKind::Text => Ok(Arg::Text(a)),
                ParamKind::Kind => NodeKind::parse(&a)
                    .map(Arg::Kind)
                    .ok_or_else(|| EditError::MalformedArgs(format!("unknown node kind {a:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let edit = Edit::new(op.name(), args);
        check_shape(op.as_ref(), &edit.args)?;
        Ok(edit)
    }
}

/// Free-function form of [`OperatorLibrary::apply`].
pub fn apply_edit(
    graph: &WorkflowGraph,
    edit: &Edit,
    library: &OperatorLibrary,
) -> Result<WorkflowGraph, EditError> {
    library.apply(graph, edit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::edit_space_sample;

    fn abc() -> WorkflowGraph {
        WorkflowGraph::chain(vec![
            Node::prompt_step("A", "read"),
            Node::prompt_step("B", "solve"),
            Node::aggregate("C"),
        ])
        .unwrap()
    }

    #[test]
    fn insert_node_splits_edge() {
        let g = WorkflowGraph::chain(vec![Node::prompt_step("A", "a"), Node::aggregate("B")]).unwrap();
        let lib = OperatorLibrary::base();
        let e = Edit::new(
            "InsertNode",
            vec![Arg::node("A"), Arg::node("B"), Arg::Kind(NodeKind::VerifyStep), Arg::text("check")],
        );
        let out = lib.apply(&g, &e).unwrap();
        let v = out.fresh_id();
        let inserted: Vec<_> = out.nodes().filter(|n| n.id.as_str() != "A" && n.id.as_str() != "B").collect();
        assert_eq!(inserted.len(), 1);
        let vid = inserted[0].id.clone();
        assert_ne!(vid, v);
        let edges: Vec<_> = out.edges().cloned().collect();
        assert_eq!(edges, vec![("A".into(), vid.clone()), (vid.clone(), "B".into())]);
        assert_eq!(out.version(), g.version() + 1);
        assert_eq!(g.node_count(), 2, "input graph untouched");
    }

    #[test]
    fn delete_unknown_node() {
        let lib = OperatorLibrary::base();
        let err = lib.apply(&abc(), &Edit::new("DeleteNode", vec![Arg::node("Z")])).unwrap_err();
        assert_eq!(err, EditError::UnknownNode("Z".into()));
    }

    #[test]
    fn delete_entry_or_exit_rejected() {
        let lib = OperatorLibrary::base();
        for id in ["A", "C"] {
            let err = lib.apply(&abc(), &Edit::new("DeleteNode", vec![Arg::node(id)])).unwrap_err();
            assert_eq!(err, EditError::EntryExitViolation(id.into()));
        }
        let out = lib.apply(&abc(), &Edit::new("DeleteNode", vec![Arg::node("B")])).unwrap();
        assert!(out.has_edge(&"A".into(), &"C".into()));
        assert_eq!(out.retired().count(), 1);
    }

    #[test]
    fn insert_on_back_edge_is_cycle() {
        let lib = OperatorLibrary::base();
        let e = Edit::new(
            "InsertNode",
            vec![Arg::node("C"), Arg::node("A"), Arg::Kind(NodeKind::PromptStep)],
        );
        assert!(matches!(lib.apply(&abc(), &e), Err(EditError::CycleWouldForm { .. })));
        let skip = Edit::new(
            "InsertNode",
            vec![Arg::node("A"), Arg::node("C"), Arg::Kind(NodeKind::PromptStep)],
        );
        assert!(matches!(lib.apply(&abc(), &skip), Err(EditError::MalformedArgs(_))));
    }

    #[test]
    fn malformed_args() {
        let lib = OperatorLibrary::base();
        let e = Edit::new("RevisePrompt", vec![Arg::text("B"), Arg::text("x")]);
        assert!(matches!(lib.apply(&abc(), &e), Err(EditError::MalformedArgs(_))));
        let e = Edit::new("RevisePrompt", vec![Arg::node("C"), Arg::text("x")]);
        assert!(matches!(lib.apply(&abc(), &e), Err(EditError::MalformedArgs(_))));
        assert!(matches!(
            lib.apply(&abc(), &Edit::new("Nope", vec![])),
            Err(EditError::UnknownOperator(_))
        ));
    }

    #[test]
    fn identity_is_structural_fixed_point() {
        let lib = OperatorLibrary::base();
        let g = abc();
        let out = lib.apply(&g, &Edit::identity()).unwrap();
        assert_eq!(out, g);
        assert_eq!(out.version(), 1);
    }

    #[test]
    fn parse_round_trips_display() {
        let lib = OperatorLibrary::full();
        for text in [
            r#"RevisePrompt(node_2, "Double-check factorization using FOIL method")"#,
            "InsertNode(A, B, VerifyStep)",
            r#"InsertPreconditionCheck(A, B, "x > 0")"#,
            "DeleteNode(B)",
            "Identity()",
        ] {
            let e = lib.parse_edit(text).unwrap();
            assert_eq!(lib.parse_edit(&e.to_string()).unwrap(), e);
        }
        assert!(lib.parse_edit("InsertNode(A, B, Banana)").is_err());
        assert!(lib.parse_edit("DeleteNode(A, B)").is_err());
        assert!(lib.parse_edit("DeleteNode()").is_err());
    }

    #[test]
    fn domain_pack_operators() {
        let lib = OperatorLibrary::full();
        let g = abc();
        let out = lib
            .apply(&g, &Edit::new("AddExceptionHandler", vec![Arg::node("B"), Arg::text("ValueError")]))
            .unwrap();
        assert_eq!(out.node(&"B".into()).unwrap().params["on_error"], "ValueError");

        let out = lib
            .apply(&g, &Edit::new("AddVerifierNode", vec![Arg::node("A"), Arg::text("ok")]))
            .unwrap();
        assert_eq!(out.node_count(), 4);
        assert!(!out.has_edge(&"A".into(), &"B".into()));

        let out = lib
            .apply(
                &g,
                &Edit::new("AddBranch", vec![Arg::node("A"), Arg::node("C"), Arg::Kind(NodeKind::PromptStep)]),
            )
            .unwrap();
        assert_eq!(out.node_count(), 4);
        assert!(out.has_edge(&"A".into(), &"B".into()));
        let back = Edit::new("AddBranch", vec![Arg::node("C"), Arg::node("A"), Arg::Kind(NodeKind::PromptStep)]);
        assert!(matches!(lib.apply(&g, &back), Err(EditError::CycleWouldForm { .. })));
    }

    #[test]
    fn library_names_and_packs() {
        assert!(OperatorLibrary::with_names(&["Bogus"]).is_err());
        let lib = OperatorLibrary::with_names(&["code"]).unwrap();
        assert_eq!(lib.names(), vec!["AddExceptionHandler", IDENTITY, "InsertPreconditionCheck"]);
        assert!(lib.definition().contains("AddExceptionHandler(node_id: node_id, exception_type: text)"));
    }

    #[test]
    fn sample_single_node_delete_is_identity_only() {
        let g = WorkflowGraph::chain(vec![Node::prompt_step("S", "x")]).unwrap();
        let lib = OperatorLibrary::with_names(&["DeleteNode"]).unwrap();
        let s = edit_space_sample(&g, &lib, 5, 1);
        assert_eq!(s, vec![Edit::identity()]);
    }
}
