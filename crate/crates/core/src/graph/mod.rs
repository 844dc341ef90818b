//! Workflow graphs, the operator library, and edit application.
//!
//! A [`WorkflowGraph`] is an immutable DAG value. Edits never mutate a graph in
//! place: [`OperatorLibrary::apply`] clones, edits the clone, re-validates every
//! structural invariant and bumps the version.

mod edit;
mod operators;

pub use edit::{edit_space_sample, Arg, Edit, Provenance};
pub use operators::{
    apply_edit, EditError, OperatorLibrary, OperatorSpec, ParamKind, ParamSpec, BASE_PACK,
    CODE_PACK, IDENTITY, MATH_PACK,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a node. Never reused once a node is deleted.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

/// What a node does when executed.
///
/// Required params per kind:
/// - `ToolCall`: `tool` (the tool name)
/// - `VerifyStep`: `criterion` (what is checked)
/// - `PromptStep`, `Aggregate`: none
///
/// Only `PromptStep` and `VerifyStep` carry prompt text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    PromptStep,
    ToolCall,
    VerifyStep,
    Aggregate,
}

impl NodeKind {
    pub const ALL: [NodeKind; 4] = [
        NodeKind::PromptStep,
        NodeKind::ToolCall,
        NodeKind::VerifyStep,
        NodeKind::Aggregate,
    ];

    pub fn has_prompt(self) -> bool {
        matches!(self, NodeKind::PromptStep | NodeKind::VerifyStep)
    }

    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            NodeKind::ToolCall => &["tool"],
            NodeKind::VerifyStep => &["criterion"],
            NodeKind::PromptStep | NodeKind::Aggregate => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::PromptStep => "PromptStep",
            NodeKind::ToolCall => "ToolCall",
            NodeKind::VerifyStep => "VerifyStep",
            NodeKind::Aggregate => "Aggregate",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        let s = s.trim();
        NodeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl Node {
    pub fn prompt_step(id: &str, prompt: &str) -> Self {
        Node {
            id: NodeId::new(id),
            kind: NodeKind::PromptStep,
            prompt: prompt.to_string(),
            params: BTreeMap::new(),
        }
    }

    pub fn tool_call(id: &str, tool: &str) -> Self {
        Node {
            id: NodeId::new(id),
            kind: NodeKind::ToolCall,
            prompt: String::new(),
            params: BTreeMap::from([("tool".to_string(), tool.to_string())]),
        }
    }

    pub fn verify_step(id: &str, criterion: &str) -> Self {
        Node {
            id: NodeId::new(id),
            kind: NodeKind::VerifyStep,
            prompt: criterion.to_string(),
            params: BTreeMap::from([("criterion".to_string(), criterion.to_string())]),
        }
    }

    pub fn aggregate(id: &str) -> Self {
        Node {
            id: NodeId::new(id),
            kind: NodeKind::Aggregate,
            prompt: String::new(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("edge references unknown node {0}")]
    UnknownNode(NodeId),
    #[error("self loop on {0}")]
    SelfLoop(NodeId),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("entry node {0} has incoming edges")]
    EntryHasParents(NodeId),
    #[error("exit node {0} has outgoing edges")]
    ExitHasChildren(NodeId),
    #[error("node {0} is not reachable from entry")]
    Unreachable(NodeId),
    #[error("node {0} does not reach exit")]
    DeadEnd(NodeId),
    #[error("node {node} of kind {kind} is missing required param {param}")]
    MissingParam {
        node: NodeId,
        kind: NodeKind,
        param: String,
    },
    #[error("node {0} id was retired and cannot be reused")]
    RetiredId(NodeId),
}

/// A static DAG of typed nodes with a single entry and a single exit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GraphDoc", into = "GraphDoc")]
pub struct WorkflowGraph {
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeSet<(NodeId, NodeId)>,
    entry: NodeId,
    exit: NodeId,
    version: u64,
    retired: BTreeSet<NodeId>,
}

// Structural equality: version and the retired-id ledger are bookkeeping.
impl PartialEq for WorkflowGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.entry == other.entry
            && self.exit == other.exit
    }
}

impl Eq for WorkflowGraph {}

impl WorkflowGraph {
    pub fn new(
        nodes: Vec<Node>,
        edges: Vec<(NodeId, NodeId)>,
        entry: NodeId,
        exit: NodeId,
    ) -> Result<Self, GraphError> {
        let mut map = BTreeMap::new();
        for n in nodes {
            if map.contains_key(&n.id) {
                return Err(GraphError::DuplicateNode(n.id));
            }
            map.insert(n.id.clone(), n);
        }
        let g = WorkflowGraph {
            nodes: map,
            edges: edges.into_iter().collect(),
            entry,
            exit,
            version: 0,
            retired: BTreeSet::new(),
        };
        g.validate()?;
        Ok(g)
    }

    /// Linear chain `nodes[0] -> nodes[1] -> ...`.
    pub fn chain(nodes: Vec<Node>) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        let edges = nodes
            .windows(2)
            .map(|w| (w[0].id.clone(), w[1].id.clone()))
            .collect();
        let entry = nodes[0].id.clone();
        let exit = nodes[nodes.len() - 1].id.clone();
        WorkflowGraph::new(nodes, edges, entry, exit)
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &(NodeId, NodeId)> {
        self.edges.iter()
    }

    pub fn has_edge(&self, from: &NodeId, to: &NodeId) -> bool {
        self.edges.contains(&(from.clone(), to.clone()))
    }

    pub fn entry(&self) -> &NodeId {
        &self.entry
    }

    pub fn exit(&self) -> &NodeId {
        &self.exit
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn retired(&self) -> impl Iterator<Item = &NodeId> {
        self.retired.iter()
    }

    pub fn children(&self, id: &NodeId) -> Vec<&NodeId> {
        self.edges
            .iter()
            .filter(|(f, _)| f == id)
            .map(|(_, t)| t)
            .collect()
    }

    pub fn parents(&self, id: &NodeId) -> Vec<&NodeId> {
        self.edges
            .iter()
            .filter(|(_, t)| t == id)
            .map(|(f, _)| f)
            .collect()
    }

    /// True if there is a directed path (possibly empty) from `from` to `to`.
    pub fn reaches(&self, from: &NodeId, to: &NodeId) -> bool {
        if from == to {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = BTreeSet::new();
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            for &c in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                if c == to {
                    return true;
                }
                stack.push(c);
            }
        }
        false
    }

    fn adjacency(&self) -> BTreeMap<&NodeId, Vec<&NodeId>> {
        let mut adj: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for (f, t) in &self.edges {
            adj.entry(f).or_default().push(t);
        }
        adj
    }

    /// Kahn's algorithm with lexicographic tie-breaking, so the order is a
    /// pure function of the structure.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indeg: BTreeMap<&NodeId, usize> = self.nodes.keys().map(|k| (k, 0)).collect();
        for (_, t) in &self.edges {
            *indeg.get_mut(t).ok_or_else(|| GraphError::UnknownNode(t.clone()))? += 1;
        }
        let adj = self.adjacency();
        let mut ready: BTreeSet<&NodeId> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(k, _)| *k)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n.clone());
            for &c in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indeg.get_mut(c).expect("edge target checked above");
                *d -= 1;
                if *d == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::Empty);
        }
        for id in [&self.entry, &self.exit] {
            if !self.nodes.contains_key(id) {
                return Err(GraphError::UnknownNode(id.clone()));
            }
        }
        for (f, t) in &self.edges {
            for id in [f, t] {
                if !self.nodes.contains_key(id) {
                    return Err(GraphError::UnknownNode(id.clone()));
                }
            }
            if f == t {
                return Err(GraphError::SelfLoop(f.clone()));
            }
        }
        for id in self.nodes.keys() {
            if self.retired.contains(id) {
                return Err(GraphError::RetiredId(id.clone()));
            }
        }
        for node in self.nodes.values() {
            for p in node.kind.required_params() {
                if !node.params.contains_key(*p) {
                    return Err(GraphError::MissingParam {
                        node: node.id.clone(),
                        kind: node.kind,
                        param: p.to_string(),
                    });
                }
            }
        }
        if self.edges.iter().any(|(_, t)| t == &self.entry) {
            return Err(GraphError::EntryHasParents(self.entry.clone()));
        }
        if self.edges.iter().any(|(f, _)| f == &self.exit) {
            return Err(GraphError::ExitHasChildren(self.exit.clone()));
        }
        self.topological_order()?;

        let forward = self.closure(&self.entry, false);
        let backward = self.closure(&self.exit, true);
        for id in self.nodes.keys() {
            if !forward.contains(id) {
                return Err(GraphError::Unreachable(id.clone()));
            }
            if !backward.contains(id) {
                return Err(GraphError::DeadEnd(id.clone()));
            }
        }
        Ok(())
    }

    fn closure(&self, start: &NodeId, reverse: bool) -> BTreeSet<NodeId> {
        let mut adj: BTreeMap<&NodeId, Vec<&NodeId>> = BTreeMap::new();
        for (f, t) in &self.edges {
            if reverse {
                adj.entry(t).or_default().push(f);
            } else {
                adj.entry(f).or_default().push(t);
            }
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n.clone()) {
                continue;
            }
            if let Some(next) = adj.get(n) {
                queue.extend(next.iter().copied());
            }
        }
        seen
    }

    /// A node id that is neither live nor retired.
    pub fn fresh_id(&self) -> NodeId {
        let mut k = self.nodes.len() + self.retired.len();
        loop {
            let candidate = NodeId(format!("n{k}"));
            if !self.nodes.contains_key(&candidate) && !self.retired.contains(&candidate) {
                return candidate;
            }
            k += 1;
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    // Mutators used by operators on a private clone; callers re-validate.

    pub(crate) fn insert_node(&mut self, node: Node) {
        self.nodes.insert(node.id.clone(), node);
    }

    pub(crate) fn remove_node(&mut self, id: &NodeId) -> Option<Node> {
        let removed = self.nodes.remove(id)?;
        self.edges.retain(|(f, t)| f != id && t != id);
        self.retired.insert(id.clone());
        Some(removed)
    }

    pub(crate) fn add_edge(&mut self, from: NodeId, to: NodeId) {
        self.edges.insert((from, to));
    }

    pub(crate) fn remove_edge(&mut self, from: &NodeId, to: &NodeId) -> bool {
        self.edges.remove(&(from.clone(), to.clone()))
    }

    pub(crate) fn node_mut(&mut self, id: &NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(id)
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// On-disk graph document.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<Node>,
    edges: Vec<(NodeId, NodeId)>,
    entry: NodeId,
    exit: NodeId,
    #[serde(default)]
    version: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    retired: Vec<NodeId>,
}

impl TryFrom<GraphDoc> for WorkflowGraph {
    type Error = GraphError;

    fn try_from(doc: GraphDoc) -> Result<Self, GraphError> {
        let mut g = WorkflowGraph::new(doc.nodes, doc.edges, doc.entry, doc.exit)?;
        g.version = doc.version;
        g.retired = doc.retired.into_iter().collect();
        g.validate()?;
        Ok(g)
    }
}

impl From<WorkflowGraph> for GraphDoc {
    fn from(g: WorkflowGraph) -> Self {
        GraphDoc {
            nodes: g.nodes.into_values().collect(),
            edges: g.edges.into_iter().collect(),
            entry: g.entry,
            exit: g.exit,
            version: g.version,
            retired: g.retired.into_iter().collect(),
        }
    }
}
