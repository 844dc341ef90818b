use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::operators::{OperatorLibrary, IDENTITY};
use super::{NodeId, NodeKind, WorkflowGraph};
use crate::seed;

/// A bound operator argument.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arg {
    Node(NodeId),
    Text(String),
    Kind(NodeKind),
}

impl Arg {
    pub fn node(id: &str) -> Arg {
        Arg::Node(NodeId::new(id))
    }

    pub fn text(t: &str) -> Arg {
        Arg::Text(t.to_string())
    }
}

impl fmt::Display for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Node(id) if is_bare(id.as_str()) => f.write_str(id.as_str()),
            Arg::Node(id) => write_quoted(f, id.as_str()),
            Arg::Text(t) => write_quoted(f, t),
            Arg::Kind(k) => f.write_str(k.name()),
        }
    }
}

fn is_bare(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

fn write_quoted(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            c => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// Where an edit came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub proposer: String,
    pub iteration: usize,
    pub target_mode: Option<usize>,
}

/// One operator application. Equality ignores provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Edit {
    pub operator: String,
    pub args: Vec<Arg>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl PartialEq for Edit {
    fn eq(&self, other: &Self) -> bool {
        self.operator == other.operator && self.args == other.args
    }
}

impl Eq for Edit {}

impl Edit {
    pub fn new(operator: &str, args: Vec<Arg>) -> Self {
        Edit {
            operator: operator.to_string(),
            args,
            provenance: Provenance::default(),
        }
    }

    /// The no-op edit.
    pub fn identity() -> Self {
        Edit::new(IDENTITY, Vec::new())
    }

    pub fn is_identity(&self) -> bool {
        self.operator == IDENTITY
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// Node ids referenced by the arguments.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.args.iter().filter_map(|a| match a {
            Arg::Node(id) => Some(id),
            _ => None,
        })
    }
}

impl fmt::Display for Edit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.operator)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

/// Splits `Name(a, "b, c", d)` into the name and raw argument strings.
/// Quoted arguments are unescaped; bare ones are trimmed.
pub(crate) fn split_call(text: &str) -> Option<(String, Vec<String>)> {
    let text = text.trim();
    let open = text.find('(')?;
    if !text.ends_with(')') {
        return None;
    }
    let name = text[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return None;
    }
    let inner = &text[open + 1..text.len() - 1];
    let mut args = Vec::new();
    let mut chars = inner.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        let Some(&first) = chars.peek() else {
            break;
        };
        let mut cur = String::new();
        if first == '"' || first == '\'' {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '\\' => cur.push(chars.next()?),
                    c if c == first => {
                        closed = true;
                        break;
                    }
                    c => cur.push(c),
                }
            }
            if !closed {
                return None;
            }
            while chars.peek().is_some_and(|c| c.is_whitespace()) {
                chars.next();
            }
            match chars.next() {
                None => {
                    args.push(cur);
                    break;
                }
                Some(',') => args.push(cur),
                Some(_) => return None,
            }
        } else {
            let mut ended = true;
            for c in chars.by_ref() {
                if c == ',' {
                    ended = false;
                    break;
                }
                cur.push(c);
            }
            let trimmed = cur.trim();
            if trimmed.is_empty() || trimmed.contains(['(', ')', '"']) {
                return None;
            }
            args.push(trimmed.to_string());
            if ended {
                break;
            }
        }
    }
    Some((name.to_string(), args))
}

/// Draws up to `budget` distinct valid edits from the library's edit space.
///
/// Element 0 is always the identity edit. The remaining slots are a seeded
/// shuffle of every applicable binding the operators enumerate.
pub fn edit_space_sample(
    graph: &WorkflowGraph,
    library: &OperatorLibrary,
    budget: usize,
    seed: u64,
) -> Vec<Edit> {
    let mut out = vec![Edit::identity()];
    if budget <= 1 {
        return out;
    }
    let mut seen = BTreeSet::from([Edit::identity().to_string()]);
    let mut pool = Vec::new();
    for op in library.operators() {
        for args in op.enumerate(graph) {
            let edit = Edit::new(op.name(), args);
            if library.apply(graph, &edit).is_ok() && seen.insert(edit.to_string()) {
                pool.push(edit);
            }
        }
    }
    pool.shuffle(&mut seed::rng(seed::derive(seed, "edit_space_sample")));
    out.extend(pool.into_iter().take(budget - 1));
    out
}
