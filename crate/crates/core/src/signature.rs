//! Failure signatures: a weighted one-hot over node ids followed by a hashed
//! bag-of-tokens embedding of the error message.
//!
//! The structural width grows as new node ids appear. Signatures keep only
//! their index, so older ones are zero-padded to the current width on read.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnosis::Diagnosis;
use crate::graph::NodeId;
use crate::seed;

pub const DEFAULT_DIM: usize = 64;
pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("error message is empty")]
    EmptyMessage,
    #[error("embedding dimension {0} is below the minimum of {MIN_DIM}")]
    DimensionTooSmall(usize),
}

/// Node id to structural index, first-seen order, never reused.
#[derive(Clone, Debug, Default)]
pub struct StructuralRegistry {
    ids: IndexSet<NodeId, seed::FnvBuildHasher>,
}

impl PartialEq for StructuralRegistry {
    fn eq(&self, other: &Self) -> bool {
        self.ids.iter().eq(other.ids.iter())
    }
}

impl Eq for StructuralRegistry {}

/// A one-hot vector stored as its hot index and logical width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHot {
    pub index: usize,
    pub width: usize,
}

impl OneHot {
    pub fn to_dense(self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        v[self.index] = 1.0;
        v
    }
}

impl StructuralRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn width(&self) -> usize {
        self.ids.len()
    }

    pub fn get(&self, id: &NodeId) -> Option<usize> {
        self.ids.get_index_of(id)
    }

    /// Index of `id`, registering it if unseen.
    pub fn register(&mut self, id: &NodeId) -> usize {
        match self.ids.get_index_of(id) {
            Some(i) => i,
            None => self.ids.insert_full(id.clone()).0,
        }
    }

    /// Registers a batch in first-seen order, growing storage once up front.
    pub fn register_batch<'a>(&mut self, ids: impl ExactSizeIterator<Item = &'a NodeId>) {
        self.ids.reserve(ids.len());
        for id in ids {
            self.register(id);
        }
    }

    /// Node id registered at `index`.
    pub fn id(&self, index: usize) -> Option<&NodeId> {
        self.ids.get_index(index)
    }

    /// Registered ids in index order.
    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.ids.iter()
    }

    pub fn embed_structural(&mut self, id: &NodeId) -> OneHot {
        let index = self.register(id);
        OneHot {
            index,
            width: self.width(),
        }
    }

    /// Sidecar JSON: `{"node_id": index, ...}` with keys sorted.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("registry serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let map: BTreeMap<String, usize> = serde_json::from_str(text)?;
        let mut pairs: Vec<(usize, String)> = map.into_iter().map(|(k, v)| (v, k)).collect();
        pairs.sort();
        let mut reg = StructuralRegistry::new();
        for (i, (idx, id)) in pairs.into_iter().enumerate() {
            if idx != i {
                return Err(serde::de::Error::custom(format!("registry indices are not contiguous at {id}")));
            }
            reg.register(&NodeId::new(id));
        }
        Ok(reg)
    }
}

/// Maps an error message to a fixed-dimension vector.
pub trait SemanticEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, message: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(message: &str) -> Vec<String> {
    message
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Signed feature hashing of tokens, L2-normalized.
///
/// Each token is hashed with FNV-1a; the hash modulo `dim` picks the bucket and
/// its top bit picks the sign. `seed` 0 uses the standard FNV offset basis,
/// other seeds give independent hash families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
    basis: u64,
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self, EmbedError> {
        if dim < MIN_DIM {
            return Err(EmbedError::DimensionTooSmall(dim));
        }
        let basis = if seed == 0 { seed::FNV_OFFSET } else { seed::splitmix64(seed) };
        Ok(HashingEmbedder { dim, basis })
    }

    fn bucket(&self, token: &str) -> (usize, f64) {
        let h = seed::fnv1a64_with_basis(token.as_bytes(), self.basis);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl SemanticEmbedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, message: &str) -> Result<Vec<f64>, EmbedError> {
        let tokens = tokenize(message);
        if tokens.is_empty() {
            return Err(EmbedError::EmptyMessage);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            let (b, s) = self.bucket(t);
            v[b] += s;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Every bucket cancelled out; fall back to the first token's bucket.
            let (b, _) = self.bucket(&tokens[0]);
            v[b] = 1.0;
            return Ok(v);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureSignature {
    pub instance_id: String,
    pub node_id: NodeId,
    pub message: String,
    pub structural_index: usize,
    pub structural_weight: f64,
    pub semantic: Vec<f64>,
}

impl FailureSignature {
    /// Structural block (zero-padded to `width`) followed by the semantic block.
    pub fn to_dense(&self, width: usize) -> Vec<f64> {
        assert!(self.structural_index < width, "width is smaller than the registry that produced the signature");
        let mut v = vec![0.0; width + self.semantic.len()];
        v[self.structural_index] = self.structural_weight;
        v[width..].copy_from_slice(&self.semantic);
        v
    }
}

/// Registry, embedder and block weight bundled together.
pub struct SignatureSpace {
    pub registry: StructuralRegistry,
    embedder: Arc<dyn SemanticEmbedder>,
    w_struct: f64,
}

impl SignatureSpace {
    pub fn new(embedder: Arc<dyn SemanticEmbedder>, w_struct: f64) -> Self {
        SignatureSpace {
            registry: StructuralRegistry::new(),
            embedder,
            w_struct,
        }
    }

    pub fn hashing(dim: usize, seed: u64, w_struct: f64) -> Result<Self, EmbedError> {
        Ok(Self::new(Arc::new(HashingEmbedder::new(dim, seed)?), w_struct))
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn embedder(&self) -> &dyn SemanticEmbedder {
        self.embedder.as_ref()
    }

    pub fn signature(&mut self, instance_id: &str, diag: &Diagnosis) -> Result<FailureSignature, EmbedError> {
        let semantic = self.embedder.embed(&diag.z_err)?;
        let structural_index = self.registry.register(&diag.v_err);
        Ok(FailureSignature {
            instance_id: instance_id.to_string(),
            node_id: diag.v_err.clone(),
            message: diag.z_err.clone(),
            structural_index,
            structural_weight: self.w_struct,
            semantic,
        })
    }

    /// Dense rows at the current registry width.
    pub fn matrix(&self, sigs: &[FailureSignature]) -> Vec<Vec<f64>> {
        let w = self.registry.width();
        sigs.iter().map(|s| s.to_dense(w)).collect()
    }
}

/// CSV export: `instance_id,node_index,sem_0,..` with one row per signature.
pub fn signatures_csv(sigs: &[FailureSignature], dim: usize) -> String {
    let mut out = String::new();
    out.push_str("instance_id,node_index");
    for j in 0..dim {
        let _ = write!(out, ",sem_{j}");
    }
    out.push('\n');
    for s in sigs {
        let _ = write!(out, "{},{}", csv_field(&s.instance_id), s.structural_index);
        for x in &s.semantic {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_append_semantics() {
        let mut reg = StructuralRegistry::new();
        for id in ["n0", "n1", "n2", "n3"] {
            reg.register(&id.into());
        }
        assert_eq!(reg.embed_structural(&"n2".into()).to_dense(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(reg.embed_structural(&"n9".into()).to_dense(), vec![0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(reg.width(), 5);
        assert_eq!(reg.get(&"n2".into()), Some(2));
    }

    #[test]
    fn registry_json_round_trip() {
        let mut reg = StructuralRegistry::new();
        for id in ["z", "a", "m"] {
            reg.register(&id.into());
        }
        let back = StructuralRegistry::from_json(&reg.to_json()).unwrap();
        assert_eq!(back, reg);
        assert!(StructuralRegistry::from_json(r#"{"a":0,"b":2}"#).is_err());
    }

    #[test]
    fn semantic_is_unit_and_deterministic() {
        let e = HashingEmbedder::new(64, 0).unwrap();
        for z in ["calculation error", "the sum was incorrect", "x", "A a a a b B"] {
            let v = e.embed(z).unwrap();
            assert_eq!(v, e.embed(z).unwrap());
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(e.embed(""), Err(EmbedError::EmptyMessage));
        assert_eq!(e.embed(" -- "), Err(EmbedError::EmptyMessage));
        assert_eq!(HashingEmbedder::new(4, 0), Err(EmbedError::DimensionTooSmall(4)));
    }

    #[test]
    fn padding_preserves_coordinates() {
        let mut space = SignatureSpace::hashing(16, 0, 1.0).unwrap();
        let d = |v: &str, z: &str| Diagnosis {
            v_err: v.into(),
            z_err: z.into(),
            confidence: 1.0,
        };
        let a = space.signature("i1", &d("A", "bad sum")).unwrap();
        let before = a.to_dense(space.registry.width());
        let b = space.signature("i2", &d("B", "bad sum")).unwrap();
        let after = a.to_dense(space.registry.width());
        assert_eq!(after.len(), before.len() + 1);
        assert_eq!(after[0], 1.0);
        assert_eq!(&after[2..], &before[1..]);
        let bd = b.to_dense(2);
        assert_eq!(after[..2].iter().zip(&bd[..2]).map(|(x, y)| x * y).sum::<f64>(), 0.0);
        assert_eq!(&after[2..], &bd[2..]);
    }

    #[test]
    fn csv_layout() {
        let s = FailureSignature {
            instance_id: "a,b".into(),
            node_id: "n".into(),
            message: "m".into(),
            structural_index: 3,
            structural_weight: 1.0,
            semantic: vec![0.5, -0.5],
        };
        assert_eq!(signatures_csv(&[s], 2), "instance_id,node_index,sem_0,sem_1\n\"a,b\",3,0.5,-0.5\n");
    }
}
