//! Turning a failed trace into a `(node, message)` pair.
//!
//! Every way diagnosis can go wrong ends up as [`DiagnosisOutcome::Undiagnosable`];
//! those traces stay in the pool but are left out of clustering.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::NodeId;
use crate::harness::{ChatClient, ChatMessage, Trace};

pub const DEFAULT_CONFIDENCE_FLOOR: f64 = 0.5;

/// Prompt sent to the diagnosing model; `[TRACE]` is replaced by the trace JSON.
pub const DIAGNOSER_TEMPLATE: &str = "You are an error analyzer. Given this execution trace: [TRACE].\nIdentify the node causing the failure (verr) and extract a concise error message (zerr).\nOutput only in JSON: {\"verr\": \"node_id\", \"zerr\": \"brief_error_description\"}.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub v_err: NodeId,
    pub z_err: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DiagnosisOutcome {
    Diagnosed(Diagnosis),
    Undiagnosable { reason: String },
}

impl DiagnosisOutcome {
    fn undiagnosable(reason: impl Into<String>) -> Self {
        DiagnosisOutcome::Undiagnosable { reason: reason.into() }
    }

    pub fn diagnosis(&self) -> Option<&Diagnosis> {
        match self {
            DiagnosisOutcome::Diagnosed(d) => Some(d),
            DiagnosisOutcome::Undiagnosable { .. } => None,
        }
    }
}

/// Proposes a diagnosis for a failed trace, or a reason it cannot.
pub trait Diagnoser: Send + Sync {
    fn diagnose(&self, trace: &Trace) -> Result<Diagnosis, String>;
}

/// Blames the earliest error-status record.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleDiagnoser;

impl Diagnoser for RuleDiagnoser {
    fn diagnose(&self, trace: &Trace) -> Result<Diagnosis, String> {
        let rec = trace.first_error().ok_or("no error record")?;
        Ok(Diagnosis {
            v_err: rec.node_id.clone(),
            z_err: rec.error_message.clone(),
            confidence: 1.0,
        })
    }
}

/// Asks a chat model, using the fixed analyzer prompt.
pub struct LlmDiagnoser {
    client: Arc<dyn ChatClient>,
}

impl LlmDiagnoser {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        LlmDiagnoser { client }
    }

    pub fn prompt(trace: &Trace) -> String {
        let json = serde_json::to_string(trace).expect("trace serialization is infallible");
        DIAGNOSER_TEMPLATE.replace("[TRACE]", &json)
    }
}

#[derive(Deserialize)]
struct Reply {
    verr: String,
    zerr: String,
}

/// Parses `{"verr": .., "zerr": ..}`, tolerating prose around the object.
/// Well-formed replies get confidence 1.0.
pub fn parse_diagnoser_reply(text: &str) -> Option<Diagnosis> {
    let text = text.trim();
    let reply: Reply = serde_json::from_str(text).ok().or_else(|| {
        let start = text.find('{')?;
        let end = text.rfind('}')?;
        serde_json::from_str(text.get(start..=end)?).ok()
    })?;
    Some(Diagnosis {
        v_err: NodeId::new(reply.verr.trim()),
        z_err: reply.zerr.trim().to_string(),
        confidence: 1.0,
    })
}

impl Diagnoser for LlmDiagnoser {
    fn diagnose(&self, trace: &Trace) -> Result<Diagnosis, String> {
        let reply = self
            .client
            .complete(&[ChatMessage::user(Self::prompt(trace))])
            .map_err(|e| format!("{} {e}", crate::harness::BACKEND_ERROR_PREFIX))?;
        parse_diagnoser_reply(&reply.content).ok_or_else(|| "unparseable".to_string())
    }
}

/// Diagnoses `trace` and applies the validity checks: the node must appear in
/// the trace, the message must be nonempty, and confidence must reach the floor.
pub fn distill(trace: &Trace, diagnoser: &dyn Diagnoser, confidence_floor: f64) -> DiagnosisOutcome {
    if trace.success {
        return DiagnosisOutcome::undiagnosable("trace succeeded");
    }
    let d = match diagnoser.diagnose(trace) {
        Ok(d) => d,
        Err(reason) => return DiagnosisOutcome::undiagnosable(reason),
    };
    if !trace.records.iter().any(|r| r.node_id == d.v_err) {
        return DiagnosisOutcome::undiagnosable("unknown node");
    }
    if d.z_err.trim().is_empty() {
        return DiagnosisOutcome::undiagnosable("empty message");
    }
    if d.confidence < confidence_floor {
        return DiagnosisOutcome::undiagnosable("low confidence");
    }
    DiagnosisOutcome::Diagnosed(d)
}
