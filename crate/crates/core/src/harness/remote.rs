//! Chat-completions backend.
//!
//! Every node with a non-empty prompt becomes one request: the prompt is the
//! system message, the node's input the user message. Tool and aggregate
//! nodes pass their input through. Transport problems never escape as `Err`;
//! they become an error record whose message starts with `backend:`.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Backend, DatasetInstance, NodeRecord, NodeStatus, Trace, Verifier};
use crate::graph::{NodeId, WorkflowGraph};

/// Message prefix that marks a transport or protocol failure in a trace.
pub const BACKEND_ERROR_PREFIX: &str = "backend:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    /// Total tokens reported by the server, or 0 if absent.
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RemoteError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

/// Anything that answers a list of chat messages.
pub trait ChatClient: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, RemoteError>;
}

/// Extracts `choices[0].message.content` and the token count.
pub fn parse_reply(body: &str) -> Result<ChatReply, RemoteError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| RemoteError::Malformed(e.to_string()))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| RemoteError::Malformed("missing choices[0].message.content".into()))?;
    let tokens = v
        .pointer("/usage/total_tokens")
        .and_then(|t| t.as_u64())
        .unwrap_or(0);
    Ok(ChatReply {
        content: content.to_string(),
        tokens,
    })
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.cv.notify_one();
    }
}

pub struct HttpChatClient {
    config: RemoteConfig,
    token: String,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl HttpChatClient {
    /// Fails with `BackendUnavailable` if the token variable is unset.
    pub fn new(config: RemoteConfig) -> Result<Self, RemoteError> {
        let token = std::env::var(&config.api_key_env).map_err(|_| {
            RemoteError::BackendUnavailable(format!("environment variable {} is not set", config.api_key_env))
        })?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| RemoteError::BackendUnavailable(e.to_string()))?;
        let gate = Gate {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        Ok(HttpChatClient {
            config,
            token,
            http,
            gate,
        })
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatReply, RemoteError> {
        let resp = self
            .http
            .post(&self.config.base_url)
            .bearer_auth(&self.token)
            .json(request)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    RemoteError::Timeout
                } else {
                    RemoteError::Transport(e.to_string())
                }
            })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| RemoteError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(RemoteError::Status {
                status: status.as_u16(),
                body,
            });
        }
        parse_reply(&body)
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<ChatReply, RemoteError> {
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages: messages.to_vec(),
            temperature: self.config.temperature,
        };
        self.gate.acquire();
        let out = self.send(&request);
        self.gate.release();
        out
    }
}

pub struct RemoteBackend {
    client: Arc<dyn ChatClient>,
    verifier: Verifier,
}

impl RemoteBackend {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        RemoteBackend {
            client,
            verifier: Verifier::default(),
        }
    }

    pub fn with_verifier(mut self, verifier: Verifier) -> Self {
        self.verifier = verifier;
        self
    }
}

impl Backend for RemoteBackend {
    fn execute(&self, graph: &WorkflowGraph, instance: &DatasetInstance, seed: u64) -> Trace {
        let order = graph
            .topological_order()
            .expect("workflow graphs are acyclic by construction");
        let mut outputs: BTreeMap<&NodeId, String> = BTreeMap::new();
        let mut records = Vec::with_capacity(order.len());
        let mut tokens = 0;
        let mut failed = false;
        for id in &order {
            let node = graph.node(id).expect("order comes from graph");
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
            let mut record = NodeRecord {
                node_id: id.clone(),
                input: input.clone(),
                output: input.clone(),
                status: NodeStatus::Ok,
                error_message: String::new(),
            };
            if !failed && node.kind.has_prompt() && !node.prompt.is_empty() {
                let messages = [ChatMessage::system(&node.prompt), ChatMessage::user(&input)];
                match self.client.complete(&messages) {
                    Ok(reply) => {
                        tokens += reply.tokens;
                        record.output = reply.content;
                    }
                    Err(e) => {
                        failed = true;
                        record.status = NodeStatus::Error;
                        record.error_message = format!("{BACKEND_ERROR_PREFIX} {e}");
                        record.output = format!("error: {}", record.error_message);
                    }
                }
            }
            outputs.insert(id, record.output.clone());
            records.push(record);
        }
        let final_output = outputs.get(graph.exit()).cloned().unwrap_or_default();
        Trace {
            instance_id: instance.id.clone(),
            success: !failed && self.verifier.check(&final_output, &instance.ground_truth),
            final_output,
            records,
            seed,
            cost_units: tokens,
        }
    }
}
