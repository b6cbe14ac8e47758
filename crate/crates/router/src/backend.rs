//! Chat-completion backend: an HTTP transport for real endpoints, retrying
//! client logic, and record/replay cassettes so routed runs are testable
//! (and rerunnable) without network access.
//!
//! # Example
//!
//! ```
//! use model_router::backend::{build_request, request_digest};
//! use model_router::decomp::Subtask;
//! use model_router::exec::{StepInput, TaskRecord};
//!
//! let task = TaskRecord {
//!     task_id: "t0".into(),
//!     text: "solve the task".into(),
//!     ground_truth: "42".into(),
//!     benchmark_tag: "demo".into(),
//! };
//! let subtask = Subtask::new(0, "first step");
//!
//! let req = build_request(&task, &subtask, "cloud-pro", &StepInput::TaskOnly);
//! // the digest pins each replay-cassette entry to the exact request bytes
//! let digest = request_digest(&req);
//! assert_eq!(digest, request_digest(&req));
//!
//! // feeding the previous step's output forward changes the request, and so the digest
//! let follow_up = build_request(&task, &subtask, "cloud-pro", &StepInput::Previous("partial".into()));
//! assert_ne!(digest, request_digest(&follow_up));
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decomp::Subtask;
use crate::error::{Error, Result};
use crate::exec::{StepExecutor, StepInput, StepOutcome, TaskRecord, FAILURE_MARKER};
use crate::pool::{ModelPool, TokenUsage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub content: String,
    pub usage: TokenUsage,
    pub model: String,
    pub latency_ms: u64,
}

/// Raw HTTP boundary; injected so tests can script responses and assert
/// that replay mode never touches the network.
pub trait Transport {
    fn post(&self, endpoint: &str, auth: Option<&str>, body: &Value) -> Result<(u16, Value)>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: std::time::Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::MalformedResponse(format!("client build failed: {e}")))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, auth: Option<&str>, body: &Value) -> Result<(u16, Value)> {
        let mut req = self.client.post(endpoint).json(body);
        if let Some(token) = auth {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| Error::MalformedResponse(format!("transport failure: {e}")))?;
        let status = resp.status().as_u16();
        let value: Value = resp
            .json()
            .map_err(|e| Error::MalformedResponse(format!("non-JSON body: {e}")))?;
        Ok((status, value))
    }
}

/// Panics on use: injected wherever the caller asserts zero network activity.
pub struct PanicTransport;

impl Transport for PanicTransport {
    fn post(&self, _endpoint: &str, _auth: Option<&str>, _body: &Value) -> Result<(u16, Value)> {
        panic!("network transport used in a no-network context");
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_backoff_ms: 250 }
    }
}

fn parse_completion(value: &Value, latency_ms: u64) -> Result<CompletionResponse> {
    let content = value["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?
        .to_string();
    let usage = TokenUsage::new(
        value["usage"]["prompt_tokens"]
            .as_u64()
            .ok_or_else(|| Error::MalformedResponse("missing usage.prompt_tokens".into()))?,
        value["usage"]["completion_tokens"]
            .as_u64()
            .ok_or_else(|| Error::MalformedResponse("missing usage.completion_tokens".into()))?,
    );
    let model = value["model"].as_str().unwrap_or_default().to_string();
    Ok(CompletionResponse { content, usage, model, latency_ms })
}

/// Issue one chat completion with exponential backoff on transient
/// failures (429 and 5xx). Authentication failures never retry. The sleep
/// function is injected; accumulated backoff counts toward latency.
pub fn chat_complete(
    transport: &dyn Transport,
    endpoint: &str,
    auth: Option<&str>,
    req: &CompletionRequest,
    retry: &RetryPolicy,
    sleep: &mut dyn FnMut(u64),
) -> Result<CompletionResponse> {
    let body = serde_json::to_value(req)?;
    let mut backoff_total = 0u64;
    let mut attempts = 0usize;
    loop {
        attempts += 1;
        let started = std::time::Instant::now();
        let (status, value) = transport.post(endpoint, auth, &body)?;
        let elapsed = started.elapsed().as_millis() as u64;
        match status {
            200 => {
                return parse_completion(&value, elapsed + backoff_total);
            }
            401 | 403 => return Err(Error::AuthError),
            429 | 500..=599 => {
                if attempts > retry.max_retries {
                    return Err(Error::TimeoutExhausted(attempts));
                }
                let backoff = retry.base_backoff_ms * (1 << (attempts - 1));
                sleep(backoff);
                backoff_total += backoff;
            }
            other => {
                return Err(Error::MalformedResponse(format!("unexpected HTTP status {other}")));
            }
        }
    }
}

/// Stable digest of the request fields a cassette keys on. The sampling
/// seed is deliberately excluded: replays must hit regardless of it.
pub fn request_digest(req: &CompletionRequest) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(req.model.as_bytes());
    for m in &req.messages {
        eat(m.role.as_bytes());
        eat(&[0]);
        eat(m.content.as_bytes());
        eat(&[0]);
    }
    eat(&req.max_tokens.to_le_bytes());
    eat(&req.temperature.to_le_bytes());
    format!("{h:016x}")
}

#[derive(Debug, Serialize, Deserialize)]
struct CassetteEntry {
    digest: String,
    request: CompletionRequest,
    response: CompletionResponse,
}

/// Recorded request/response exchanges keyed by request digest.
#[derive(Debug, Default)]
pub struct Cassette {
    entries: HashMap<String, CompletionResponse>,
}

impl Cassette {
    pub fn load(input: impl BufRead) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| Error::CorruptCassette(format!("line {}: {e}", lineno + 1)))?;
            if entry.digest != request_digest(&entry.request) {
                return Err(Error::CorruptCassette(format!(
                    "line {}: digest does not match request",
                    lineno + 1
                )));
            }
            entries.insert(entry.digest, entry.response);
        }
        Ok(Cassette { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, req: &CompletionRequest) -> Result<&CompletionResponse> {
        let digest = request_digest(req);
        self.entries
            .get(&digest)
            .ok_or(Error::CassetteMiss(digest))
    }
}

pub fn write_cassette_entry(
    req: &CompletionRequest,
    resp: &CompletionResponse,
    out: &mut dyn Write,
) -> Result<()> {
    let entry = CassetteEntry {
        digest: request_digest(req),
        request: req.clone(),
        response: resp.clone(),
    };
    serde_json::to_writer(&mut *out, &entry)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// The one prompt builder shared by live, recording and replay executors,
/// so digests line up across modes.
pub fn build_request(
    task: &TaskRecord,
    subtask: &Subtask,
    model_name: &str,
    input: &StepInput,
) -> CompletionRequest {
    let context = match input {
        StepInput::TaskOnly => String::new(),
        StepInput::Previous(prev) => format!("\n\nOutput of the previous step:\n{prev}"),
        StepInput::Failed => {
            format!("\n\nThe previous step failed; marker: {FAILURE_MARKER}")
        }
    };
    CompletionRequest {
        model: model_name.to_string(),
        messages: vec![
            Message {
                role: "system".into(),
                content: "You are solving one subtask of a decomposed reasoning task. \
                          Answer with the subtask result only."
                    .into(),
            },
            Message {
                role: "user".into(),
                content: format!("Task: {}\n\nSubtask: {}{}", task.text, subtask.text, context),
            },
        ],
        max_tokens: 1024,
        temperature: 0.0,
        seed: None,
    }
}

/// Live executor: runs each subtask against its model's endpoint and
/// optionally appends every exchange to a recording.
pub struct HttpSubtaskExecutor<'a> {
    pub transport: &'a dyn Transport,
    pub pool: &'a ModelPool,
    pub retry: RetryPolicy,
    pub recorder: Option<RefCell<&'a mut dyn Write>>,
}

impl StepExecutor for HttpSubtaskExecutor<'_> {
    fn execute(
        &self,
        task: &TaskRecord,
        subtask: &Subtask,
        model_id: usize,
        input: &StepInput,
    ) -> Result<StepOutcome> {
        let model = self.pool.get(model_id);
        let endpoint = model.endpoint.as_deref().ok_or_else(|| {
            Error::InvalidPoolConfig(format!("model {} has no endpoint", model.name))
        })?;
        let auth = model
            .api_key_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let req = build_request(task, subtask, &model.name, input);
        let mut sleep = |ms: u64| std::thread::sleep(std::time::Duration::from_millis(ms));
        let resp = chat_complete(self.transport, endpoint, auth.as_deref(), &req, &self.retry, &mut sleep)?;
        if let Some(rec) = &self.recorder {
            write_cassette_entry(&req, &resp, *rec.borrow_mut())?;
        }
        Ok(StepOutcome {
            content: resp.content,
            usage: resp.usage,
            latency_ms: resp.latency_ms,
        })
    }
}

/// Offline executor: answers every subtask from the cassette, touching no
/// network at all.
pub struct ReplayExecutor<'a> {
    pub cassette: Cassette,
    pub pool: &'a ModelPool,
}

impl StepExecutor for ReplayExecutor<'_> {
    fn execute(
        &self,
        task: &TaskRecord,
        subtask: &Subtask,
        model_id: usize,
        input: &StepInput,
    ) -> Result<StepOutcome> {
        let model = self.pool.get(model_id);
        let req = build_request(task, subtask, &model.name, input);
        let resp = self.cassette.lookup(&req)?;
        Ok(StepOutcome {
            content: resp.content.clone(),
            usage: resp.usage,
            latency_ms: resp.latency_ms,
        })
    }
}
