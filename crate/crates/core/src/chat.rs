//! Chat-completions style model backends.

use crate::backend::{BackendError, JsonClient};
use crate::digest::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<bool>,
}

impl ChatRequest {
    /// Fixture key: digest of the message list only, so decoding settings
    /// do not invalidate scripted replies.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(&self.messages).expect("messages serialize"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn describe(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// HTTP chat backend. Accepts both the flat `{text, token_logprobs}` answer
/// and an OpenAI-style `choices[0].message.content` answer.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    url: String,
    client: JsonClient,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, timeout: Duration, bearer: Option<String>) -> Self {
        Self {
            url: url.into(),
            client: JsonClient::new(timeout, bearer),
        }
    }
}

fn decode_response(v: Value) -> Result<ChatResponse, BackendError> {
    if v.get("text").is_some() {
        return serde_json::from_value(v).map_err(|e| BackendError::Protocol(e.to_string()));
    }
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("response has neither text nor choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("choices[0].message.content missing".into()))?
        .to_string();
    let token_logprobs = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .map(|toks| {
            toks.iter()
                .filter_map(|t| t.get("logprob").and_then(Value::as_f64))
                .collect()
        });
    let usage = v
        .get("usage")
        .and_then(|u| serde_json::from_value(u.clone()).ok());
    Ok(ChatResponse {
        text,
        token_logprobs,
        usage,
    })
}

impl ChatBackend for HttpChatBackend {
    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let v: Value = self.client.post(&self.url, request)?;
        decode_response(v)
    }
}

/// Scripted replies keyed by [`ChatRequest::digest`]; a miss is an error.
#[derive(Debug, Clone, Default)]
pub struct FixtureChatBackend {
    label: String,
    replies: HashMap<String, ChatResponse>,
}

impl FixtureChatBackend {
    pub fn new(replies: impl IntoIterator<Item = (String, ChatResponse)>) -> Self {
        Self {
            label: "fixture:inline".into(),
            replies: replies.into_iter().collect(),
        }
    }

    /// JSON object mapping request digest to a response object.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))?;
        let replies: BTreeMap<String, ChatResponse> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))?;
        Ok(Self {
            label: format!("fixture:{}", path.display()),
            replies: replies.into_iter().collect(),
        })
    }
}

impl ChatBackend for FixtureChatBackend {
    fn describe(&self) -> String {
        self.label.clone()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = request.digest();
        self.replies
            .get(&key)
            .cloned()
            .ok_or(BackendError::FixtureMiss(format!("request digest {key}")))
    }
}

type Responder = dyn Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync;

/// In-process backend driven by a closure.
pub struct ScriptedChatBackend {
    responder: Box<Responder>,
    delay: Duration,
}

impl ScriptedChatBackend {
    pub fn new(
        responder: impl Fn(&ChatRequest) -> Result<ChatResponse, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            responder: Box::new(responder),
            delay: Duration::ZERO,
        }
    }

    /// Sleeps before answering so concurrent callers overlap.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl ChatBackend for ScriptedChatBackend {
    fn describe(&self) -> String {
        "scripted".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        (self.responder)(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub digest: String,
    pub ok: bool,
}

/// Wraps a backend with a call ledger and an in-flight high-water mark.
pub struct Recording<B> {
    inner: B,
    ledger: Mutex<Vec<LedgerEntry>>,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
}

impl<B: ChatBackend> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            ledger: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.ledger.lock().expect("ledger lock").len()
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().expect("ledger lock").clone()
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.ledger.lock().expect("ledger lock").clear();
        self.high_water.store(0, Ordering::SeqCst);
    }
}

impl<B: ChatBackend> ChatBackend for Recording<B> {
    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        let result = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.ledger.lock().expect("ledger lock").push(LedgerEntry {
            digest: request.digest(),
            ok: result.is_ok(),
        });
        result
    }
}
