//! Provider-agnostic chat completion with per-role model selection,
//! transcript capture, and re-prompting on unparseable output.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleName {
    Selector,
    Designer,
    Writer,
    Digester,
}

impl RoleName {
    pub const ALL: [RoleName; 4] = [
        RoleName::Selector,
        RoleName::Designer,
        RoleName::Writer,
        RoleName::Digester,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleName::Selector => "selector",
            RoleName::Designer => "designer",
            RoleName::Writer => "writer",
            RoleName::Digester => "digester",
        }
    }
}

impl fmt::Display for RoleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleName {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleName::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| GatewayError::RoleUnconfigured(s.to_string()))
    }
}

/// Model settings for one role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRole {
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_max_attempts() -> u32 {
    3
}

impl LlmRole {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: default_temperature(),
            max_attempts: default_max_attempts(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model.trim().is_empty() {
            return Err("model id is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} is outside [0, 2]", self.temperature));
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub roles: BTreeMap<RoleName, LlmRole>,
    /// First backoff delay after a transport failure; doubles per retry.
    pub backoff_base: Duration,
}

impl GatewayConfig {
    /// Every role mapped to `model` with default settings and no backoff.
    pub fn uniform(model: &str, max_attempts: u32) -> Self {
        let roles = RoleName::ALL
            .into_iter()
            .map(|r| {
                (
                    r,
                    LlmRole {
                        max_attempts,
                        ..LlmRole::new(model)
                    },
                )
            })
            .collect();
        Self {
            roles,
            backoff_base: Duration::ZERO,
        }
    }
}

/// A single chat-completion request as seen by a backend.
#[derive(Debug, Clone)]
pub struct ChatRequest<'a> {
    pub role: RoleName,
    /// Call site label (e.g. `selector`, `writer-2`), used for routing
    /// scripted replies and for transcript attribution.
    pub lane: &'a str,
    pub model: &'a str,
    pub temperature: f64,
    pub prompt: &'a str,
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub role: RoleName,
    pub lane: String,
    pub model: String,
    pub attempt: u32,
    pub timestamp: DateTime<Utc>,
    pub request: String,
    pub response: String,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("role {0:?} is not configured")]
    RoleUnconfigured(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("{role}: transport failure after {attempts} attempts: {last}")]
    Transport {
        role: RoleName,
        attempts: u32,
        last: String,
    },
    #[error("{role}: no parseable output after {attempts} attempts; last error: {last_error}")]
    ParseExhausted {
        role: RoleName,
        attempts: u32,
        last_error: String,
    },
}

/// A parsed structured response and the attempt on which it parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub attempts: u32,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    transcripts: Mutex<Vec<Transcript>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

const REPAIR_ECHO_LIMIT: usize = 4000;

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        Self {
            backend,
            config,
            transcripts: Mutex::new(Vec::new()),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn role(&self, role: RoleName) -> Result<&LlmRole, GatewayError> {
        self.config
            .roles
            .get(&role)
            .ok_or_else(|| GatewayError::RoleUnconfigured(role.to_string()))
    }

    /// Sends `prompt` for `role`, retrying transport failures with
    /// exponential backoff up to the role's `max_attempts`.
    pub fn complete(&self, role: RoleName, lane: &str, prompt: &str) -> Result<String, GatewayError> {
        let mut counter = 0;
        self.complete_counted(role, lane, prompt, &mut counter)
    }

    fn complete_counted(
        &self,
        role: RoleName,
        lane: &str,
        prompt: &str,
        counter: &mut u32,
    ) -> Result<String, GatewayError> {
        let settings = self.role(role)?;
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let mut last = String::new();
        for retry in 0..settings.max_attempts {
            if retry > 0 {
                let delay = self.config.backoff_base.saturating_mul(1 << (retry - 1).min(16));
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            *counter += 1;
            let request = ChatRequest {
                role,
                lane,
                model: &settings.model,
                temperature: settings.temperature,
                prompt,
                attempt: *counter,
            };
            let result = self.backend.chat(&request);
            let (response, error) = match &result {
                Ok(text) => (text.clone(), None),
                Err(e) => (String::new(), Some(e.to_string())),
            };
            self.record(Transcript {
                role,
                lane: lane.to_string(),
                model: settings.model.clone(),
                attempt: *counter,
                timestamp: Utc::now(),
                request: prompt.to_string(),
                response,
                error,
            });
            match result {
                Ok(text) => return Ok(text),
                Err(BackendError::Transport(msg)) => {
                    tracing::warn!(%role, lane, attempt = *counter, "transport failure: {msg}");
                    last = msg;
                }
            }
        }
        Err(GatewayError::Transport {
            role,
            attempts: settings.max_attempts,
            last,
        })
    }

    /// Calls the model until `parser` accepts the response, feeding each
    /// parse error back in a repair prompt. At most `max_attempts` model
    /// responses are parsed.
    pub fn complete_structured<T>(
        &self,
        role: RoleName,
        lane: &str,
        prompt: &str,
        parser: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Parsed<T>, GatewayError> {
        let max = self.role(role)?.max_attempts;
        let mut counter = 0;
        let mut current = prompt.to_string();
        let mut last_error = String::new();
        for attempt in 1..=max {
            let response = self.complete_counted(role, lane, &current, &mut counter)?;
            match parser(&response) {
                Ok(value) => {
                    return Ok(Parsed {
                        value,
                        attempts: attempt,
                    })
                }
                Err(err) => {
                    tracing::info!(%role, lane, attempt, "unparseable response: {err}");
                    current = repair_prompt(prompt, &response, &err);
                    last_error = err;
                }
            }
        }
        Err(GatewayError::ParseExhausted {
            role,
            attempts: max,
            last_error,
        })
    }

    fn record(&self, transcript: Transcript) {
        self.transcripts
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(transcript);
    }

    /// All transcripts recorded so far.
    pub fn transcripts(&self) -> Vec<Transcript> {
        self.transcripts.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Removes and returns the transcripts recorded for `lane`.
    pub fn take_transcripts(&self, lane: &str) -> Vec<Transcript> {
        let mut all = self.transcripts.lock().unwrap_or_else(|p| p.into_inner());
        let (taken, kept): (Vec<_>, Vec<_>) = all.drain(..).partition(|t| t.lane == lane);
        *all = kept;
        taken
    }
}

pub fn repair_prompt(original: &str, response: &str, error: &str) -> String {
    let echoed: String = response.chars().take(REPAIR_ECHO_LIMIT).collect();
    format!(
        "{original}\n\n---\nYour previous output failed to parse because: {error}\n\n\
         Your previous output was:\n<<<\n{echoed}\n>>>\n\n\
         Respond again with the complete answer in the required format.\n"
    )
}

/// Writes transcripts as `NN-<lane>-attempt-<k>.md` files under `dir`.
pub fn write_transcripts(dir: &Path, transcripts: &[Transcript]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let start = fs::read_dir(dir)?.count();
    for (i, t) in transcripts.iter().enumerate() {
        let name = format!("{:02}-{}-attempt-{}.md", start + i + 1, t.lane, t.attempt);
        let mut body = format!(
            "role: {}\nlane: {}\nmodel: {}\nattempt: {}\ntimestamp: {}\n",
            t.role,
            t.lane,
            t.model,
            t.attempt,
            t.timestamp.to_rfc3339()
        );
        if let Some(err) = &t.error {
            body.push_str(&format!("error: {err}\n"));
        }
        body.push_str(&format!(
            "\n==== request ====\n{}\n\n==== response ====\n{}\n",
            t.request, t.response
        ));
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    Ok(())
}

/// One scripted backend reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedReply {
    Text(String),
    TransportError(String),
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::Text(s.to_string())
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::Text(s)
    }
}

/// Deterministic backend that replays queued replies. A request is served
/// from the queue keyed by its lane if one exists, otherwise from the queue
/// keyed by its role name.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queues: Mutex<HashMap<String, VecDeque<ScriptedReply>>>,
    seen: Mutex<Vec<(String, String)>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, key: &str, reply: impl Into<ScriptedReply>) -> &Self {
        self.queues
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_default()
            .push_back(reply.into());
        self
    }

    /// `(lane, prompt)` of every request served, in arrival order.
    pub fn requests(&self) -> Vec<(String, String)> {
        self.seen.lock().unwrap().clone()
    }

    pub fn remaining(&self, key: &str) -> usize {
        self.queues.lock().unwrap().get(key).map_or(0, VecDeque::len)
    }

    /// Builds a backend from a YAML mapping of lane or role names to lists
    /// of responses.
    pub fn from_yaml(text: &str) -> Result<Self, String> {
        let script: BTreeMap<String, Vec<String>> = serde_yaml::from_str(text).map_err(|e| e.to_string())?;
        let backend = Self::new();
        for (key, replies) in script {
            for reply in replies {
                backend.push(&key, reply);
            }
        }
        Ok(backend)
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        self.seen
            .lock()
            .unwrap()
            .push((request.lane.to_string(), request.prompt.to_string()));
        let mut queues = self.queues.lock().unwrap();
        let reply = [request.lane, request.role.as_str()]
            .into_iter()
            .find_map(|key| queues.get_mut(key).and_then(VecDeque::pop_front));
        match reply {
            Some(ScriptedReply::Text(t)) => Ok(t),
            Some(ScriptedReply::TransportError(e)) => Err(BackendError::Transport(e)),
            None => Err(BackendError::Transport(format!(
                "script exhausted for lane {:?}",
                request.lane
            ))),
        }
    }
}

/// Backend computing each reply from the request with a closure.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest<'_>) -> Result<String, BackendError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// OpenAI-compatible `chat/completions` endpoint.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": request.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Transport(format!("bad response body: {e}")))?;
        extract_message_content(&value)
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn extract_message_content(value: &serde_json::Value) -> Result<String, BackendError> {
    value
        .pointer("/choices/0/message/content")
        .and_then(serde_json::Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))
}
