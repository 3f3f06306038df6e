//! HTTP policy client.
//!
//! Each step POSTs the whole conversation as JSON:
//!
//! ```json
//! {"model": "m", "messages": [
//!   {"role": "system", "content": [{"type": "text", "text": "..."}]},
//!   {"role": "user", "content": [
//!     {"type": "image", "index": 1, "png_base64": "iVBORw0..."},
//!     {"type": "text", "text": "Question: ..."}]}]}
//! ```
//!
//! The reply body is either `{"text": "..."}`, an OpenAI-style
//! `{"choices": [{"message": {"content": "..."}}]}`, or plain text.
//! Connection failures, timeouts, 429 and 5xx are retried with exponential
//! backoff up to `max_attempts` total tries; other statuses fail at once.
//! One client can be shared by many episodes; at most `max_in_flight`
//! requests are outstanding at any time.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ContentPart, ImageRegistry, Message, Policy, PolicyError, PolicyRequest};
use crate::canvas::encode_png;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/generate".into(),
            model: "policy".into(),
            timeout_secs: 120.0,
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            max_in_flight: 8,
        }
    }
}

impl RemoteConfig {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemotePolicy {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl std::fmt::Debug for RemotePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePolicy").field("cfg", &self.cfg).finish()
    }
}

enum Failure {
    Transient(String),
    Fatal(String),
}

pub fn remote_policy(cfg: RemoteConfig) -> RemotePolicy {
    RemotePolicy::new(cfg)
}

impl RemotePolicy {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs.max(0.001))))
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(agent_cfg),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                max: cfg.max_in_flight.max(1),
            },
            cfg,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn body(&self, conversation: &[Message], registry: &ImageRegistry) -> Result<String, PolicyError> {
        let mut messages = Vec::with_capacity(conversation.len());
        for m in conversation {
            let mut parts = Vec::with_capacity(m.content.len());
            for p in &m.content {
                parts.push(match p {
                    ContentPart::Text { text } => json!({"type": "text", "text": text}),
                    ContentPart::Image { index } => {
                        let img = registry.get(*index).ok_or_else(|| {
                            PolicyError(format!("conversation references missing image {index}"))
                        })?;
                        let png = encode_png(img).map_err(|e| PolicyError(e.to_string()))?;
                        json!({
                            "type": "image",
                            "index": index,
                            "png_base64": base64::engine::general_purpose::STANDARD.encode(png),
                        })
                    }
                });
            }
            messages.push(json!({"role": m.role, "content": parts}));
        }
        Ok(json!({"model": self.cfg.model, "messages": messages}).to_string())
    }

    fn send_once(&self, body: &str) -> Result<String, Failure> {
        let _permit = self.in_flight.acquire();
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| Failure::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        match status {
            200..=299 => Ok(reply_text(&text)),
            429 | 500..=599 => Err(Failure::Transient(format!("HTTP {status}"))),
            _ => Err(Failure::Fatal(format!("HTTP {status}: {}", truncate(&text, 200)))),
        }
    }

    /// Sends one request body, retrying transient failures.
    pub fn complete(&self, body: &str) -> Result<String, PolicyError> {
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.cfg.backoff(attempt - 1));
            }
            match self.send_once(body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(msg)) => return Err(PolicyError(msg)),
                Err(Failure::Transient(msg)) => last = msg,
            }
        }
        Err(PolicyError(format!(
            "giving up after {attempts} attempt(s): {last}"
        )))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn reply_text(body: &str) -> String {
    match serde_json::from_str::<Value>(body) {
        Ok(v) => {
            if let Some(t) = v.get("text").and_then(Value::as_str) {
                return t.to_string();
            }
            if let Some(t) = v
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
            {
                return t.to_string();
            }
            body.to_string()
        }
        Err(_) => body.to_string(),
    }
}

impl Policy for RemotePolicy {
    fn respond(&self, req: &PolicyRequest<'_>) -> Result<String, PolicyError> {
        let body = self.body(req.conversation, req.registry)?;
        self.complete(&body)
    }

    fn is_stochastic(&self) -> bool {
        true
    }
}
