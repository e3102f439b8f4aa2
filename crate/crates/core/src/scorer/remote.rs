//! HTTP client for an external scorer speaking `POST /v1/logprob`.
//!
//! Request body: `{"model", "context": [{"role","text"}…], "reply": {"role","text"}}`.
//! Response body: `{"total_logprob", "token_count", "model"}`; failures come
//! back as `{"error"}` with a non-2xx status.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LogProbResult, ScoreError, ScoreRequest, Scorer, Turn};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://127.0.0.1:8000`.
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first failed one.
    pub retries: u32,
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_token: None,
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(200),
            max_in_flight: 8,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    context: &'a [Turn],
    reply: &'a Turn,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    total_logprob: f64,
    token_count: u32,
    #[allow(dead_code)]
    model: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WireError {
    error: String,
}

#[derive(Debug, Deserialize)]
struct WireHealth {
    status: String,
    model: Option<String>,
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    available: Mutex<usize>,
    released: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.released.wait(n).expect("permit lock");
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.released.notify_one();
    }
}

pub struct RemoteScorer {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, LogProbResult>>,
    permits: Permits,
    network_calls: AtomicUsize,
}

impl std::fmt::Debug for RemoteScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteScorer").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl RemoteScorer {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits {
            available: Mutex::new(cfg.max_in_flight.max(1)),
            released: Condvar::new(),
        };
        RemoteScorer {
            cfg,
            agent,
            cache: Mutex::new(HashMap::new()),
            permits,
            network_calls: AtomicUsize::new(0),
        }
    }

    /// HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    /// Cache key: model id plus SHA-256 of the serialized request.
    pub fn cache_key(&self, req: &ScoreRequest) -> String {
        let body = serde_json::to_vec(&WireRequest {
            model: &self.cfg.model,
            context: &req.context,
            reply: &req.reply,
        })
        .expect("request serializes");
        format!("{}:{}", self.cfg.model, hex::encode(Sha256::digest(&body)))
    }

    /// `GET /v1/health`; returns the served model name.
    pub fn health(&self) -> Result<String, ScoreError> {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut resp = self
            .agent
            .get(&self.url("/v1/health"))
            .call()
            .map_err(|e| ScoreError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScoreError::Transport(e.to_string()))?;
        let health: WireHealth = serde_json::from_str(&body)
            .map_err(|e| ScoreError::Protocol(format!("bad health response: {e}")))?;
        if health.status != "ok" {
            return Err(ScoreError::Protocol(format!("sidecar status {:?}", health.status)));
        }
        Ok(health.model.unwrap_or_default())
    }

    fn attempt(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        let mut call = self.agent.post(&self.url("/v1/logprob"));
        if let Some(token) = &self.cfg.auth_token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = call
            .send_json(WireRequest {
                model: &self.cfg.model,
                context: &req.context,
                reply: &req.reply,
            })
            .map_err(|e| ScoreError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ScoreError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<WireError>(&body)
                .map(|e| e.error)
                .unwrap_or(body);
            return Err(if status >= 500 {
                ScoreError::Transport(format!("HTTP {status}: {message}"))
            } else {
                ScoreError::Protocol(format!("HTTP {status}: {message}"))
            });
        }
        let parsed: WireResponse = serde_json::from_str(&body)
            .map_err(|e| ScoreError::Protocol(format!("malformed response: {e}")))?;
        if parsed.token_count == 0 || !parsed.total_logprob.is_finite() {
            return Err(ScoreError::Protocol(format!(
                "invalid result: total_logprob={} token_count={}",
                parsed.total_logprob, parsed.token_count
            )));
        }
        Ok(LogProbResult {
            total_logprob: parsed.total_logprob,
            token_count: parsed.token_count,
        })
    }
}

impl Scorer for RemoteScorer {
    fn model_id(&self) -> String {
        format!("remote:{}", self.cfg.model)
    }

    fn sequence_logprob(&self, req: &ScoreRequest) -> Result<LogProbResult, ScoreError> {
        if req.reply.text.trim().is_empty() {
            return Err(ScoreError::EmptyReply);
        }
        let key = self.cache_key(req);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*hit);
        }
        let _permit = self.permits.acquire();
        let mut last = None;
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                thread::sleep(self.cfg.backoff * attempt);
            }
            match self.attempt(req) {
                Ok(result) => {
                    self.cache.lock().expect("cache lock").insert(key, result);
                    return Ok(result);
                }
                Err(e) if e.is_retryable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
