//! Uniform access to text-generation backends.
//!
//! [`Gateway`] wraps a [`Backend`] with transport retries, rate limiting,
//! structured-output validation with a bounded repair loop, and usage
//! accounting. Backends: [`TranscriptBackend`] replays recorded responses,
//! [`LiveBackend`] speaks an OpenAI-style chat-completions API, and
//! [`RecordingBackend`] captures a live run for later replay.

mod live;
mod rate_limit;
mod record;
pub mod schema;
mod transcript;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chunker::count_tokens;

pub use live::{LiveBackend, LiveConfig};
pub use rate_limit::RateLimiter;
pub use record::RecordingBackend;
pub use transcript::{load_transcript, TranscriptBackend, TranscriptError, TranscriptRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub request_id: String,
    pub system_text: String,
    pub user_text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub response_schema: Option<Value>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl PromptRequest {
    pub fn new(request_id: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        PromptRequest {
            request_id: request_id.into(),
            system_text: system_text.into(),
            user_text: user_text.into(),
            response_schema: None,
            temperature: 0.0,
            max_output_tokens: 2048,
        }
    }

    pub fn with_schema(mut self, schema: Value) -> Self {
        self.response_schema = Some(schema);
        self
    }
}

/// Digest of everything that determines a response: system text, user text,
/// schema and temperature. The request id is deliberately excluded.
pub fn fingerprint(req: &PromptRequest) -> String {
    let canonical = Value::Array(vec![
        Value::String(req.system_text.clone()),
        Value::String(req.user_text.clone()),
        req.response_schema.clone().unwrap_or(Value::Null),
        serde_json::Number::from_f64(req.temperature).map(Value::Number).unwrap_or(Value::Null),
    ]);
    let bytes = serde_json::to_vec(&canonical).expect("canonical request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageStats {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_ms: u64,
    pub backend_name: String,
}

impl UsageStats {
    pub fn for_backend(name: &str) -> Self {
        UsageStats { backend_name: name.to_string(), ..Default::default() }
    }

    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    pub fn add(&mut self, other: &UsageStats) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_time_ms += other.wall_time_ms;
        if self.backend_name.is_empty() {
            self.backend_name = other.backend_name.clone();
        }
    }
}

impl<'a> std::iter::Sum<&'a UsageStats> for UsageStats {
    fn sum<I: Iterator<Item = &'a UsageStats>>(iter: I) -> Self {
        iter.fold(UsageStats::default(), |mut acc, u| {
            acc.add(u);
            acc
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub request_id: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parsed: Option<Value>,
    pub usage: UsageStats,
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("backend unavailable for request {request_id}: {message}")]
    BackendUnavailable { request_id: String, message: String, usage: UsageStats },
    #[error("rate limited on request {request_id} after retries")]
    RateLimited { request_id: String, usage: UsageStats },
    #[error("response to {request_id} failed validation after {attempts} attempts: {message}")]
    SchemaViolation { request_id: String, last_text: String, message: String, attempts: u32, usage: UsageStats },
    #[error("no transcript entry for request {request_id} (fingerprint {fingerprint}, attempt {attempt})")]
    TranscriptMiss { request_id: String, fingerprint: String, attempt: u32 },
    #[error("invalid request {request_id}: {message}")]
    InvalidRequest { request_id: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Usage measured before the failure, when any.
    pub fn usage(&self) -> Option<&UsageStats> {
        match self {
            GatewayError::BackendUnavailable { usage, .. }
            | GatewayError::RateLimited { usage, .. }
            | GatewayError::SchemaViolation { usage, .. } => Some(usage),
            _ => None,
        }
    }

    /// Errors that should abort a document rather than degrade one step.
    pub fn is_fatal(&self) -> bool {
        !matches!(self, GatewayError::SchemaViolation { .. })
    }
}

/// One call as seen by a backend. `request` carries the repaired user text on
/// repair attempts; `fingerprint` always identifies the original request.
#[derive(Debug)]
pub struct BackendCall<'a> {
    pub request: &'a PromptRequest,
    pub fingerprint: &'a str,
    pub attempt: u32,
}

#[derive(Debug, Clone, Default)]
pub struct BackendReply {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Retryable transport or server failure.
    Transport(String),
    RateLimited {
        retry_after: Option<Duration>,
    },
    /// Non-retryable rejection, e.g. HTTP 400/401.
    Rejected {
        status: u16,
        body: String,
    },
    TranscriptMiss,
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, call: &BackendCall<'_>) -> Result<BackendReply, BackendError>;
    /// True when replies carry a deterministic `latency_ms` that should be used
    /// instead of measured wall time.
    fn reports_latency(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub max_transport_retries: u32,
    pub max_repair_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    pub requests_per_minute: Option<u32>,
    pub max_output_tokens: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            max_transport_retries: 3,
            max_repair_attempts: 2,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            requests_per_minute: None,
            max_output_tokens: 2048,
        }
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    cfg: GatewayConfig,
    limiter: Option<RateLimiter>,
    rng: Mutex<StdRng>,
    totals: Mutex<UsageStats>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("backend", &self.backend.name()).field("cfg", &self.cfg).finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, cfg: GatewayConfig, seed: u64) -> Self {
        let limiter = cfg.requests_per_minute.map(RateLimiter::per_minute);
        let totals = Mutex::new(UsageStats::for_backend(backend.name()));
        Gateway { backend, cfg, limiter, rng: Mutex::new(StdRng::seed_from_u64(seed)), totals }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Sum of usage over every call made through this gateway, failed ones included.
    pub fn total_usage(&self) -> UsageStats {
        self.totals.lock().expect("usage lock").clone()
    }

    pub fn complete(&self, req: &PromptRequest) -> Result<CompletionResult, GatewayError> {
        let result = self.complete_inner(req);
        let usage = match &result {
            Ok(r) => Some(&r.usage),
            Err(e) => e.usage(),
        };
        if let Some(usage) = usage {
            self.totals.lock().expect("usage lock").add(usage);
        }
        result
    }

    fn complete_inner(&self, req: &PromptRequest) -> Result<CompletionResult, GatewayError> {
        if req.user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest {
                request_id: req.request_id.clone(),
                message: "user_text is empty".into(),
            });
        }
        if !(0.0..=2.0).contains(&req.temperature) {
            return Err(GatewayError::InvalidRequest {
                request_id: req.request_id.clone(),
                message: format!("temperature {} outside [0, 2]", req.temperature),
            });
        }

        let fp = fingerprint(req);
        let started = Instant::now();
        let mut meter = Meter {
            usage: UsageStats::for_backend(self.backend.name()),
            simulated_ms: 0,
            started,
            simulated: self.backend.reports_latency(),
        };
        let max_attempts = self.cfg.max_repair_attempts + 1;
        let mut current = req.clone();
        let mut last_failure = (String::new(), String::new());

        for attempt in 1..=max_attempts {
            let call = BackendCall { request: &current, fingerprint: &fp, attempt };
            let reply = self.send_with_retries(&call, &mut meter)?;
            meter.record_reply(&current, &reply);

            let Some(schema) = &req.response_schema else {
                return Ok(CompletionResult {
                    request_id: req.request_id.clone(),
                    text: reply.text,
                    parsed: None,
                    usage: meter.finish(),
                    attempts: attempt,
                });
            };

            let outcome = schema::parse_json_text(&reply.text)
                .and_then(|v| schema::validate(schema, &v).map(|_| v).map_err(|e| format!("schema violation at {e}")));
            match outcome {
                Ok(parsed) => {
                    return Ok(CompletionResult {
                        request_id: req.request_id.clone(),
                        text: reply.text,
                        parsed: Some(parsed),
                        usage: meter.finish(),
                        attempts: attempt,
                    })
                }
                Err(message) => {
                    tracing::debug!(request_id = %req.request_id, attempt, %message, "structured output rejected");
                    current.user_text = repair_prompt(&req.user_text, &message);
                    last_failure = (reply.text, message);
                }
            }
        }

        Err(GatewayError::SchemaViolation {
            request_id: req.request_id.clone(),
            last_text: last_failure.0,
            message: last_failure.1,
            attempts: max_attempts,
            usage: meter.finish(),
        })
    }

    fn send_with_retries(&self, call: &BackendCall<'_>, meter: &mut Meter) -> Result<BackendReply, GatewayError> {
        let request_id = &call.request.request_id;
        let mut retry = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let err = match self.backend.send(call) {
                Ok(reply) => return Ok(reply),
                Err(e) => e,
            };
            match err {
                BackendError::TranscriptMiss => {
                    return Err(GatewayError::TranscriptMiss {
                        request_id: request_id.clone(),
                        fingerprint: call.fingerprint.to_string(),
                        attempt: call.attempt,
                    })
                }
                BackendError::Rejected { status, body } => {
                    return Err(GatewayError::BackendUnavailable {
                        request_id: request_id.clone(),
                        message: format!("rejected with HTTP {status}: {body}"),
                        usage: meter.finish(),
                    })
                }
                BackendError::Transport(message) => {
                    if retry >= self.cfg.max_transport_retries {
                        return Err(GatewayError::BackendUnavailable {
                            request_id: request_id.clone(),
                            message,
                            usage: meter.finish(),
                        });
                    }
                    tracing::warn!(%request_id, retry, %message, "transport failure, retrying");
                    std::thread::sleep(self.backoff(retry));
                }
                BackendError::RateLimited { retry_after } => {
                    if retry >= self.cfg.max_transport_retries {
                        return Err(GatewayError::RateLimited {
                            request_id: request_id.clone(),
                            usage: meter.finish(),
                        });
                    }
                    let wait = retry_after.unwrap_or_default().max(self.backoff(retry));
                    tracing::warn!(%request_id, retry, ?wait, "rate limited, backing off");
                    std::thread::sleep(wait);
                }
            }
            retry += 1;
        }
    }

    /// Exponential backoff with up to 50% additive jitter.
    fn backoff(&self, retry: u32) -> Duration {
        let base = self.cfg.backoff_base_ms.saturating_mul(1u64 << retry.min(20)).min(self.cfg.backoff_max_ms);
        let jitter = if base > 1 { self.rng.lock().expect("rng lock").gen_range(0..=base / 2) } else { 0 };
        Duration::from_millis(base + jitter)
    }
}

struct Meter {
    usage: UsageStats,
    simulated_ms: u64,
    started: Instant,
    simulated: bool,
}

impl Meter {
    fn record_reply(&mut self, sent: &PromptRequest, reply: &BackendReply) {
        let input = reply
            .input_tokens
            .unwrap_or_else(|| (count_tokens(&sent.system_text) + count_tokens(&sent.user_text)) as u64);
        let output = reply.output_tokens.unwrap_or_else(|| count_tokens(&reply.text) as u64);
        self.usage.input_tokens += input;
        self.usage.output_tokens += output;
        self.simulated_ms += reply.latency_ms.unwrap_or(0);
    }

    fn finish(&self) -> UsageStats {
        let mut usage = self.usage.clone();
        usage.wall_time_ms = if self.simulated {
            self.simulated_ms
        } else {
            // round up so any measured call registers
            let micros = self.started.elapsed().as_micros() as u64;
            micros.div_ceil(1000)
        };
        usage
    }
}

fn repair_prompt(original: &str, problem: &str) -> String {
    format!(
        "{original}\n\nYour previous reply could not be used ({problem}). \
         Reply again with only a JSON object that satisfies the schema."
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    struct Scripted {
        replies: Vec<Result<&'static str, BackendError>>,
        calls: Mutex<usize>,
    }

    impl Backend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }
        fn send(&self, _call: &BackendCall<'_>) -> Result<BackendReply, BackendError> {
            let mut n = self.calls.lock().unwrap();
            let r = self.replies[(*n).min(self.replies.len() - 1)].clone();
            *n += 1;
            r.map(|t| BackendReply { text: t.to_string(), latency_ms: Some(7), ..Default::default() })
        }
        fn reports_latency(&self) -> bool {
            true
        }
    }

    fn gateway(replies: Vec<Result<&'static str, BackendError>>) -> Gateway {
        let cfg = GatewayConfig { backoff_base_ms: 1, ..Default::default() };
        Gateway::new(Arc::new(Scripted { replies, calls: Mutex::new(0) }), cfg, 7)
    }

    fn schema_req() -> PromptRequest {
        PromptRequest::new("r1", "sys", "find instruments").with_schema(json!({
            "type": "object", "required": ["instruments"],
            "properties": {"instruments": {"type": "array"}}
        }))
    }

    #[test]
    fn fingerprint_is_field_sensitive() {
        let a = PromptRequest::new("a", "s", "u");
        let mut b = a.clone();
        b.request_id = "b".into();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.temperature = 0.5;
        assert_ne!(fingerprint(&a), fingerprint(&b));
        let c = a.clone().with_schema(json!({"type": "object"}));
        assert_ne!(fingerprint(&a), fingerprint(&c));
    }

    #[test]
    fn repair_loop_recovers() {
        let gw = gateway(vec![Ok("{\"instruments\": ["), Ok("{\"instruments\": []}")]);
        let r = gw.complete(&schema_req()).unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(r.parsed, Some(json!({"instruments": []})));
        assert_eq!(r.usage.wall_time_ms, 14);
    }

    #[test]
    fn repair_loop_is_bounded() {
        let gw = gateway(vec![Ok("nope")]);
        match gw.complete(&schema_req()) {
            Err(GatewayError::SchemaViolation { attempts, last_text, usage, .. }) => {
                assert_eq!(attempts, 3);
                assert_eq!(last_text, "nope");
                assert!(usage.input_tokens > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
        // failed attempts still count toward totals
        assert_eq!(gw.total_usage().output_tokens, 3);
    }

    #[test]
    fn transport_retries_then_succeeds() {
        let gw = gateway(vec![
            Err(BackendError::Transport("reset".into())),
            Err(BackendError::RateLimited { retry_after: None }),
            Ok("plain text"),
        ]);
        let r = gw.complete(&PromptRequest::new("r", "s", "u")).unwrap();
        assert_eq!(r.text, "plain text");
        assert_eq!(r.attempts, 1);
        assert!(r.parsed.is_none());
    }

    #[test]
    fn transport_exhaustion() {
        let gw = gateway(vec![Err(BackendError::Transport("down".into()))]);
        assert!(matches!(
            gw.complete(&PromptRequest::new("r", "s", "u")),
            Err(GatewayError::BackendUnavailable { .. })
        ));
        let gw = gateway(vec![Err(BackendError::RateLimited { retry_after: None })]);
        assert!(matches!(gw.complete(&PromptRequest::new("r", "s", "u")), Err(GatewayError::RateLimited { .. })));
    }

    #[test]
    fn rejects_bad_requests() {
        let gw = gateway(vec![Ok("x")]);
        assert!(matches!(gw.complete(&PromptRequest::new("r", "s", "  ")), Err(GatewayError::InvalidRequest { .. })));
        let mut req = PromptRequest::new("r", "s", "u");
        req.temperature = 2.5;
        assert!(gw.complete(&req).is_err());
    }

    #[test]
    fn usage_sums_componentwise() {
        let a = UsageStats { input_tokens: 1, output_tokens: 2, wall_time_ms: 3, backend_name: "m".into() };
        let b = UsageStats { input_tokens: 10, output_tokens: 20, wall_time_ms: 30, backend_name: "m".into() };
        let s: UsageStats = [a, b].iter().sum();
        assert_eq!((s.input_tokens, s.output_tokens, s.wall_time_ms), (11, 22, 33));
        assert_eq!(s.backend_name, "m");
    }
}
