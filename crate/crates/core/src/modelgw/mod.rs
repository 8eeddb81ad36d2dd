//! Chat-completion gateway for OpenAI-compatible endpoints.
//!
//! A [`Gateway`] turns a [`PromptBundle`] into one chat request (media as
//! base64 data parts), retries transient failures with exponential backoff,
//! spaces requests through an optional rate limiter and runs batches with
//! bounded parallelism. The wire is behind [`ChatTransport`] so tests and
//! offline runs can swap in [`mock::MockTransport`].

pub mod http;
pub mod mock;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::sha256_hex;
use crate::promptkit::{AttachmentKind, PromptBundle};

pub use http::HttpTransport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub timeout_s: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            model_id: "qwen2.5-omni-7b".to_string(),
            temperature: 0.2,
            max_tokens: 512,
            seed: None,
            timeout_s: 120.0,
        }
    }
}

impl GenOptions {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Config("max_tokens must be positive".into()));
        }
        if !self.timeout_s.is_finite() || self.timeout_s <= 0.0 {
            return Err(GatewayError::Config(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub request_fingerprint: String,
    pub attempts: u32,
}

/// What went wrong on one wire exchange.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("malformed response: {0}")]
    Protocol(String),
}

impl TransportError {
    /// Timeouts, connection failures, 429 and 5xx are worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            TransportError::Timeout | TransportError::Connect(_) => true,
            TransportError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            TransportError::Protocol(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: TransportError },
    #[error("endpoint rejected the request: {0}")]
    Rejected(TransportError),
    #[error("endpoint is configured without {0:?} support")]
    MediaUnsupported(AttachmentKind),
    #[error("endpoint rejected {kind:?} input: {error}")]
    MediaRejected {
        kind: AttachmentKind,
        error: TransportError,
    },
    #[error("cannot read attachment {path}: {message}")]
    Attachment { path: String, message: String },
    #[error("invalid gateway configuration: {0}")]
    Config(String),
}

pub trait ChatTransport: Send + Sync {
    /// Sends one chat-completions request body and returns the assistant text.
    fn send(&self, body: &Value, timeout: Duration) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Which attachment kinds the endpoint accepts, and what to do with the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MediaPolicy {
    pub audio: bool,
    pub video: bool,
    /// Drop unsupported attachments instead of failing (text-only fallback).
    pub drop_unsupported: bool,
}

impl Default for MediaPolicy {
    fn default() -> Self {
        Self {
            audio: true,
            video: true,
            drop_unsupported: false,
        }
    }
}

impl MediaPolicy {
    fn allows(&self, kind: AttachmentKind) -> bool {
        match kind {
            AttachmentKind::Audio => self.audio,
            AttachmentKind::Video => self.video,
        }
    }
}

/// Spaces request starts at least `interval` apart across all threads.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn acquire(&self) {
        let wait = {
            let mut slot = self.next_slot.lock().expect("limiter lock");
            let now = Instant::now();
            let start = slot.map_or(now, |s| s.max(now));
            *slot = Some(start + self.interval);
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

pub struct Gateway {
    transport: Arc<dyn ChatTransport>,
    retry: RetryPolicy,
    media: MediaPolicy,
    media_root: Option<PathBuf>,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    pub fn new(transport: Arc<dyn ChatTransport>) -> Self {
        Self {
            transport,
            retry: RetryPolicy::default(),
            media: MediaPolicy::default(),
            media_root: None,
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_media_policy(mut self, media: MediaPolicy) -> Self {
        self.media = media;
        self
    }

    /// Relative attachment paths are resolved against `root`.
    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = Some(root.into());
        self
    }

    /// At most `rps` request starts per second; `None` or 0 disables limiting.
    pub fn with_rate_limit(mut self, rps: Option<f64>) -> Self {
        self.limiter = rps.filter(|r| *r > 0.0).map(|r| RateLimiter {
            interval: Duration::from_secs_f64(1.0 / r),
            next_slot: Mutex::new(None),
        });
        self
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        match &self.media_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Builds the chat-completions body. Media parts precede the text part.
    pub fn request_body(&self, b: &PromptBundle, o: &GenOptions) -> Result<Value, GatewayError> {
        let mut parts = Vec::new();
        for a in &b.attachments {
            if !self.media.allows(a.kind) {
                if self.media.drop_unsupported {
                    continue;
                }
                return Err(GatewayError::MediaUnsupported(a.kind));
            }
            let path = self.resolve(&a.path);
            let bytes = std::fs::read(&path).map_err(|e| GatewayError::Attachment {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let data = base64::engine::general_purpose::STANDARD.encode(bytes);
            let ext = path
                .extension()
                .map(|e| e.to_string_lossy().to_ascii_lowercase())
                .unwrap_or_default();
            parts.push(match a.kind {
                AttachmentKind::Audio => json!({
                    "type": "input_audio",
                    "input_audio": {"data": data, "format": if ext.is_empty() { "wav".to_string() } else { ext }},
                }),
                AttachmentKind::Video => json!({
                    "type": "video_url",
                    "video_url": {"url": format!("data:{};base64,{data}", video_mime(&ext))},
                }),
            });
        }
        let content = if parts.is_empty() {
            Value::String(b.instruction_text.clone())
        } else {
            parts.push(json!({"type": "text", "text": b.instruction_text}));
            Value::Array(parts)
        };
        let mut body = json!({
            "model": o.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": o.temperature,
            "max_tokens": o.max_tokens,
            "stream": false,
        });
        if let Some(seed) = o.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    pub fn complete(&self, b: &PromptBundle, o: &GenOptions) -> Result<RawCompletion, GatewayError> {
        o.validate()?;
        let fingerprint = request_fingerprint(b, o);
        let body = self.request_body(b, o)?;
        let timeout = Duration::from_secs_f64(o.timeout_s);
        let started = Instant::now();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            match self.transport.send(&body, timeout) {
                Ok(text) => {
                    return Ok(RawCompletion {
                        text,
                        model_id: o.model_id.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        request_fingerprint: fingerprint,
                        attempts: attempt,
                    })
                }
                Err(e) if e.is_transient() && attempt < max_attempts => {
                    thread::sleep(self.retry.backoff(attempt));
                }
                Err(e) if e.is_transient() => {
                    return Err(GatewayError::Exhausted { attempts: attempt, last: e })
                }
                Err(e) => return Err(classify_rejection(b, e)),
            }
        }
    }

    /// Results line up with `bundles`; one failure never aborts the others.
    pub fn complete_batch(
        &self,
        bundles: &[PromptBundle],
        o: &GenOptions,
        parallelism: usize,
    ) -> Vec<Result<RawCompletion, GatewayError>> {
        bounded_map(bundles, parallelism, |b| self.complete(b, o))
    }
}

fn video_mime(ext: &str) -> String {
    match ext {
        "mp4" | "m4v" | "" => "video/mp4".into(),
        "mov" => "video/quicktime".into(),
        "avi" => "video/x-msvideo".into(),
        "mkv" => "video/x-matroska".into(),
        other => format!("video/{other}"),
    }
}

/// A non-transient failure on a request with media is a capability rejection
/// when the status is 415, or a 400/422 whose body names the media kind.
fn classify_rejection(b: &PromptBundle, e: TransportError) -> GatewayError {
    if let TransportError::Status { code, body } = &e {
        let lower = body.to_lowercase();
        for a in &b.attachments {
            let word = match a.kind {
                AttachmentKind::Audio => "audio",
                AttachmentKind::Video => "video",
            };
            if *code == 415 || ((*code == 400 || *code == 422) && lower.contains(word)) {
                return GatewayError::MediaRejected { kind: a.kind, error: e };
            }
        }
    }
    GatewayError::Rejected(e)
}

/// SHA-256 over the canonical JSON of `(bundle, options)`.
pub fn request_fingerprint(b: &PromptBundle, o: &GenOptions) -> String {
    sha256_hex(serde_json::to_vec(&(b, o)).expect("bundle serializes"))
}

/// Maps `f` over `items` on at most `parallelism` worker threads. Output order
/// matches input order whatever the completion order.
pub fn bounded_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::mock::MockTransport;
    use super::*;
    use crate::promptkit::{Attachment, InstructionType, OutputSchema};
    use std::collections::HashSet;

    fn bundle(id: &str) -> PromptBundle {
        PromptBundle {
            sample_id: id.into(),
            instruction_type: InstructionType::AuxText,
            instruction_text: format!("Text: {id}"),
            attachments: vec![],
            expected_schema: OutputSchema::AuxText,
            constraint: None,
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 1,
            max_delay_ms: 4,
        }
    }

    #[test]
    fn passes_text_through() {
        let script = r#"{"Sentiment":"negative","Explanation":"x"}"#;
        let t = Arc::new(MockTransport::new(move |_| Ok(script.to_string())));
        let gw = Gateway::new(t.clone()).with_retry(fast());
        let out = gw.complete(&bundle("a"), &GenOptions::default()).unwrap();
        assert_eq!(out.text, script);
        assert_eq!(out.attempts, 1);
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn retries_503_then_succeeds() {
        let t = Arc::new(MockTransport::new(|r| {
            if r.call_index < 2 {
                Err(TransportError::Status { code: 503, body: "busy".into() })
            } else {
                Ok("ok".into())
            }
        }));
        let gw = Gateway::new(t.clone()).with_retry(fast());
        let out = gw.complete(&bundle("a"), &GenOptions::default()).unwrap();
        assert_eq!(out.attempts, 3);
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn unauthorized_is_not_retried() {
        let t = Arc::new(MockTransport::new(|_| {
            Err(TransportError::Status { code: 401, body: "bad key".into() })
        }));
        let gw = Gateway::new(t.clone()).with_retry(fast());
        let err = gw.complete(&bundle("a"), &GenOptions::default()).unwrap_err();
        assert!(matches!(err, GatewayError::Rejected(TransportError::Status { code: 401, .. })));
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn transient_failures_exhaust_the_cap() {
        let t = Arc::new(MockTransport::new(|_| Err(TransportError::Timeout)));
        let gw = Gateway::new(t.clone()).with_retry(RetryPolicy { max_attempts: 3, ..fast() });
        let err = gw.complete(&bundle("a"), &GenOptions::default()).unwrap_err();
        assert_eq!(err, GatewayError::Exhausted { attempts: 3, last: TransportError::Timeout });
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 9, base_delay_ms: 100, max_delay_ms: 350 };
        let ms: Vec<u128> = (1..=4).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(ms, [100, 200, 350, 350]);
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let o = GenOptions::default();
        assert_eq!(request_fingerprint(&bundle("a"), &o), request_fingerprint(&bundle("a"), &o));
        assert_ne!(request_fingerprint(&bundle("a"), &o), request_fingerprint(&bundle("b"), &o));
        let hot = GenOptions { temperature: 0.9, ..o.clone() };
        assert_ne!(request_fingerprint(&bundle("a"), &o), request_fingerprint(&bundle("a"), &hot));
    }

    #[test]
    fn batch_keeps_order_and_bounds_in_flight() {
        let t = Arc::new(
            MockTransport::new(|r| Ok(format!("echo {}", r.text))).with_delay(|r| {
                // pseudo-random but deterministic delays
                let h = r.text.bytes().fold(7u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
                Duration::from_millis(2 + h % 9)
            }),
        );
        let gw = Gateway::new(t.clone()).with_retry(fast());
        let bundles: Vec<_> = (0..8).map(|i| bundle(&format!("s{i}"))).collect();
        let out = gw.complete_batch(&bundles, &GenOptions::default(), 3);
        for (b, r) in bundles.iter().zip(&out) {
            assert_eq!(r.as_ref().unwrap().text, format!("echo {}", b.instruction_text));
        }
        assert!(t.max_in_flight() <= 3);
        assert!(t.max_in_flight() >= 2, "expected some overlap");
    }

    #[test]
    fn parallelism_one_is_sequential() {
        let t = Arc::new(MockTransport::new(|_| Ok("x".into())).with_delay(|_| Duration::from_millis(2)));
        let gw = Gateway::new(t.clone());
        let bundles: Vec<_> = (0..5).map(|i| bundle(&format!("s{i}"))).collect();
        gw.complete_batch(&bundles, &GenOptions::default(), 1);
        let spans = t.spans();
        assert_eq!(spans.len(), 5);
        for w in spans.windows(2) {
            assert!(w[0].1 <= w[1].0, "request overlap under parallelism 1");
        }
        assert_eq!(t.max_in_flight(), 1);
    }

    #[test]
    fn one_failure_is_isolated() {
        let t = Arc::new(MockTransport::new(|r| {
            if r.text.contains("s2") {
                Err(TransportError::Status { code: 400, body: "bad".into() })
            } else {
                Ok("fine".into())
            }
        }));
        let gw = Gateway::new(t).with_retry(fast());
        let bundles: Vec<_> = (0..5).map(|i| bundle(&format!("s{i}"))).collect();
        let out = gw.complete_batch(&bundles, &GenOptions::default(), 2);
        let failed: Vec<usize> = out.iter().enumerate().filter(|(_, r)| r.is_err()).map(|(i, _)| i).collect();
        assert_eq!(failed, [2]);
    }

    #[test]
    fn media_parts_are_base64_data() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.wav"), b"RIFF").unwrap();
        std::fs::write(dir.path().join("v.mp4"), b"mp4!").unwrap();
        let mut b = bundle("m");
        b.attachments = vec![
            Attachment { kind: AttachmentKind::Audio, path: "a.wav".into() },
            Attachment { kind: AttachmentKind::Video, path: "v.mp4".into() },
        ];
        let gw = Gateway::new(Arc::new(MockTransport::new(|_| Ok(String::new())))).with_media_root(dir.path());
        let body = gw.request_body(&b, &GenOptions { seed: Some(3), ..Default::default() }).unwrap();
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["input_audio"]["data"], "UklGRg==");
        assert_eq!(content[0]["input_audio"]["format"], "wav");
        assert_eq!(content[1]["video_url"]["url"], "data:video/mp4;base64,bXA0IQ==");
        assert_eq!(content[2]["text"], "Text: m");
        assert_eq!(body["seed"], 3);
        assert_eq!(body["temperature"], 0.2);
    }

    #[test]
    fn media_capability_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("v.mp4"), b"x").unwrap();
        let mut b = bundle("m");
        b.attachments = vec![Attachment { kind: AttachmentKind::Video, path: "v.mp4".into() }];
        let text_only = MediaPolicy { audio: true, video: false, drop_unsupported: false };
        let t = Arc::new(MockTransport::new(|_| Ok("x".into())));
        let gw = Gateway::new(t.clone()).with_media_root(dir.path()).with_media_policy(text_only);
        assert_eq!(
            gw.complete(&b, &GenOptions::default()).unwrap_err(),
            GatewayError::MediaUnsupported(AttachmentKind::Video)
        );
        assert_eq!(t.calls(), 0);

        let gw = Gateway::new(t.clone())
            .with_media_root(dir.path())
            .with_media_policy(MediaPolicy { drop_unsupported: true, ..text_only });
        let body = gw.request_body(&b, &GenOptions::default()).unwrap();
        assert_eq!(body["messages"][0]["content"], "Text: m");

        let rejecting = Arc::new(MockTransport::new(|_| {
            Err(TransportError::Status { code: 400, body: "Video input is not supported".into() })
        }));
        let gw = Gateway::new(rejecting).with_media_root(dir.path());
        assert!(matches!(
            gw.complete(&b, &GenOptions::default()).unwrap_err(),
            GatewayError::MediaRejected { kind: AttachmentKind::Video, .. }
        ));

        let missing = Gateway::new(t).with_media_root(dir.path().join("nope"));
        assert!(matches!(
            missing.complete(&b, &GenOptions::default()).unwrap_err(),
            GatewayError::Attachment { .. }
        ));
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let t = Arc::new(MockTransport::new(|_| Ok("x".into())));
        let gw = Gateway::new(t.clone()).with_rate_limit(Some(200.0));
        let bundles: Vec<_> = (0..4).map(|i| bundle(&format!("s{i}"))).collect();
        let start = Instant::now();
        gw.complete_batch(&bundles, &GenOptions::default(), 4);
        // four starts at >= 5 ms spacing
        assert!(start.elapsed() >= Duration::from_millis(15));
        let starts: HashSet<_> = t.spans().iter().map(|s| s.0).collect();
        assert_eq!(starts.len(), 4);
    }

    #[test]
    fn options_validation() {
        let bad = GenOptions { max_tokens: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(GatewayError::Config(_))));
        let bad = GenOptions { temperature: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GenOptions { timeout_s: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
