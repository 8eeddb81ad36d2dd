//! In-process scripted endpoint for tests and offline runs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use super::{ChatTransport, TransportError};

/// What the script sees for one call.
#[derive(Debug, Clone)]
pub struct MockRequest {
    /// 0-based index of this call across the transport's lifetime.
    pub call_index: usize,
    /// The text part of the user message.
    pub text: String,
    /// Number of media parts in the message.
    pub media_parts: usize,
    pub body: Value,
}

type Script = dyn Fn(&MockRequest) -> Result<String, TransportError> + Send + Sync;
type Delay = dyn Fn(&MockRequest) -> Duration + Send + Sync;

/// A transport answered by a closure. Counts calls, tracks the peak number
/// of concurrent calls and records each call's start and end instants.
pub struct MockTransport {
    script: Box<Script>,
    delay: Option<Box<Delay>>,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    spans: Mutex<Vec<(Instant, Instant)>>,
}

impl MockTransport {
    pub fn new(script: impl Fn(&MockRequest) -> Result<String, TransportError> + Send + Sync + 'static) -> Self {
        Self {
            script: Box::new(script),
            delay: None,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            spans: Mutex::new(Vec::new()),
        }
    }

    /// Sleeps for `delay(request)` inside each call before answering.
    pub fn with_delay(mut self, delay: impl Fn(&MockRequest) -> Duration + Send + Sync + 'static) -> Self {
        self.delay = Some(Box::new(delay));
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// `(start, end)` of every call, sorted by start.
    pub fn spans(&self) -> Vec<(Instant, Instant)> {
        let mut s = self.spans.lock().expect("spans").clone();
        s.sort();
        s
    }
}

/// The text part of the first message of a chat-completions body.
pub fn request_text(body: &Value) -> String {
    let content = &body["messages"][0]["content"];
    match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter(|p| p["type"] == "text")
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, body: &Value, _timeout: Duration) -> Result<String, TransportError> {
        let start = Instant::now();
        let call_index = self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);

        let media_parts = body["messages"][0]["content"]
            .as_array()
            .map_or(0, |parts| parts.iter().filter(|p| p["type"] != "text").count());
        let req = MockRequest {
            call_index,
            text: request_text(body),
            media_parts,
            body: body.clone(),
        };
        if let Some(d) = &self.delay {
            thread::sleep(d(&req));
        }
        let out = (self.script)(&req);

        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.spans.lock().expect("spans").push((start, Instant::now()));
        out
    }
}
