use std::time::Duration;

use serde_json::Value;

use super::{ChatTransport, TransportError};

/// Plain HTTP transport for an OpenAI-compatible `/chat/completions` route.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// `base_url` is the API root, e.g. `http://localhost:8000/v1`.
    pub fn new(base_url: &str, api_key: Option<String>) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

/// Pulls `choices[0].message.content`, accepting either a string or a list
/// of text parts.
pub fn completion_text(resp: &Value) -> Result<String, TransportError> {
    let content = &resp["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(TransportError::Protocol(
            "response has no choices[0].message.content".into(),
        )),
    }
}

impl ChatTransport for HttpTransport {
    fn send(&self, body: &Value, timeout: Duration) -> Result<String, TransportError> {
        let mut req = self.client.post(&self.url).json(body).timeout(timeout);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else if e.is_connect() {
                TransportError::Connect(e.to_string())
            } else {
                TransportError::Protocol(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Protocol(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(TransportError::Status {
                code: status.as_u16(),
                body: text,
            });
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Protocol(e.to_string()))?;
        completion_text(&value)
    }
}
