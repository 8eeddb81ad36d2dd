//! Extraction, light repair and label normalization of model outputs.
//!
//! Tolerated noise: markdown code fences, prose before or after the object,
//! single-quoted strings, trailing commas and key case. Labels are mapped from
//! English or Indonesian names only; there is no fuzzy matching.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::labels::{Emotion, Pred, Sentiment};
use crate::promptkit::{
    InstructionType, OutputSchema, KEY_EMOTION, KEY_EXPLANATION, KEY_KEYWORDS, KEY_SENTIMENT,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no JSON object found in model output")]
pub struct NoJsonObject;

/// Machine-readable reason a parse is not fully valid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum Reason {
    NoJsonObject,
    MissingKey { key: String },
    WrongType { key: String, expected: String },
    InvalidLabel { key: String, value: String },
    EmptyValue { key: String },
    GatewayFailure { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub sentiment: Pred<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<Pred<Emotion>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<Reason>,
    pub raw: String,
}

impl ParsedOutput {
    /// An all-invalid output standing in for a request that never produced text.
    pub fn gateway_failure(schema: OutputSchema, message: impl Into<String>) -> Self {
        Self {
            sentiment: Pred::Invalid,
            emotion: schema.requires(KEY_EMOTION).then_some(Pred::Invalid),
            keywords: None,
            explanation: None,
            valid: false,
            reasons: vec![Reason::GatewayFailure {
                message: message.into(),
            }],
            raw: String::new(),
        }
    }
}

/// Finds the first JSON object in `raw`.
///
/// Fenced blocks are tried before the full text. Within a candidate, every
/// `{` starts a brace-balanced span that is parsed as-is and, failing that,
/// after quote and trailing-comma repair.
pub fn extract_json(raw: &str) -> Result<Map<String, Value>, NoJsonObject> {
    let mut candidates = fenced_blocks(raw);
    candidates.push(raw);
    for text in candidates {
        for (start, _) in text.match_indices('{') {
            let Some(span) = balanced_span(&text[start..]) else {
                continue;
            };
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(span) {
                return Ok(map);
            }
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&repair(span)) {
                return Ok(map);
            }
        }
    }
    Err(NoJsonObject)
}

fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip an info string such as `json` up to the end of the line.
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

/// The shortest prefix of `s` (which starts with `{`) whose braces balance,
/// ignoring braces inside single- or double-quoted strings.
fn balanced_span(s: &str) -> Option<&str> {
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => quote = Some(c),
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrites single-quoted strings as double-quoted ones and drops commas that
/// directly precede `}` or `]`.
fn repair(span: &str) -> String {
    let chars: Vec<char> = span.chars().collect();
    let mut out = String::with_capacity(span.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '"' => {
                out.push('"');
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    out.push(d);
                    i += 1;
                    if d == '\\' && i < chars.len() {
                        out.push(chars[i]);
                        i += 1;
                    } else if d == '"' {
                        break;
                    }
                }
            }
            '\'' => {
                out.push('"');
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    i += 1;
                    match d {
                        '\\' if i < chars.len() => {
                            if chars[i] == '\'' {
                                out.push('\'');
                            } else {
                                out.push('\\');
                                out.push(chars[i]);
                            }
                            i += 1;
                        }
                        '\'' => break,
                        '"' => out.push_str("\\\""),
                        _ => out.push(d),
                    }
                }
                out.push('"');
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(',');
                }
                i += 1;
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    out
}

fn clean(s: &str) -> String {
    s.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Case-insensitive; strips surrounding whitespace and punctuation; accepts
/// the Indonesian names positif, negatif and netral.
pub fn normalize_sentiment(s: &str) -> Pred<Sentiment> {
    match clean(s).as_str() {
        "positive" | "positif" => Pred::Label(Sentiment::Positive),
        "negative" | "negatif" => Pred::Label(Sentiment::Negative),
        "neutral" | "netral" => Pred::Label(Sentiment::Neutral),
        _ => Pred::Invalid,
    }
}

/// English or Indonesian category names, case-insensitive.
pub fn normalize_emotion(s: &str) -> Pred<Emotion> {
    let e = match clean(s).as_str() {
        "fear" | "ketakutan" => Emotion::Fear,
        "disgust" | "jijik" => Emotion::Disgust,
        "anger" | "kemarahan" => Emotion::Anger,
        "sadness" | "kesedihan" => Emotion::Sadness,
        "neutral" | "netral" => Emotion::Neutral,
        "happiness" | "kebahagiaan" => Emotion::Happiness,
        "surprise" | "terkejut" => Emotion::Surprise,
        _ => return Pred::Invalid,
    };
    Pred::Label(e)
}

fn lookup<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key)
        .or_else(|| map.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

struct FieldParser<'a> {
    map: &'a Map<String, Value>,
    schema: OutputSchema,
    reasons: Vec<Reason>,
}

impl FieldParser<'_> {
    /// Records a reason only for keys the schema requires.
    fn fail(&mut self, key: &str, reason: Reason) {
        if self.schema.requires(key) {
            self.reasons.push(reason);
        }
    }

    fn string(&mut self, key: &str) -> Option<&str> {
        match lookup(self.map, key) {
            None => {
                self.fail(key, Reason::MissingKey { key: key.into() });
                None
            }
            Some(Value::String(s)) => Some(s.as_str()),
            Some(_) => {
                self.fail(
                    key,
                    Reason::WrongType {
                        key: key.into(),
                        expected: "string".into(),
                    },
                );
                None
            }
        }
    }

    fn label<L: Copy>(&mut self, key: &str, normalize: fn(&str) -> Pred<L>) -> Option<Pred<L>> {
        let raw = self.string(key)?.to_string();
        let p = normalize(&raw);
        if p.is_invalid() {
            self.fail(key, Reason::InvalidLabel { key: key.into(), value: raw });
        }
        Some(p)
    }

    fn keywords(&mut self) -> Option<Vec<String>> {
        match lookup(self.map, KEY_KEYWORDS) {
            None => {
                self.fail(KEY_KEYWORDS, Reason::MissingKey { key: KEY_KEYWORDS.into() });
                None
            }
            Some(Value::Array(items)) if items.iter().all(Value::is_string) => Some(
                items
                    .iter()
                    .filter_map(Value::as_str)
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
            Some(_) => {
                self.fail(
                    KEY_KEYWORDS,
                    Reason::WrongType {
                        key: KEY_KEYWORDS.into(),
                        expected: "array of strings".into(),
                    },
                );
                None
            }
        }
    }

    fn explanation(&mut self) -> Option<String> {
        let s = self.string(KEY_EXPLANATION)?.trim().to_string();
        if s.is_empty() {
            self.fail(KEY_EXPLANATION, Reason::EmptyValue { key: KEY_EXPLANATION.into() });
            return None;
        }
        Some(s)
    }
}

/// Parses `raw` against the answer schema of an unconstrained `t` prompt.
pub fn parse_output(t: InstructionType, raw: &str) -> ParsedOutput {
    parse_with_schema(t.schema(), raw)
}

/// Never fails: problems fold into `valid = false` plus [`Reason`]s, and
/// whatever did parse is kept.
pub fn parse_with_schema(schema: OutputSchema, raw: &str) -> ParsedOutput {
    let map = match extract_json(raw) {
        Ok(map) => map,
        Err(NoJsonObject) => {
            return ParsedOutput {
                sentiment: Pred::Invalid,
                emotion: schema.requires(KEY_EMOTION).then_some(Pred::Invalid),
                keywords: None,
                explanation: None,
                valid: false,
                reasons: vec![Reason::NoJsonObject],
                raw: raw.to_string(),
            }
        }
    };
    let mut p = FieldParser {
        map: &map,
        schema,
        reasons: Vec::new(),
    };
    let sentiment = p.label(KEY_SENTIMENT, normalize_sentiment).unwrap_or(Pred::Invalid);
    let emotion = p.label(KEY_EMOTION, normalize_emotion);
    let emotion = if schema.requires(KEY_EMOTION) {
        Some(emotion.unwrap_or(Pred::Invalid))
    } else {
        emotion.filter(|e| !e.is_invalid())
    };
    let keywords = p.keywords();
    let explanation = p.explanation();
    let reasons = p.reasons;
    ParsedOutput {
        sentiment,
        emotion,
        keywords,
        explanation,
        valid: reasons.is_empty(),
        reasons,
        raw: raw.to_string(),
    }
}
