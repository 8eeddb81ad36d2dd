//! Closed label sets shared by every stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Three-way sentiment polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Negative, Sentiment::Neutral, Sentiment::Positive];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Positive => "positive",
        }
    }
}

/// The seven emotion categories, declared in the fixed tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Fear,
    Disgust,
    Anger,
    Sadness,
    Neutral,
    Happiness,
    Surprise,
}

impl Emotion {
    pub const ALL: [Emotion; 7] = [
        Emotion::Fear,
        Emotion::Disgust,
        Emotion::Anger,
        Emotion::Sadness,
        Emotion::Neutral,
        Emotion::Happiness,
        Emotion::Surprise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Emotion::Fear => "fear",
            Emotion::Disgust => "disgust",
            Emotion::Anger => "anger",
            Emotion::Sadness => "sadness",
            Emotion::Neutral => "neutral",
            Emotion::Happiness => "happiness",
            Emotion::Surprise => "surprise",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("`{value}` is not one of: {expected}")]
pub struct UnknownLabel {
    pub value: String,
    pub expected: &'static str,
}

impl FromStr for Sentiment {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Sentiment::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel {
                value: s.to_string(),
                expected: "negative, neutral, positive",
            })
    }
}

impl FromStr for Emotion {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Emotion::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel {
                value: s.to_string(),
                expected: "fear, disgust, anger, sadness, neutral, happiness, surprise",
            })
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A label drawn from a closed taxonomy.
pub trait Label: Copy + Ord + fmt::Display + FromStr + Send + Sync + 'static {
    /// Name of the classification task over this taxonomy.
    const TASK: &'static str;
    fn taxonomy() -> &'static [Self];
}

impl Label for Sentiment {
    const TASK: &'static str = "sentiment";
    fn taxonomy() -> &'static [Self] {
        &Sentiment::ALL
    }
}

impl Label for Emotion {
    const TASK: &'static str = "emotion";
    fn taxonomy() -> &'static [Self] {
        &Emotion::ALL
    }
}

/// A model-side label: either a canonical taxonomy value or `Invalid`.
///
/// Serialized as the label string, with `"invalid"` for the invalid case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pred<L> {
    Label(L),
    Invalid,
}

impl<L: Copy> Pred<L> {
    pub fn label(self) -> Option<L> {
        match self {
            Pred::Label(l) => Some(l),
            Pred::Invalid => None,
        }
    }

    pub fn is_invalid(self) -> bool {
        matches!(self, Pred::Invalid)
    }
}

impl<L> From<L> for Pred<L> {
    fn from(l: L) -> Self {
        Pred::Label(l)
    }
}

pub const INVALID: &str = "invalid";

impl<L: fmt::Display> fmt::Display for Pred<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pred::Label(l) => l.fmt(f),
            Pred::Invalid => f.write_str(INVALID),
        }
    }
}

impl<L: fmt::Display> Serialize for Pred<L> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de, L: FromStr> Deserialize<'de> for Pred<L>
where
    L::Err: fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == INVALID {
            return Ok(Pred::Invalid);
        }
        s.parse().map(Pred::Label).map_err(serde::de::Error::custom)
    }
}

/// Modality channel of an auxiliary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownLabel {
                value: s.to_string(),
                expected: "text, audio, visual",
            })
    }
}
