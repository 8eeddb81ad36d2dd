//! Gold-label aggregation from raw annotator records.
//!
//! Sentiment uses a majority vote; emotion uses the highest cumulative Likert
//! score (0..=3 per category) across raters. Whenever the outcome is not
//! decided by the data alone the decision is flagged `needs_adjudication` and
//! carries a provisional label: neutral if it is among the tied labels,
//! otherwise the first tied label in taxonomy order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, JsonlError};
use crate::corpus::Corpus;
use crate::labels::{Emotion, Label, Sentiment};

pub const MAX_LIKERT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentVoteRecord {
    pub segment_id: String,
    pub annotator_id: String,
    pub vote: Sentiment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLikertRecord {
    pub segment_id: String,
    pub annotator_id: String,
    pub scores: BTreeMap<Emotion, u8>,
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum AnnotationRecord {
    Sentiment(SentimentVoteRecord),
    Emotion(EmotionLikertRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionStatus {
    Unambiguous,
    NeedsAdjudication,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationDecision<L: Ord> {
    pub segment_id: String,
    pub label: L,
    pub status: DecisionStatus,
    pub tally: BTreeMap<L, u32>,
}

impl<L: Ord> AggregationDecision<L> {
    pub fn is_unambiguous(&self) -> bool {
        self.status == DecisionStatus::Unambiguous
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AnnotateError {
    #[error("no annotation records for segment")]
    Empty,
    #[error("records mix segments `{0}` and `{1}`")]
    MixedSegments(String, String),
    #[error("annotator `{annotator}` gave conflicting judgments for segment `{segment}`")]
    ConflictingDuplicate { segment: String, annotator: String },
    #[error("annotator `{annotator}` omitted category `{category}` for segment `{segment}`")]
    MissingCategory {
        segment: String,
        annotator: String,
        category: Emotion,
    },
    #[error("annotator `{annotator}` scored `{category}` as {score} for segment `{segment}` (allowed 0..=3)")]
    ScoreOutOfRange {
        segment: String,
        annotator: String,
        category: Emotion,
        score: u8,
    },
    #[error("agreement rate of an empty decision list is undefined")]
    NoDecisions,
}

/// Votes needed for an unambiguous majority among `n` raters: ⌈(n+1)/2⌉.
pub fn majority_threshold(n: usize) -> u32 {
    (n as u32 + 2) / 2
}

/// Shared checks: nonempty, one segment, one judgment per annotator.
/// Exact duplicates collapse; conflicting ones are an error.
fn dedupe<T: PartialEq>(
    records: &[T],
    segment: impl Fn(&T) -> &str,
    annotator: impl Fn(&T) -> &str,
) -> Result<Vec<&T>, AnnotateError> {
    let first = records.first().ok_or(AnnotateError::Empty)?;
    let seg = segment(first);
    let mut kept: BTreeMap<&str, &T> = BTreeMap::new();
    for r in records {
        if segment(r) != seg {
            return Err(AnnotateError::MixedSegments(seg.to_string(), segment(r).to_string()));
        }
        match kept.get(annotator(r)) {
            Some(prev) if *prev != r => {
                return Err(AnnotateError::ConflictingDuplicate {
                    segment: seg.to_string(),
                    annotator: annotator(r).to_string(),
                })
            }
            Some(_) => {}
            None => {
                kept.insert(annotator(r), r);
            }
        }
    }
    Ok(kept.into_values().collect())
}

/// Picks the maximum of `tally`. Returns the label and whether the maximum was shared.
fn argmax_with_tiebreak<L: Label>(tally: &BTreeMap<L, u32>, neutral: L) -> (L, bool) {
    let best = tally.values().copied().max().unwrap_or(0);
    let tied: Vec<L> = tally
        .iter()
        .filter(|(_, &v)| v == best)
        .map(|(&l, _)| l)
        .collect();
    let label = if tied.contains(&neutral) {
        neutral
    } else {
        tied[0]
    };
    (label, tied.len() > 1)
}

pub fn aggregate_sentiment(
    votes: &[SentimentVoteRecord],
) -> Result<AggregationDecision<Sentiment>, AnnotateError> {
    let votes = dedupe(votes, |r| &r.segment_id, |r| &r.annotator_id)?;
    let mut tally: BTreeMap<Sentiment, u32> = Sentiment::ALL.into_iter().map(|s| (s, 0)).collect();
    for v in &votes {
        *tally.get_mut(&v.vote).expect("closed set") += 1;
    }
    let (label, _) = argmax_with_tiebreak(&tally, Sentiment::Neutral);
    let status = if tally[&label] >= majority_threshold(votes.len()) {
        DecisionStatus::Unambiguous
    } else {
        DecisionStatus::NeedsAdjudication
    };
    Ok(AggregationDecision {
        segment_id: votes[0].segment_id.clone(),
        label,
        status,
        tally,
    })
}

pub fn aggregate_emotion(
    records: &[EmotionLikertRecord],
) -> Result<AggregationDecision<Emotion>, AnnotateError> {
    let records = dedupe(records, |r| &r.segment_id, |r| &r.annotator_id)?;
    let mut tally: BTreeMap<Emotion, u32> = Emotion::ALL.into_iter().map(|e| (e, 0)).collect();
    for r in &records {
        for category in Emotion::ALL {
            let score = *r.scores.get(&category).ok_or_else(|| AnnotateError::MissingCategory {
                segment: r.segment_id.clone(),
                annotator: r.annotator_id.clone(),
                category,
            })?;
            if score > MAX_LIKERT {
                return Err(AnnotateError::ScoreOutOfRange {
                    segment: r.segment_id.clone(),
                    annotator: r.annotator_id.clone(),
                    category,
                    score,
                });
            }
            *tally.get_mut(&category).expect("closed set") += u32::from(score);
        }
    }
    let (label, tied) = argmax_with_tiebreak(&tally, Emotion::Neutral);
    Ok(AggregationDecision {
        segment_id: records[0].segment_id.clone(),
        label,
        status: if tied {
            DecisionStatus::NeedsAdjudication
        } else {
            DecisionStatus::Unambiguous
        },
        tally,
    })
}

/// Fraction of decisions that were unambiguous.
pub fn agreement_rate<L: Ord>(decisions: &[AggregationDecision<L>]) -> Result<f64, AnnotateError> {
    if decisions.is_empty() {
        return Err(AnnotateError::NoDecisions);
    }
    let ok = decisions.iter().filter(|d| d.is_unambiguous()).count();
    Ok(ok as f64 / decisions.len() as f64)
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, JsonlError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationSummary {
    pub sentiment: Vec<AggregationDecision<Sentiment>>,
    pub emotion: Vec<AggregationDecision<Emotion>>,
    pub sentiment_agreement: Option<f64>,
    pub emotion_agreement: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("segment `{segment}` ({phase}): {error}")]
pub struct SegmentError {
    pub segment: String,
    pub phase: &'static str,
    pub error: AnnotateError,
}

/// Groups a mixed annotation file by segment and phase, then aggregates each
/// group. Decisions come out sorted by segment id.
pub fn aggregate_all(records: &[AnnotationRecord]) -> Result<AggregationSummary, SegmentError> {
    let mut votes: BTreeMap<&str, Vec<SentimentVoteRecord>> = BTreeMap::new();
    let mut likert: BTreeMap<&str, Vec<EmotionLikertRecord>> = BTreeMap::new();
    for r in records {
        match r {
            AnnotationRecord::Sentiment(v) => votes.entry(&v.segment_id).or_default().push(v.clone()),
            AnnotationRecord::Emotion(e) => likert.entry(&e.segment_id).or_default().push(e.clone()),
        }
    }
    let sentiment = votes
        .into_iter()
        .map(|(seg, v)| {
            aggregate_sentiment(&v).map_err(|error| SegmentError {
                segment: seg.to_string(),
                phase: "sentiment",
                error,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let emotion = likert
        .into_iter()
        .map(|(seg, r)| {
            aggregate_emotion(&r).map_err(|error| SegmentError {
                segment: seg.to_string(),
                phase: "emotion",
                error,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregationSummary {
        sentiment_agreement: agreement_rate(&sentiment).ok(),
        emotion_agreement: agreement_rate(&emotion).ok(),
        sentiment,
        emotion,
    })
}

/// Writes aggregated labels into the corpus: sentiment decisions set the
/// multimodal channel, emotion decisions set `emotion_gt`. Segments without a
/// decision keep their existing labels. Returns the ids that were updated.
pub fn apply_to_corpus(corpus: &mut Corpus, summary: &AggregationSummary) -> BTreeSet<String> {
    let sent: BTreeMap<&str, Sentiment> = summary
        .sentiment
        .iter()
        .map(|d| (d.segment_id.as_str(), d.label))
        .collect();
    let emo: BTreeMap<&str, Emotion> = summary
        .emotion
        .iter()
        .map(|d| (d.segment_id.as_str(), d.label))
        .collect();
    let mut touched = BTreeSet::new();
    for s in &mut corpus.samples {
        if let Some(&l) = sent.get(s.id.as_str()) {
            s.sentiment_gt.multimodal = l;
            touched.insert(s.id.clone());
        }
        if let Some(&e) = emo.get(s.id.as_str()) {
            s.emotion_gt = Some(e);
            touched.insert(s.id.clone());
        }
    }
    touched
}
