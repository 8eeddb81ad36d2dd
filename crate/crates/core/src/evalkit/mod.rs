//! Main-task prediction, hierarchical decoding, metrics and report tables.

pub mod metrics;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, JsonlError};
use crate::corpus::{Corpus, Sample, Split};
use crate::labels::{Emotion, Pred, Sentiment};
use crate::modelgw::{bounded_map, Gateway, GenOptions};
use crate::outparse::{parse_output, ParsedOutput};
use crate::promptkit::{InstructionType, PromptError, PromptKit};

pub use metrics::{compute_metrics, ClassMetrics, MetricsError, MetricsReport};
pub use report::{render_report, RenderedReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sentiment,
    Emotion,
}

impl Task {
    pub fn instruction_type(self) -> InstructionType {
        match self {
            Task::Sentiment => InstructionType::MainSentiment,
            Task::Emotion => InstructionType::MainEmotion,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Sentiment => "sentiment",
            Task::Emotion => "emotion",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sentiment" => Ok(Task::Sentiment),
            "emotion" => Ok(Task::Emotion),
            _ => Err(format!("unknown task `{s}` (expected sentiment or emotion)")),
        }
    }
}

/// Emotions admissible under each sentiment polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompatibilityMap(pub BTreeMap<Sentiment, BTreeSet<Emotion>>);

impl Default for CompatibilityMap {
    fn default() -> Self {
        use Emotion::*;
        Self(BTreeMap::from([
            (Sentiment::Neutral, BTreeSet::from([Neutral])),
            (Sentiment::Positive, BTreeSet::from([Happiness, Surprise])),
            (Sentiment::Negative, BTreeSet::from([Fear, Disgust, Anger, Sadness, Surprise])),
        ]))
    }
}

impl CompatibilityMap {
    pub fn allows(&self, s: Sentiment, e: Emotion) -> bool {
        self.0.get(&s).is_some_and(|set| set.contains(&e))
    }
}

/// Final labels after conditioning the emotion on the predicted sentiment.
pub fn decode_hierarchical(
    p: &ParsedOutput,
    task: Task,
    map: &CompatibilityMap,
) -> (Pred<Sentiment>, Option<Pred<Emotion>>) {
    let sentiment = p.sentiment;
    if task == Task::Sentiment {
        return (sentiment, None);
    }
    let emotion = match (sentiment, p.emotion.unwrap_or(Pred::Invalid)) {
        (Pred::Label(s), Pred::Label(e)) if map.allows(s, e) => Pred::Label(e),
        _ => Pred::Invalid,
    };
    (sentiment, Some(emotion))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task: Task,
    pub raw_output: String,
    pub parsed: ParsedOutput,
    pub final_sentiment: Pred<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_emotion: Option<Pred<Emotion>>,
}

impl PredictionRecord {
    pub fn from_output(sample_id: &str, task: Task, raw: &str, map: &CompatibilityMap) -> Self {
        let parsed = parse_output(task.instruction_type(), raw);
        Self::from_parsed(sample_id, task, raw, parsed, map)
    }

    fn from_parsed(sample_id: &str, task: Task, raw: &str, parsed: ParsedOutput, map: &CompatibilityMap) -> Self {
        let (final_sentiment, final_emotion) = decode_hierarchical(&parsed, task, map);
        Self {
            sample_id: sample_id.to_string(),
            task,
            raw_output: raw.to_string(),
            parsed,
            final_sentiment,
            final_emotion,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("split {0} has no samples")]
    EmptySplit(Split),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("sample {0} has no gold emotion label")]
    MissingGold(String),
    #[error("prediction for {id} is a {found} prediction, expected {expected}")]
    TaskMismatch { id: String, expected: Task, found: Task },
    #[error("more than one prediction for sample {0}")]
    DuplicatePrediction(String),
}

fn split_samples(c: &Corpus, split: Split) -> Result<Vec<&Sample>, EvalError> {
    let mut samples: Vec<&Sample> = c.split(split).collect();
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Queries the model on every sample of `split`, in sample-id order. Gateway
/// failures become invalid predictions carrying the failure reason.
#[allow(clippy::too_many_arguments)]
pub fn collect_predictions(
    c: &Corpus,
    split: Split,
    gw: &Gateway,
    kit: &PromptKit,
    opts: &GenOptions,
    task: Task,
    map: &CompatibilityMap,
    parallelism: usize,
) -> Result<Vec<PredictionRecord>, EvalError> {
    let samples = split_samples(c, split)?;
    let bundles = samples
        .iter()
        .map(|s| kit.render(s, task.instruction_type(), None))
        .collect::<Result<Vec<_>, _>>()?;
    let outputs = bounded_map(&bundles, parallelism, |b| gw.complete(b, opts));
    Ok(bundles
        .iter()
        .zip(outputs)
        .map(|(b, out)| match out {
            Ok(c) => PredictionRecord::from_output(&b.sample_id, task, &c.text, map),
            Err(e) => {
                let parsed = ParsedOutput::gateway_failure(b.expected_schema, e.to_string());
                PredictionRecord::from_parsed(&b.sample_id, task, "", parsed, map)
            }
        })
        .collect())
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    crate::artifact::to_jsonl_string(records)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

/// Scores `preds` against the gold labels of `split`. Samples without a
/// prediction count as invalid; predictions for other samples are ignored.
pub fn evaluate(c: &Corpus, split: Split, preds: &[PredictionRecord], task: Task) -> Result<MetricsReport, EvalError> {
    let samples = split_samples(c, split)?;
    let mut by_id: BTreeMap<&str, &PredictionRecord> = BTreeMap::new();
    for p in preds {
        if p.task != task {
            return Err(EvalError::TaskMismatch { id: p.sample_id.clone(), expected: task, found: p.task });
        }
        if by_id.insert(&p.sample_id, p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    let report = match task {
        Task::Sentiment => {
            let gold: Vec<Sentiment> = samples.iter().map(|s| s.sentiment_gt.multimodal).collect();
            let pred: Vec<Pred<Sentiment>> = samples
                .iter()
                .map(|s| by_id.get(s.id.as_str()).map_or(Pred::Invalid, |p| p.final_sentiment))
                .collect();
            compute_metrics(&gold, &pred, &Sentiment::ALL)?
        }
        Task::Emotion => {
            let gold = samples
                .iter()
                .map(|s| s.emotion_gt.ok_or_else(|| EvalError::MissingGold(s.id.clone())))
                .collect::<Result<Vec<Emotion>, _>>()?;
            let pred: Vec<Pred<Emotion>> = samples
                .iter()
                .map(|s| {
                    by_id
                        .get(s.id.as_str())
                        .and_then(|p| p.final_emotion)
                        .unwrap_or(Pred::Invalid)
                })
                .collect();
            compute_metrics(&gold, &pred, &Emotion::ALL)?
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use crate::modelgw::mock::MockTransport;
    use crate::modelgw::{MediaPolicy, RetryPolicy, TransportError};
    use crate::outparse::Reason;
    use std::sync::Arc;

    fn parsed(s: Pred<Sentiment>, e: Option<Pred<Emotion>>) -> ParsedOutput {
        ParsedOutput {
            sentiment: s,
            emotion: e,
            keywords: None,
            explanation: None,
            valid: true,
            reasons: vec![],
            raw: String::new(),
        }
    }

    #[test]
    fn hierarchical_decoding() {
        let m = CompatibilityMap::default();
        let p = parsed(Sentiment::Negative.into(), Some(Emotion::Sadness.into()));
        assert_eq!(decode_hierarchical(&p, Task::Emotion, &m), (Sentiment::Negative.into(), Some(Emotion::Sadness.into())));
        let p = parsed(Sentiment::Positive.into(), Some(Emotion::Anger.into()));
        assert_eq!(decode_hierarchical(&p, Task::Emotion, &m), (Sentiment::Positive.into(), Some(Pred::Invalid)));
        let p = parsed(Pred::Invalid, Some(Emotion::Happiness.into()));
        assert_eq!(decode_hierarchical(&p, Task::Emotion, &m), (Pred::Invalid, Some(Pred::Invalid)));
        assert_eq!(decode_hierarchical(&p, Task::Sentiment, &m), (Pred::Invalid, None));
    }

    #[test]
    fn default_map_matches_table() {
        let m = CompatibilityMap::default();
        let allowed: Vec<(Sentiment, Emotion)> = Sentiment::ALL
            .iter()
            .flat_map(|&s| Emotion::ALL.iter().map(move |&e| (s, e)))
            .filter(|&(s, e)| m.allows(s, e))
            .collect();
        use Emotion::*;
        use Sentiment::{Negative as N, Neutral as Z, Positive as P};
        let expected = [(N, Fear), (N, Disgust), (N, Anger), (N, Sadness), (N, Surprise), (Z, Neutral), (P, Happiness), (P, Surprise)];
        assert_eq!(allowed.len(), expected.len());
        assert!(expected.iter().all(|x| allowed.contains(x)));
    }

    #[test]
    fn map_is_configurable() {
        let m: CompatibilityMap = toml::from_str("neutral = [\"neutral\", \"surprise\"]").unwrap();
        assert!(m.allows(Sentiment::Neutral, Emotion::Surprise));
        assert!(!m.allows(Sentiment::Positive, Emotion::Happiness));
    }

    fn corpus(n: usize) -> Corpus {
        let samples = (0..n)
            .rev()
            .map(|i| {
                let mut s = sample(&format!("t{i}"), &format!("p{i}"), Split::Test);
                s.sentiment_gt.multimodal = Sentiment::ALL[i % 3];
                s.emotion_gt = Some(Emotion::Neutral);
                s
            })
            .collect();
        Corpus::new("e", "id", samples)
    }

    fn gateway(t: Arc<MockTransport>) -> Gateway {
        Gateway::new(t)
            .with_retry(RetryPolicy { max_attempts: 1, base_delay_ms: 1, max_delay_ms: 1 })
            .with_media_policy(MediaPolicy { audio: false, video: false, drop_unsupported: true })
    }

    #[test]
    fn predictions_come_back_in_id_order_and_match_file_path() {
        let c = corpus(3);
        let t = Arc::new(MockTransport::new(|_| Ok(r#"{"Sentiment": "netral"}"#.into())));
        let kit = PromptKit::builtin("id");
        let map = CompatibilityMap::default();
        let preds = collect_predictions(&c, Split::Test, &gateway(t), &kit, &GenOptions::default(), Task::Sentiment, &map, 2).unwrap();
        let ids: Vec<_> = preds.iter().map(|p| p.sample_id.as_str()).collect();
        assert_eq!(ids, ["t0", "t1", "t2"]);
        assert!(preds.iter().all(|p| p.final_sentiment == Pred::Label(Sentiment::Neutral)));

        let live = evaluate(&c, Split::Test, &preds, Task::Sentiment).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        std::fs::write(&path, predictions_to_jsonl(&preds)).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded, preds);
        assert_eq!(evaluate(&c, Split::Test, &loaded, Task::Sentiment).unwrap(), live);
    }

    #[test]
    fn gateway_timeout_is_an_invalid_prediction() {
        let c = corpus(5);
        let t = Arc::new(MockTransport::new(|r| {
            if r.text.contains("transcript of t3") {
                Err(TransportError::Timeout)
            } else {
                Ok(r#"{"Sentiment": "positive", "Emotion": "happiness"}"#.into())
            }
        }));
        let kit = PromptKit::builtin("id");
        let map = CompatibilityMap::default();
        let preds = collect_predictions(&c, Split::Test, &gateway(t), &kit, &GenOptions::default(), Task::Emotion, &map, 3).unwrap();
        assert_eq!(preds.len(), 5);
        let bad = &preds[3];
        assert_eq!(bad.sample_id, "t3");
        assert_eq!((bad.final_sentiment, bad.final_emotion), (Pred::Invalid, Some(Pred::Invalid)));
        assert!(matches!(bad.parsed.reasons[0], Reason::GatewayFailure { .. }));
        let r = evaluate(&c, Split::Test, &preds, Task::Emotion).unwrap();
        assert_eq!(r.n, 5);
        assert!((r.invalid_rate - 0.2).abs() < 1e-12);
    }

    #[test]
    fn evaluation_joins_on_id() {
        let c = corpus(3);
        let map = CompatibilityMap::default();
        let one = vec![PredictionRecord::from_output("t0", Task::Sentiment, r#"{"Sentiment":"negative"}"#, &map)];
        let r = evaluate(&c, Split::Test, &one, Task::Sentiment).unwrap();
        assert_eq!(r.n, 3);
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(evaluate(&c, Split::Test, &one, Task::Emotion), Err(EvalError::TaskMismatch { .. })));
        let twice = [one.clone(), one].concat();
        assert!(matches!(evaluate(&c, Split::Test, &twice, Task::Sentiment), Err(EvalError::DuplicatePrediction(_))));
        assert!(matches!(evaluate(&c, Split::Train, &[], Task::Sentiment), Err(EvalError::EmptySplit(Split::Train))));
    }
}
