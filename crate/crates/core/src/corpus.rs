//! Corpus manifests: loading, validation and speaker-disjoint splitting.
//!
//! A manifest is UTF-8 JSON Lines, one [`Sample`] per line. Gold labels must
//! already be canonical enum strings; no synonym normalization happens here.
//! Fields this crate does not know about are kept in [`Sample::extra`] and
//! written back after the known fields in key order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{read_jsonl, sha256_hex, to_jsonl_string, JsonlError};
use crate::labels::{Emotion, Modality, Sentiment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    #[default]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
    }
}

/// Gold sentiment per channel. Only `multimodal` is mandatory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSentiment {
    pub multimodal: Sentiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<Sentiment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual: Option<Sentiment>,
}

impl ChannelSentiment {
    pub fn uniform(label: Sentiment) -> Self {
        Self {
            multimodal: label,
            text: None,
            audio: None,
            visual: None,
        }
    }

    pub fn channel(&self, m: Modality) -> Option<Sentiment> {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Visual => self.visual,
        }
    }
}

/// One video segment of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub speaker_id: String,
    #[serde(default)]
    pub gender: Gender,
    #[serde(default)]
    pub topic: String,
    pub transcript: String,
    pub audio_path: String,
    pub video_path: String,
    pub duration_s: f64,
    pub sentiment_gt: ChannelSentiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_gt: Option<Emotion>,
    pub split: Split,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub language_tag: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("duplicate sample id `{id}` on lines {first_line} and {line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("need at least {needed} distinct speakers for the requested split, found {found}")]
    TooFewSpeakers { found: usize, needed: usize },
    #[error("corpus `{name}` failed validation with {errors} error(s)")]
    Invalid { name: String, errors: usize },
}

impl Corpus {
    pub fn new(name: impl Into<String>, language_tag: impl Into<String>, samples: Vec<Sample>) -> Self {
        Self {
            name: name.into(),
            language_tag: language_tag.into(),
            samples,
        }
    }

    pub fn with_language(mut self, tag: impl Into<String>) -> Self {
        self.language_tag = tag.into();
        self
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Manifest serialization: one sample per line, known fields in declaration order.
    pub fn to_jsonl(&self) -> String {
        to_jsonl_string(&self.samples)
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_jsonl())
    }
}

/// Loads a manifest. The corpus name is the file stem; the language tag is `und`
/// until set with [`Corpus::with_language`].
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let rows: Vec<(usize, Sample)> = read_jsonl(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::with_capacity(rows.len());
    for (line, sample) in rows {
        if let Some(&first_line) = seen.get(&sample.id) {
            return Err(CorpusError::DuplicateId {
                id: sample.id,
                first_line,
                line,
            });
        }
        seen.insert(sample.id.clone(), line);
        samples.push(sample);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus::new(name, "und", samples))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub sample_id: String,
    pub field: String,
    pub message: String,
}

impl Issue {
    fn new(sample_id: &str, field: &str, message: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub per_split: BTreeMap<Split, usize>,
    pub per_sentiment: BTreeMap<Sentiment, usize>,
    pub per_emotion: BTreeMap<Emotion, usize>,
    pub emotion_missing: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            per_split: Split::ALL.into_iter().map(|s| (s, 0)).collect(),
            per_sentiment: Sentiment::ALL.into_iter().map(|s| (s, 0)).collect(),
            per_emotion: Emotion::ALL.into_iter().map(|e| (e, 0)).collect(),
            emotion_missing: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub counts: Counts,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Reports every invariant violation. Never fails; problems are data.
///
/// Errors: empty id, repeated id (every occurrence after the first), negative
/// or non-finite duration, empty transcript. Warnings: empty speaker id or
/// media reference.
pub fn validate_corpus(c: &Corpus) -> ValidationReport {
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    let mut counts = Counts::default();
    let mut seen = BTreeSet::new();

    for s in &c.samples {
        if s.id.is_empty() {
            errors.push(Issue::new(&s.id, "id", "sample id is empty"));
        } else if !seen.insert(s.id.as_str()) {
            errors.push(Issue::new(&s.id, "id", "duplicate sample id"));
        }
        if !s.duration_s.is_finite() || s.duration_s < 0.0 {
            errors.push(Issue::new(
                &s.id,
                "duration_s",
                format!("duration must be a nonnegative number, got {}", s.duration_s),
            ));
        }
        if s.transcript.trim().is_empty() {
            errors.push(Issue::new(&s.id, "transcript", "transcript is empty"));
        }
        if s.speaker_id.is_empty() {
            warnings.push(Issue::new(&s.id, "speaker_id", "speaker id is empty"));
        }
        if s.audio_path.is_empty() {
            warnings.push(Issue::new(&s.id, "audio_path", "no audio reference"));
        }
        if s.video_path.is_empty() {
            warnings.push(Issue::new(&s.id, "video_path", "no video reference"));
        }

        *counts.per_split.entry(s.split).or_default() += 1;
        *counts.per_sentiment.entry(s.sentiment_gt.multimodal).or_default() += 1;
        match s.emotion_gt {
            Some(e) => *counts.per_emotion.entry(e).or_default() += 1,
            None => counts.emotion_missing += 1,
        }
    }

    ValidationReport {
        errors,
        warnings,
        counts,
    }
}

/// Fails with [`CorpusError::Invalid`] unless the corpus validates cleanly.
pub fn ensure_valid(c: &Corpus) -> Result<ValidationReport, CorpusError> {
    let report = validate_corpus(c);
    if report.is_ok() {
        Ok(report)
    } else {
        Err(CorpusError::Invalid {
            name: c.name.clone(),
            errors: report.errors.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    fn check(&self) -> Result<(), CorpusError> {
        let r = self.as_array();
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(CorpusError::InvalidRatios(format!(
                "ratios must be nonnegative, got {r:?}"
            )));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidRatios(format!("ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1)
    }
}

/// Speaker counts per split by the largest-remainder method. A positive-ratio
/// split that rounds to zero borrows a speaker when the donor can spare one.
fn speaker_quota(n_speakers: usize, ratios: [f64; 3]) -> [usize; 3] {
    let targets = ratios.map(|r| r * n_speakers as f64);
    let mut quota = targets.map(|t| t.floor() as usize);
    let mut leftover = n_speakers - quota.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // Stable sort keeps train < val < test among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            quota[i] += 1;
            leftover -= 1;
        }
    }
    // A donor may only give a speaker away if it stays within one of its target.
    for i in 0..3 {
        if ratios[i] > 0.0 && quota[i] == 0 {
            let donor = (0..3)
                .filter(|&j| quota[j] >= 2 && (quota[j] - 1) as f64 >= targets[j] - 1.0)
                .max_by_key(|&j| (quota[j], std::cmp::Reverse(j)));
            if let Some(donor) = donor {
                quota[donor] -= 1;
                quota[i] += 1;
            }
        }
    }
    quota
}

/// Reassigns splits so that every speaker's samples land in one split.
///
/// Speakers are sorted, shuffled with a ChaCha8 stream seeded by `seed`, then
/// cut into train/val/test runs sized by [`speaker_quota`].
pub fn split_corpus(c: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Corpus, CorpusError> {
    ratios.check()?;
    let r = ratios.as_array();
    let mut speakers: Vec<&str> = c
        .samples
        .iter()
        .map(|s| s.speaker_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let needed = r.iter().filter(|x| **x > 0.0).count();
    if !c.samples.is_empty() && speakers.len() < needed {
        return Err(CorpusError::TooFewSpeakers {
            found: speakers.len(),
            needed,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    speakers.shuffle(&mut rng);
    let quota = speaker_quota(speakers.len(), r);

    let mut assignment: HashMap<&str, Split> = HashMap::new();
    let mut cursor = 0;
    for (split, n) in Split::ALL.into_iter().zip(quota) {
        for spk in &speakers[cursor..cursor + n] {
            assignment.insert(spk, split);
        }
        cursor += n;
    }

    let samples = c
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.split = assignment[s.speaker_id.as_str()];
            s
        })
        .collect();
    Ok(Corpus {
        name: c.name.clone(),
        language_tag: c.language_tag.clone(),
        samples,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    pub(crate) fn sample(id: &str, speaker: &str, split: Split) -> Sample {
        Sample {
            id: id.to_string(),
            speaker_id: speaker.to_string(),
            gender: Gender::Unknown,
            topic: "daily life".to_string(),
            transcript: format!("transcript of {id}"),
            audio_path: format!("audio/{id}.wav"),
            video_path: format!("video/{id}.mp4"),
            duration_s: 3.5,
            sentiment_gt: ChannelSentiment::uniform(Sentiment::Neutral),
            emotion_gt: Some(Emotion::Neutral),
            split,
            extra: BTreeMap::new(),
        }
    }

    fn line(id: &str, label: &str) -> String {
        format!(
            r#"{{"id":"{id}","speaker_id":"spk1","gender":"female","topic":"food","transcript":"halo","audio_path":"a/{id}.wav","video_path":"v/{id}.mp4","duration_s":2.0,"sentiment_gt":{{"multimodal":"{label}","text":"neutral"}},"split":"train"}}"#
        )
    }

    #[test]
    fn loads_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mini.jsonl");
        let body = [line("c", "positive"), line("a", "neutral"), line("b", "negative")].join("\n");
        fs::write(&p, body).unwrap();
        let c = load_corpus(&p).unwrap();
        let ids: Vec<_> = c.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
        assert_eq!(c.name, "mini");
        assert_eq!(c.samples[0].sentiment_gt.text, Some(Sentiment::Neutral));
        assert_eq!(c.samples[0].sentiment_gt.audio, None);
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dup.jsonl");
        fs::write(&p, [line("seg_007", "neutral"), line("seg_007", "neutral")].join("\n")).unwrap();
        let err = load_corpus(&p).unwrap_err();
        assert!(matches!(&err, CorpusError::DuplicateId { id, .. } if id == "seg_007"));
        assert!(err.to_string().contains("seg_007"));
    }

    #[test]
    fn non_canonical_gold_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, line("x", "positif")).unwrap();
        let msg = load_corpus(&p).unwrap_err().to_string();
        assert!(msg.contains("positif"), "{msg}");
        assert!(msg.contains("positive"), "{msg}");
        assert!(msg.contains(":1:"), "{msg}");
    }

    #[test]
    fn extra_fields_survive_round_trip() {
        let raw = line("x", "neutral").replace("\"split\":\"train\"", "\"split\":\"train\",\"ch_sims_id\":\"v01_0003\"");
        let s: Sample = serde_json::from_str(&raw).unwrap();
        assert_eq!(s.extra["ch_sims_id"], "v01_0003");
        let again = serde_json::to_string(&s).unwrap();
        let s2: Sample = serde_json::from_str(&again).unwrap();
        assert_eq!(s, s2);
        assert_eq!(serde_json::to_string(&s2).unwrap(), again);
        assert!(!again.contains("null"));
    }

    #[test]
    fn negative_duration_is_one_error() {
        let mut bad = sample("b", "s2", Split::Train);
        bad.duration_s = -1.0;
        let c = Corpus::new("t", "id", vec![sample("a", "s1", Split::Train), bad]);
        let r = validate_corpus(&c);
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].field, "duration_s");
        assert_eq!(r.errors[0].sample_id, "b");
    }

    #[test]
    fn split_counts_include_empty_splits() {
        let c = Corpus::new(
            "t",
            "id",
            vec![
                sample("a", "s1", Split::Train),
                sample("b", "s2", Split::Train),
                sample("c", "s3", Split::Test),
            ],
        );
        let r = validate_corpus(&c);
        let expected: BTreeMap<_, _> = [(Split::Train, 2), (Split::Val, 0), (Split::Test, 1)].into();
        assert_eq!(r.counts.per_split, expected);
    }

    #[test]
    fn empty_corpus_validates_clean() {
        let r = validate_corpus(&Corpus::new("e", "id", vec![]));
        assert!(r.errors.is_empty());
        assert_eq!(r.counts, Counts::default());
    }

    fn ten_speakers() -> Corpus {
        let samples = (0..10)
            .map(|i| sample(&format!("seg_{i}"), &format!("spk_{i}"), Split::Train))
            .collect();
        Corpus::new("t", "id", samples)
    }

    #[test]
    fn split_eight_one_one() {
        let out = split_corpus(&ten_speakers(), SplitRatios::new(0.8, 0.1, 0.1), 1).unwrap();
        let r = validate_corpus(&out);
        assert_eq!(r.counts.per_split[&Split::Train], 8);
        assert_eq!(r.counts.per_split[&Split::Val], 1);
        assert_eq!(r.counts.per_split[&Split::Test], 1);
        let again = split_corpus(&ten_speakers(), SplitRatios::new(0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let out = split_corpus(&ten_speakers(), SplitRatios::new(1.0, 0.0, 0.0), 5).unwrap();
        assert!(out.samples.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn split_rejects_bad_input() {
        let two = Corpus::new(
            "t",
            "id",
            vec![sample("a", "s1", Split::Train), sample("b", "s2", Split::Train)],
        );
        assert!(matches!(
            split_corpus(&two, SplitRatios::default(), 0),
            Err(CorpusError::TooFewSpeakers { found: 2, needed: 3 })
        ));
        assert!(matches!(
            split_corpus(&two, SplitRatios::new(0.5, 0.5, 0.1), 0),
            Err(CorpusError::InvalidRatios(_))
        ));
        assert!(matches!(
            split_corpus(&two, SplitRatios::new(1.2, -0.2, 0.0), 0),
            Err(CorpusError::InvalidRatios(_))
        ));
    }

    /// Independent count of violated invariants, one per (sample, field).
    fn brute_force_error_count(c: &Corpus) -> usize {
        let mut n = 0;
        for (i, s) in c.samples.iter().enumerate() {
            if s.id.is_empty() || c.samples[..i].iter().any(|o| o.id == s.id) {
                n += 1;
            }
            if s.duration_s.is_nan() || s.duration_s < 0.0 || s.duration_s.is_infinite() {
                n += 1;
            }
            if s.transcript.chars().all(char::is_whitespace) {
                n += 1;
            }
        }
        n
    }

    proptest! {
        #[test]
        fn error_count_matches_brute_force(
            corruptions in proptest::collection::vec((0u8..6, 0usize..8), 0..25),
            n in 1usize..12,
        ) {
            let mut samples: Vec<Sample> = (0..n)
                .map(|i| sample(&format!("s{i}"), &format!("p{}", i % 4), Split::Train))
                .collect();
            for (kind, idx) in corruptions {
                let idx = idx % n;
                let s = &mut samples[idx];
                match kind {
                    0 => s.id.clear(),
                    1 => s.id = "s0".to_string(),
                    2 => s.duration_s = -0.5,
                    3 => s.duration_s = f64::NAN,
                    4 => s.transcript = "  ".to_string(),
                    _ => s.speaker_id.clear(),
                }
            }
            let c = Corpus::new("p", "id", samples);
            prop_assert_eq!(validate_corpus(&c).errors.len(), brute_force_error_count(&c));
        }

        #[test]
        fn split_is_speaker_disjoint_and_near_target(
            speakers in 3usize..40,
            per_speaker in 1usize..4,
            seed in any::<u64>(),
            a in 1u32..10, b in 1u32..10, d in 1u32..10,
        ) {
            let total = f64::from(a + b + d);
            let train = f64::from(a) / total;
            let val = f64::from(b) / total;
            let ratios = SplitRatios::new(train, val, 1.0 - train - val);
            let samples = (0..speakers * per_speaker)
                .map(|i| sample(&format!("x{i}"), &format!("spk{}", i % speakers), Split::Train))
                .collect();
            let out = split_corpus(&Corpus::new("p", "id", samples), ratios, seed).unwrap();
            let mut by_speaker: HashMap<&str, Split> = HashMap::new();
            let mut per_split: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
            for s in &out.samples {
                let prev = by_speaker.insert(&s.speaker_id, s.split);
                prop_assert!(prev.is_none() || prev == Some(s.split));
                per_split.entry(s.split).or_default().insert(&s.speaker_id);
            }
            for (split, r) in Split::ALL.into_iter().zip([ratios.train, ratios.val, ratios.test]) {
                let got = per_split.get(&split).map_or(0, |s| s.len()) as f64;
                prop_assert!((got - r * speakers as f64).abs() <= 1.0 + 1e-9,
                    "split {} got {} target {}", split, got, r * speakers as f64);
            }
        }
    }
}
