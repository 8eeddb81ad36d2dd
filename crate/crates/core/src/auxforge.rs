//! Consistency-checked auxiliary supervision.
//!
//! For each (sample, modality) the model first answers the unconstrained
//! auxiliary prompt. If its sentiment matches the gold label for that
//! modality the explanation is kept as is (`retained`). Otherwise the model is
//! asked again with the gold label fixed, and the explanation it writes for
//! that label is stored (`regenerated`). Every generation, successful or not,
//! counts against `max_attempts`; running out yields `failed`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, sha256_hex, to_jsonl_string, write_atomic, JsonlError};
use crate::corpus::{ensure_valid, Corpus, CorpusError, Sample};
use crate::labels::{Modality, Pred, Sentiment};
use crate::modelgw::{bounded_map, Gateway, GenOptions};
use crate::outparse::{parse_with_schema, ParsedOutput};
use crate::promptkit::{InstructionType, PromptError, PromptKit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Retained,
    Regenerated,
    Failed,
}

/// Where the gold sentiment for a modality came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldSource {
    Channel,
    MultimodalFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxSupervisionRecord {
    pub sample_id: String,
    pub modality: Modality,
    pub sentiment_gt: Sentiment,
    pub gt_source: GoldSource,
    pub sentiment_pred: Pred<Sentiment>,
    pub consistent: bool,
    /// Empty when `status` is `failed`.
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    pub attempts: u32,
    pub status: RecordStatus,
    pub model_id: String,
    pub template_hash: String,
    /// First-pass explanation of a regenerated record, kept for audit only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unconstrained_explanation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl AuxSupervisionRecord {
    pub fn is_usable(&self) -> bool {
        self.status != RecordStatus::Failed
    }

    fn cache_key(&self) -> CacheKey {
        (
            self.sample_id.clone(),
            self.modality,
            self.template_hash.clone(),
            self.model_id.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructorConfig {
    pub max_attempts: u32,
    /// Concurrent (sample, modality) constructions.
    pub parallelism: usize,
}

impl Default for ConstructorConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            parallelism: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuxError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("supervision cache {path} is corrupt ({message}); refusing to rebuild over it")]
    CacheCorrupt { path: PathBuf, message: String },
    #[error("cannot write supervision cache {path}: {message}")]
    CacheWrite { path: PathBuf, message: String },
}

/// Gold sentiment for modality `m`: the per-channel label when annotated,
/// otherwise the multimodal label.
pub fn gold_for(s: &Sample, m: Modality) -> (Sentiment, GoldSource) {
    match s.sentiment_gt.channel(m) {
        Some(l) => (l, GoldSource::Channel),
        None => (s.sentiment_gt.multimodal, GoldSource::MultimodalFallback),
    }
}

fn describe(p: &ParsedOutput) -> String {
    p.reasons
        .iter()
        .map(|r| serde_json::to_string(r).expect("reason serializes"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn generate(gw: &Gateway, kit: &PromptKit, s: &Sample, m: Modality, constraint: Option<Sentiment>, opts: &GenOptions)
    -> Result<Result<ParsedOutput, String>, PromptError>
{
    let bundle = kit.render(s, InstructionType::aux(m), constraint)?;
    Ok(match gw.complete(&bundle, opts) {
        Ok(c) => Ok(parse_with_schema(bundle.expected_schema, &c.text)),
        Err(e) => Err(format!("gateway: {e}")),
    })
}

/// Runs the two-step check for one sample and modality.
///
/// Only prompt rendering errors (missing transcript or media reference) are
/// returned as `Err`; gateway and parse failures end up in the record.
pub fn construct_one(
    s: &Sample,
    m: Modality,
    gw: &Gateway,
    kit: &PromptKit,
    opts: &GenOptions,
    cfg: &ConstructorConfig,
) -> Result<AuxSupervisionRecord, PromptError> {
    let cap = cfg.max_attempts.max(1);
    let (gold, gt_source) = gold_for(s, m);
    let mut diagnostics = Vec::new();
    let mut record = AuxSupervisionRecord {
        sample_id: s.id.clone(),
        modality: m,
        sentiment_gt: gold,
        gt_source,
        sentiment_pred: Pred::Invalid,
        consistent: false,
        explanation: String::new(),
        keywords: None,
        attempts: 1,
        status: RecordStatus::Failed,
        model_id: opts.model_id.clone(),
        template_hash: kit.template_hash().to_string(),
        unconstrained_explanation: None,
        diagnostics: Vec::new(),
    };

    let first = match generate(gw, kit, s, m, None, opts)? {
        Ok(p) if p.valid => Some(p),
        Ok(p) => {
            diagnostics.push(format!("attempt 1: unparseable answer [{}]", describe(&p)));
            None
        }
        Err(e) => {
            diagnostics.push(format!("attempt 1: {e}"));
            None
        }
    };

    if let Some(p) = &first {
        record.sentiment_pred = p.sentiment;
        if p.sentiment == Pred::Label(gold) {
            record.consistent = true;
            record.status = RecordStatus::Retained;
            record.explanation = p.explanation.clone().unwrap_or_default();
            record.keywords = p.keywords.clone().filter(|_| m == Modality::Text);
            record.diagnostics = diagnostics;
            return Ok(record);
        }
        record.unconstrained_explanation = p.explanation.clone();
    }

    while record.attempts < cap {
        record.attempts += 1;
        match generate(gw, kit, s, m, Some(gold), opts)? {
            Ok(p) if p.valid => {
                record.status = RecordStatus::Regenerated;
                record.explanation = p.explanation.unwrap_or_default();
                record.keywords = p.keywords.filter(|_| m == Modality::Text);
                record.diagnostics = diagnostics;
                return Ok(record);
            }
            Ok(p) => diagnostics.push(format!(
                "attempt {}: unparseable constrained answer [{}]",
                record.attempts,
                describe(&p)
            )),
            Err(e) => diagnostics.push(format!("attempt {}: {e}", record.attempts)),
        }
    }
    record.diagnostics = diagnostics;
    Ok(record)
}

type CacheKey = (String, Modality, String, String);

/// Previously constructed records, keyed by sample, modality, template hash
/// and model id. A later line for the same key wins.
#[derive(Debug, Default)]
pub struct SupervisionCache {
    entries: BTreeMap<CacheKey, AuxSupervisionRecord>,
}

impl SupervisionCache {
    /// A missing file is an empty cache; an unreadable or malformed one is an error.
    pub fn load(path: &Path) -> Result<Self, AuxError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let rows: Vec<(usize, AuxSupervisionRecord)> = read_jsonl(path).map_err(|e| {
            let message = match e {
                JsonlError::Malformed { line, message, .. } => format!("line {line}: {message}"),
                other => other.to_string(),
            };
            AuxError::CacheCorrupt {
                path: path.to_path_buf(),
                message,
            }
        })?;
        let entries = rows.into_iter().map(|(_, r)| (r.cache_key(), r)).collect();
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A reusable (non-failed) record for this key, if any.
    pub fn lookup(&self, sample_id: &str, m: Modality, template_hash: &str, model_id: &str) -> Option<&AuxSupervisionRecord> {
        self.entries
            .get(&(sample_id.to_string(), m, template_hash.to_string(), model_id.to_string()))
            .filter(|r| r.is_usable())
    }

    pub fn insert(&mut self, r: AuxSupervisionRecord) {
        self.entries.insert(r.cache_key(), r);
    }

    pub fn save(&self, path: &Path) -> Result<(), AuxError> {
        let records: Vec<_> = self.entries.values().collect();
        write_atomic(path, to_jsonl_string(&records)).map_err(|e| AuxError::CacheWrite {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub records: Vec<AuxSupervisionRecord>,
    pub reused: usize,
    pub constructed: usize,
}

impl BuildOutcome {
    pub fn count(&self, status: RecordStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }
}

/// Builds one record per (sample, modality), reusing cached records and
/// constructing the rest through the gateway. Output is sorted by
/// (sample id, modality). With a `cache_path`, the merged cache is written
/// back atomically at the end of the run.
pub fn build_supervision(
    c: &Corpus,
    modalities: &[Modality],
    gw: &Gateway,
    kit: &PromptKit,
    opts: &GenOptions,
    cache_path: Option<&Path>,
    cfg: &ConstructorConfig,
) -> Result<BuildOutcome, AuxError> {
    ensure_valid(c)?;
    let mut cache = match cache_path {
        Some(p) => SupervisionCache::load(p)?,
        None => SupervisionCache::default(),
    };
    let modalities: BTreeSet<Modality> = modalities.iter().copied().collect();
    let mut samples: Vec<&Sample> = c.samples.iter().collect();
    samples.sort_by(|a, b| a.id.cmp(&b.id));

    let mut records: Vec<Option<AuxSupervisionRecord>> = Vec::new();
    let mut todo: Vec<(usize, &Sample, Modality)> = Vec::new();
    for s in &samples {
        for &m in &modalities {
            match cache.lookup(&s.id, m, kit.template_hash(), &opts.model_id) {
                Some(r) => records.push(Some(r.clone())),
                None => {
                    todo.push((records.len(), s, m));
                    records.push(None);
                }
            }
        }
    }
    let reused = records.len() - todo.len();

    let built = bounded_map(&todo, cfg.parallelism, |(_, s, m)| construct_one(s, *m, gw, kit, opts, cfg));
    let constructed = built.len();
    let mut first_err = None;
    for ((slot, _, _), r) in todo.iter().zip(built) {
        match r {
            Ok(rec) => {
                cache.insert(rec.clone());
                records[*slot] = Some(rec);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    // Persist what was built even if some pairs could not be rendered.
    if let Some(p) = cache_path {
        cache.save(p)?;
    }
    if let Some(e) = first_err {
        return Err(e.into());
    }
    Ok(BuildOutcome {
        records: records.into_iter().map(|r| r.expect("all slots filled")).collect(),
        reused,
        constructed,
    })
}

pub fn records_to_jsonl(records: &[AuxSupervisionRecord]) -> String {
    to_jsonl_string(records)
}

pub fn supervision_hash(records: &[AuxSupervisionRecord]) -> String {
    sha256_hex(records_to_jsonl(records))
}

pub fn load_supervision(path: &Path) -> Result<Vec<AuxSupervisionRecord>, JsonlError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}
