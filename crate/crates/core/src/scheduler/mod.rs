//! Instruction scheduling: turns a corpus plus auxiliary supervision into a
//! step-indexed training manifest.
//!
//! * `multi_stage`: steps `1..=t0` draw only auxiliary instances, steps after
//!   `t0` draw only main-task instances.
//! * `hybrid`: every step first draws an instruction kind from the mix
//!   weights, then an instance of that kind.
//!
//! Instances are drawn uniformly with replacement from the train split using a
//! ChaCha8 stream seeded by the plan, so equal inputs give byte-identical
//! manifests.

pub mod runspec;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, sha256_hex, JsonlError};
use crate::auxforge::{supervision_hash, AuxSupervisionRecord};
use crate::corpus::{Corpus, Sample, Split};
use crate::labels::{Modality, Sentiment};
use crate::promptkit::{InstructionType, PromptBundle, PromptError, PromptKit};

pub use runspec::{emit_runspec, RunSpec, RunSpecInputs, RunSpecOverrides};

pub const MANIFEST_FORMAT: &str = "omnimer-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MultiStage,
    Hybrid,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "multi_stage" | "multistage" => Ok(Strategy::MultiStage),
            "hybrid" => Ok(Strategy::Hybrid),
            _ => Err(format!("unknown strategy `{s}` (expected multi-stage or hybrid)")),
        }
    }
}

/// The scheduler's instruction alphabet: three auxiliary kinds and the main task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AuxText,
    AuxAudio,
    AuxVisual,
    Main,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::AuxText, TaskKind::AuxAudio, TaskKind::AuxVisual, TaskKind::Main];

    pub fn of(t: InstructionType) -> Self {
        match t {
            InstructionType::AuxText => TaskKind::AuxText,
            InstructionType::AuxAudio => TaskKind::AuxAudio,
            InstructionType::AuxVisual => TaskKind::AuxVisual,
            InstructionType::MainSentiment | InstructionType::MainEmotion => TaskKind::Main,
        }
    }

    fn modality(self) -> Option<Modality> {
        match self {
            TaskKind::AuxText => Some(Modality::Text),
            TaskKind::AuxAudio => Some(Modality::Audio),
            TaskKind::AuxVisual => Some(Modality::Visual),
            TaskKind::Main => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::AuxText => "aux_text",
            TaskKind::AuxAudio => "aux_audio",
            TaskKind::AuxVisual => "aux_visual",
            TaskKind::Main => "main",
        })
    }
}

pub fn uniform_mix() -> BTreeMap<TaskKind, f64> {
    TaskKind::ALL.into_iter().map(|k| (k, 0.25)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulePlan {
    pub strategy: Strategy,
    /// Defaults to `epochs` times the number of main-task train instances.
    pub total_steps: Option<u64>,
    /// Multi-stage boundary; defaults to ⌊0.4·T⌋.
    pub t0: Option<u64>,
    pub mix_weights: BTreeMap<TaskKind, f64>,
    pub seed: u64,
    pub main_granularity: InstructionType,
    pub epochs: u32,
}

impl Default for SchedulePlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hybrid,
            total_steps: None,
            t0: None,
            mix_weights: uniform_mix(),
            seed: 0,
            main_granularity: InstructionType::MainSentiment,
            epochs: 5,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScheduleError {
    #[error("plan strategy is {found:?}, expected {expected:?}")]
    WrongStrategy { expected: Strategy, found: Strategy },
    #[error("main_granularity must be main_sentiment or main_emotion, got {0}")]
    NotMainGranularity(InstructionType),
    #[error("t0 = {t0} exceeds total steps {total}")]
    BoundaryOutOfRange { t0: u64, total: u64 },
    #[error("total steps must be positive")]
    NoSteps,
    #[error("the train split has no usable main-task instances")]
    EmptyTrainSplit,
    #[error("auxiliary steps requested but no usable supervision records cover the train split")]
    NoUsableSupervision,
    #[error("mix weight for {kind} is {weight}; weights must be finite and nonnegative")]
    NegativeWeight { kind: TaskKind, weight: f64 },
    #[error("all mix weights are zero")]
    ZeroWeights,
    #[error("mix weights sum to {0}, expected 1")]
    WeightsDoNotSumToOne(f64),
    #[error("mix weight on {0} but no usable instances of that kind")]
    NoInstancesForKind(TaskKind),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingManifestEntry {
    pub step: u64,
    pub sample_id: String,
    pub instruction_type: InstructionType,
    pub prompt: PromptBundle,
    pub target_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub strategy: Strategy,
    pub total_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_weights: Option<BTreeMap<TaskKind, f64>>,
    pub seed: u64,
    pub main_granularity: InstructionType,
    pub corpus_hash: String,
    pub supervision_hash: String,
    pub template_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// One line of a manifest file: the header first, then entries in step order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Entry(TrainingManifestEntry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingManifest {
    pub header: ManifestHeader,
    pub entries: Vec<TrainingManifestEntry>,
}

impl TrainingManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine::Header(self.header.clone())).expect("header");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(&ManifestLine::Entry(e.clone())).expect("entry"));
            out.push('\n');
        }
        out
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_jsonl())
    }

    pub fn count_kind(&self, kind: TaskKind) -> usize {
        self.entries.iter().filter(|e| TaskKind::of(e.instruction_type) == kind).count()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestReadError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("manifest must start with exactly one header line")]
    Header,
}

pub fn load_manifest(path: &Path) -> Result<TrainingManifest, ManifestReadError> {
    let mut header = None;
    let mut entries = Vec::new();
    for (i, (_, line)) in read_jsonl::<ManifestLine>(path)?.into_iter().enumerate() {
        match (i, line) {
            (0, ManifestLine::Header(h)) => header = Some(h),
            (_, ManifestLine::Entry(e)) if header.is_some() => entries.push(e),
            _ => return Err(ManifestReadError::Header),
        }
    }
    Ok(TrainingManifest {
        header: header.ok_or(ManifestReadError::Header)?,
        entries,
    })
}

#[derive(Serialize)]
struct AuxTarget<'a> {
    #[serde(rename = "Sentiment")]
    sentiment: Sentiment,
    #[serde(rename = "Emotion_keywords", skip_serializing_if = "Option::is_none")]
    keywords: Option<&'a [String]>,
    #[serde(rename = "Explanation")]
    explanation: &'a str,
}

#[derive(Serialize)]
struct MainTarget {
    #[serde(rename = "Sentiment")]
    sentiment: Sentiment,
    #[serde(rename = "Emotion", skip_serializing_if = "Option::is_none")]
    emotion: Option<crate::labels::Emotion>,
}

/// Gold answer for an auxiliary instance: the modality's gold sentiment with
/// the record's explanation (and keywords for text).
pub fn aux_target(r: &AuxSupervisionRecord) -> String {
    let keywords = match r.modality {
        Modality::Text => Some(r.keywords.as_deref().unwrap_or(&[])),
        _ => None,
    };
    serde_json::to_string(&AuxTarget {
        sentiment: r.sentiment_gt,
        keywords,
        explanation: &r.explanation,
    })
    .expect("target serializes")
}

/// Gold answer for a main-task instance; `None` when the sample lacks the label.
pub fn main_target(s: &Sample, granularity: InstructionType) -> Option<String> {
    let emotion = match granularity {
        InstructionType::MainEmotion => Some(s.emotion_gt?),
        _ => None,
    };
    Some(
        serde_json::to_string(&MainTarget {
            sentiment: s.sentiment_gt.multimodal,
            emotion,
        })
        .expect("target serializes"),
    )
}

#[derive(Clone, Copy)]
enum Instance<'a> {
    Aux(&'a Sample, &'a AuxSupervisionRecord),
    Main(&'a Sample),
}

struct Pools<'a> {
    aux: BTreeMap<Modality, Vec<Instance<'a>>>,
    main: Vec<Instance<'a>>,
}

impl<'a> Pools<'a> {
    /// Train-split instances in corpus order; aux records in (sample, modality) order.
    fn build(c: &'a Corpus, aux: &'a [AuxSupervisionRecord], granularity: InstructionType) -> Self {
        let train: BTreeMap<&str, &Sample> = c.split(Split::Train).map(|s| (s.id.as_str(), s)).collect();
        let mut usable: Vec<&AuxSupervisionRecord> = aux
            .iter()
            .filter(|r| r.is_usable() && train.contains_key(r.sample_id.as_str()))
            .collect();
        usable.sort_by(|a, b| (&a.sample_id, a.modality).cmp(&(&b.sample_id, b.modality)));
        let mut pools = BTreeMap::new();
        for r in usable {
            pools
                .entry(r.modality)
                .or_insert_with(Vec::new)
                .push(Instance::Aux(train[r.sample_id.as_str()], r));
        }
        let main = c
            .split(Split::Train)
            .filter(|s| main_target(s, granularity).is_some())
            .map(Instance::Main)
            .collect();
        Self { aux: pools, main }
    }

    fn all_aux(&self) -> Vec<Instance<'a>> {
        self.aux.values().flatten().copied().collect()
    }

    fn kind(&self, k: TaskKind) -> &[Instance<'a>] {
        match k.modality() {
            Some(m) => self.aux.get(&m).map_or(&[], Vec::as_slice),
            None => &self.main,
        }
    }
}

fn check_granularity(p: &SchedulePlan) -> Result<(), ScheduleError> {
    if p.main_granularity.is_main() {
        Ok(())
    } else {
        Err(ScheduleError::NotMainGranularity(p.main_granularity))
    }
}

fn total_steps(p: &SchedulePlan, main_instances: usize) -> Result<u64, ScheduleError> {
    let t = p
        .total_steps
        .unwrap_or(u64::from(p.epochs) * main_instances as u64);
    if t == 0 {
        return Err(ScheduleError::NoSteps);
    }
    Ok(t)
}

/// ⌊0.4·T⌋: two of five epochs' worth of steps.
pub fn default_t0(total: u64) -> u64 {
    total * 2 / 5
}

fn entry(
    step: u64,
    inst: Instance<'_>,
    kit: &PromptKit,
    granularity: InstructionType,
) -> Result<TrainingManifestEntry, ScheduleError> {
    let (sample, t, target) = match inst {
        Instance::Aux(s, r) => (s, InstructionType::aux(r.modality), aux_target(r)),
        Instance::Main(s) => (
            s,
            granularity,
            main_target(s, granularity).expect("pool holds labelled samples"),
        ),
    };
    Ok(TrainingManifestEntry {
        step,
        sample_id: sample.id.clone(),
        instruction_type: t,
        prompt: kit.render(sample, t, None)?,
        target_text: target,
    })
}

struct HeaderInputs<'a> {
    corpus: &'a Corpus,
    aux: &'a [AuxSupervisionRecord],
    kit: &'a PromptKit,
}

impl HeaderInputs<'_> {
    fn header(&self, p: &SchedulePlan, total: u64, t0: Option<u64>, mix: Option<BTreeMap<TaskKind, f64>>) -> ManifestHeader {
        ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            strategy: p.strategy,
            total_steps: total,
            t0,
            mix_weights: mix,
            seed: p.seed,
            main_granularity: p.main_granularity,
            corpus_hash: self.corpus.content_hash(),
            supervision_hash: supervision_hash(self.aux),
            template_hash: self.kit.template_hash().to_string(),
            config_hash: None,
        }
    }
}

pub fn plan_multistage(
    c: &Corpus,
    aux: &[AuxSupervisionRecord],
    p: &SchedulePlan,
    kit: &PromptKit,
) -> Result<TrainingManifest, ScheduleError> {
    if p.strategy != Strategy::MultiStage {
        return Err(ScheduleError::WrongStrategy {
            expected: Strategy::MultiStage,
            found: p.strategy,
        });
    }
    check_granularity(p)?;
    let pools = Pools::build(c, aux, p.main_granularity);
    let total = total_steps(p, pools.main.len())?;
    let t0 = p.t0.unwrap_or_else(|| default_t0(total));
    if t0 > total {
        return Err(ScheduleError::BoundaryOutOfRange { t0, total });
    }
    let aux_pool = pools.all_aux();
    if t0 > 0 && aux_pool.is_empty() {
        return Err(ScheduleError::NoUsableSupervision);
    }
    if total > t0 && pools.main.is_empty() {
        return Err(ScheduleError::EmptyTrainSplit);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut entries = Vec::with_capacity(total as usize);
    for step in 1..=total {
        let pool = if step <= t0 { &aux_pool } else { &pools.main };
        let inst = pool[rng.gen_range(0..pool.len())];
        entries.push(entry(step, inst, kit, p.main_granularity)?);
    }
    let header = HeaderInputs { corpus: c, aux, kit }.header(p, total, Some(t0), None);
    Ok(TrainingManifest { header, entries })
}

/// Validates hybrid weights: finite, nonnegative, not all zero, summing to 1.
pub fn check_mix(weights: &BTreeMap<TaskKind, f64>) -> Result<[f64; 4], ScheduleError> {
    let w = TaskKind::ALL.map(|k| weights.get(&k).copied().unwrap_or(0.0));
    for (k, &x) in TaskKind::ALL.iter().zip(&w) {
        if !x.is_finite() || x < 0.0 {
            return Err(ScheduleError::NegativeWeight { kind: *k, weight: x });
        }
    }
    let sum: f64 = w.iter().sum();
    if sum == 0.0 {
        return Err(ScheduleError::ZeroWeights);
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(ScheduleError::WeightsDoNotSumToOne(sum));
    }
    Ok(w)
}

pub fn plan_hybrid(
    c: &Corpus,
    aux: &[AuxSupervisionRecord],
    p: &SchedulePlan,
    kit: &PromptKit,
) -> Result<TrainingManifest, ScheduleError> {
    if p.strategy != Strategy::Hybrid {
        return Err(ScheduleError::WrongStrategy {
            expected: Strategy::Hybrid,
            found: p.strategy,
        });
    }
    check_granularity(p)?;
    let weights = check_mix(&p.mix_weights)?;
    let pools = Pools::build(c, aux, p.main_granularity);
    for (k, &w) in TaskKind::ALL.iter().zip(&weights) {
        if w > 0.0 && pools.kind(*k).is_empty() {
            return Err(match k {
                TaskKind::Main => ScheduleError::EmptyTrainSplit,
                _ => ScheduleError::NoInstancesForKind(*k),
            });
        }
    }
    let total = total_steps(p, pools.main.len())?;
    let kinds = WeightedIndex::new(weights).expect("weights checked");

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut entries = Vec::with_capacity(total as usize);
    for step in 1..=total {
        let pool = pools.kind(TaskKind::ALL[kinds.sample(&mut rng)]);
        let inst = pool[rng.gen_range(0..pool.len())];
        entries.push(entry(step, inst, kit, p.main_granularity)?);
    }
    let mix = TaskKind::ALL.iter().copied().zip(weights).collect();
    let header = HeaderInputs { corpus: c, aux, kit }.header(p, total, None, Some(mix));
    Ok(TrainingManifest { header, entries })
}

/// Dispatches on `p.strategy`.
pub fn plan(
    c: &Corpus,
    aux: &[AuxSupervisionRecord],
    p: &SchedulePlan,
    kit: &PromptKit,
) -> Result<TrainingManifest, ScheduleError> {
    match p.strategy {
        Strategy::MultiStage => plan_multistage(c, aux, p, kit),
        Strategy::Hybrid => plan_hybrid(c, aux, p, kit),
    }
}
