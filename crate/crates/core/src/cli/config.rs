//! Pipeline configuration file: one TOML document with a section per command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::auxforge::ConstructorConfig;
use crate::corpus::{Split, SplitRatios};
use crate::evalkit::{CompatibilityMap, Task};
use crate::labels::Modality;
use crate::modelgw::{GenOptions, MediaPolicy, RetryPolicy};
use crate::scheduler::{RunSpecOverrides, SchedulePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides `schedule.seed`, `runspec` seed and corpus splitting when set.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub endpoint: EndpointSection,
    pub generation: GenOptions,
    pub build_aux: BuildAuxSection,
    pub schedule: SchedulePlan,
    pub runspec: RunSpecOverrides,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            endpoint: EndpointSection::default(),
            generation: GenOptions::default(),
            build_aux: BuildAuxSection::default(),
            schedule: SchedulePlan::default(),
            runspec: RunSpecOverrides::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    /// BCP-47 tag of the transcripts, used for the `{language}` placeholder.
    pub language: String,
    /// Directory of prompt templates replacing the built-in set.
    pub templates: Option<PathBuf>,
    pub split_ratios: SplitRatios,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            language: "id".into(),
            templates: None,
            split_ratios: SplitRatios::new(0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSection {
    /// API root of an OpenAI-compatible server, e.g. `http://localhost:8000/v1`.
    pub url: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub media_root: Option<PathBuf>,
    pub media: MediaPolicy,
    pub retry: RetryPolicy,
    pub rate_limit_rps: Option<f64>,
    /// Concurrent requests for prediction.
    pub parallelism: usize,
}

impl Default for EndpointSection {
    fn default() -> Self {
        Self {
            url: None,
            api_key_env: None,
            media_root: None,
            media: MediaPolicy::default(),
            retry: RetryPolicy::default(),
            rate_limit_rps: None,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildAuxSection {
    pub modalities: Vec<Modality>,
    pub cache: Option<PathBuf>,
    pub max_attempts: u32,
    pub parallelism: usize,
}

impl BuildAuxSection {
    pub fn constructor(&self) -> ConstructorConfig {
        ConstructorConfig {
            max_attempts: self.max_attempts,
            parallelism: self.parallelism,
        }
    }
}

impl Default for BuildAuxSection {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            cache: None,
            max_attempts: ConstructorConfig::default().max_attempts,
            parallelism: ConstructorConfig::default().parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub task: Task,
    pub split: Split,
    pub compatibility: CompatibilityMap,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            task: Task::Sentiment,
            split: Split::Test,
            compatibility: CompatibilityMap::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text).map_err(|message| ConfigError::Parse { path: path.into(), message })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Applies the global seed to the sections that consume one.
    pub fn resolve_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.schedule.seed = seed;
        }
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.schedule.seed)
    }

    /// sha256 of the canonical JSON of every setting that affects artifact
    /// content. The output directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_vec(&c).expect("config serializes"))
    }
}
