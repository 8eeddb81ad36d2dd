//! LoRA run specification consumed by the trainer.

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: u32,
    pub alpha: u32,
    pub targets: Vec<String>,
    pub frozen: Vec<String>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16,
            targets: ["text_encoder.attn", "audio_encoder.attn", "vision_encoder.attn", "thinker.attn"]
                .map(String::from)
                .to_vec(),
            frozen: ["vision_tower", "multimodal_projector"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub name: String,
    pub lr: f64,
    pub schedule: String,
    /// Restart the learning-rate schedule when a multi-stage run reaches t0.
    #[serde(default)]
    pub reset_at_t0: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            name: "adamw".into(),
            lr: 5e-5,
            schedule: "cosine".into(),
            reset_at_t0: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub per_device: u32,
    pub grad_accum: u32,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { per_device: 1, grad_accum: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub format: String,
    pub lora: LoraSpec,
    pub optimizer: OptimizerSpec,
    pub batch: BatchSpec,
    pub epochs: u32,
    pub manifest_path: String,
    pub manifest_hash: String,
    pub corpus_hash: String,
    pub supervision_hash: String,
    pub template_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl RunSpec {
    /// Pretty JSON with a trailing newline; field order is fixed by the struct.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("runspec serializes");
        s.push('\n');
        s
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(self.to_json())
    }
}

/// Every field a caller may override; `None` keeps the default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpecOverrides {
    pub rank: Option<u32>,
    pub alpha: Option<u32>,
    pub targets: Option<Vec<String>>,
    pub frozen: Option<Vec<String>>,
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub schedule: Option<String>,
    pub reset_at_t0: Option<bool>,
    pub per_device: Option<u32>,
    pub grad_accum: Option<u32>,
    pub epochs: Option<u32>,
}

/// Artifact references embedded in the run spec.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSpecInputs {
    pub manifest_path: String,
    pub manifest_hash: String,
    pub corpus_hash: String,
    pub supervision_hash: String,
    pub template_hash: String,
    pub seed: u64,
    pub config_hash: Option<String>,
}

pub fn emit_runspec(inputs: &RunSpecInputs, o: &RunSpecOverrides) -> RunSpec {
    let mut lora = LoraSpec::default();
    let mut optimizer = OptimizerSpec::default();
    let mut batch = BatchSpec::default();
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(lora.rank, o.rank);
    set!(lora.alpha, o.alpha);
    set!(lora.targets, o.targets);
    set!(lora.frozen, o.frozen);
    set!(optimizer.name, o.optimizer);
    set!(optimizer.lr, o.lr);
    set!(optimizer.schedule, o.schedule);
    set!(optimizer.reset_at_t0, o.reset_at_t0);
    set!(batch.per_device, o.per_device);
    set!(batch.grad_accum, o.grad_accum);
    RunSpec {
        format: "omnimer-runspec/1".into(),
        lora,
        optimizer,
        batch,
        epochs: o.epochs.unwrap_or(5),
        manifest_path: inputs.manifest_path.clone(),
        manifest_hash: inputs.manifest_hash.clone(),
        corpus_hash: inputs.corpus_hash.clone(),
        supervision_hash: inputs.supervision_hash.clone(),
        template_hash: inputs.template_hash.clone(),
        seed: inputs.seed,
        config_hash: inputs.config_hash.clone(),
    }
}
