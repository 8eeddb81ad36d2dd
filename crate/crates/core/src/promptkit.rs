//! Instruction templates and prompt bundles.
//!
//! All instruction wording lives in the template files under `templates/`.
//! A template is plain text with `{name}` placeholders; the known names are
//! `text`, `audio`, `visual`, `language` and `sentiment`. The template set is
//! hashed so every downstream artifact can record which wording produced it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::corpus::Sample;
use crate::labels::{Modality, Sentiment};

pub const TEMPLATE_SET_VERSION: &str = "omnimer-templates/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionType {
    AuxText,
    AuxAudio,
    AuxVisual,
    MainSentiment,
    MainEmotion,
}

impl InstructionType {
    pub const ALL: [InstructionType; 5] = [
        InstructionType::AuxText,
        InstructionType::AuxAudio,
        InstructionType::AuxVisual,
        InstructionType::MainSentiment,
        InstructionType::MainEmotion,
    ];

    pub fn aux(m: Modality) -> Self {
        match m {
            Modality::Text => InstructionType::AuxText,
            Modality::Audio => InstructionType::AuxAudio,
            Modality::Visual => InstructionType::AuxVisual,
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            InstructionType::AuxText => Some(Modality::Text),
            InstructionType::AuxAudio => Some(Modality::Audio),
            InstructionType::AuxVisual => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn is_main(self) -> bool {
        self.modality().is_none()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstructionType::AuxText => "aux_text",
            InstructionType::AuxAudio => "aux_audio",
            InstructionType::AuxVisual => "aux_visual",
            InstructionType::MainSentiment => "main_sentiment",
            InstructionType::MainEmotion => "main_emotion",
        }
    }

    /// Output schema of an unconstrained prompt of this type.
    pub fn schema(self) -> OutputSchema {
        match self {
            InstructionType::AuxText => OutputSchema::AuxText,
            InstructionType::AuxAudio => OutputSchema::AuxAudio,
            InstructionType::AuxVisual => OutputSchema::AuxVisual,
            InstructionType::MainSentiment => OutputSchema::MainSentiment,
            InstructionType::MainEmotion => OutputSchema::MainEmotion,
        }
    }

    fn template_name(self, constrained: bool) -> &'static str {
        match (self, constrained) {
            (InstructionType::AuxText, false) => "aux_text",
            (InstructionType::AuxAudio, false) => "aux_audio",
            (InstructionType::AuxVisual, false) => "aux_visual",
            (InstructionType::AuxText, true) => "aux_text_constrained",
            (InstructionType::AuxAudio, true) => "aux_audio_constrained",
            (InstructionType::AuxVisual, true) => "aux_visual_constrained",
            (InstructionType::MainSentiment, _) => "main_sentiment",
            (InstructionType::MainEmotion, _) => "main_emotion",
        }
    }
}

impl fmt::Display for InstructionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The JSON answer shape a prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSchema {
    AuxText,
    AuxAudio,
    AuxVisual,
    /// Constrained regeneration for text: keywords and explanation only.
    AuxTextConstrained,
    /// Constrained regeneration for audio or visual: explanation only.
    AuxMediaConstrained,
    MainSentiment,
    MainEmotion,
}

pub const KEY_SENTIMENT: &str = "Sentiment";
pub const KEY_KEYWORDS: &str = "Emotion_keywords";
pub const KEY_EXPLANATION: &str = "Explanation";
pub const KEY_EMOTION: &str = "Emotion";

impl OutputSchema {
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            OutputSchema::AuxText => &[KEY_SENTIMENT, KEY_KEYWORDS, KEY_EXPLANATION],
            OutputSchema::AuxAudio | OutputSchema::AuxVisual => &[KEY_SENTIMENT, KEY_EXPLANATION],
            OutputSchema::AuxTextConstrained => &[KEY_KEYWORDS, KEY_EXPLANATION],
            OutputSchema::AuxMediaConstrained => &[KEY_EXPLANATION],
            OutputSchema::MainSentiment => &[KEY_SENTIMENT],
            OutputSchema::MainEmotion => &[KEY_SENTIMENT, KEY_EMOTION],
        }
    }

    pub fn requires(self, key: &str) -> bool {
        self.required_keys().contains(&key)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachmentKind {
    Audio,
    Video,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptBundle {
    pub sample_id: String,
    pub instruction_type: InstructionType,
    pub instruction_text: String,
    pub attachments: Vec<Attachment>,
    pub expected_schema: OutputSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<Sentiment>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("sample `{sample}` has no {field}, required by {instruction}")]
    MissingField {
        sample: String,
        field: &'static str,
        instruction: InstructionType,
    },
    #[error("a sentiment constraint is only defined for auxiliary instructions, not {0}")]
    ConstraintOnMain(InstructionType),
    #[error("template `{0}` is missing from the template set")]
    MissingTemplate(String),
    #[error("template `{template}` uses unknown placeholder `{{{placeholder}}}`")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("cannot read template directory: {0}")]
    Io(String),
}

const PLACEHOLDERS: [&str; 5] = ["text", "audio", "visual", "language", "sentiment"];

pub const TEMPLATE_NAMES: [&str; 8] = [
    "aux_text",
    "aux_audio",
    "aux_visual",
    "aux_text_constrained",
    "aux_audio_constrained",
    "aux_visual_constrained",
    "main_sentiment",
    "main_emotion",
];

/// Placeholder-looking tokens: `{` + lowercase identifier + `}`.
fn placeholders(template: &str) -> impl Iterator<Item = &str> {
    template.match_indices('{').filter_map(move |(start, _)| {
        let rest = &template[start + 1..];
        let end = rest.find('}')?;
        let name = &rest[..end];
        let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_lowercase() || c == '_');
        ok.then_some(name)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
    hash: String,
}

impl TemplateSet {
    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        let raw = [
            ("aux_text", include_str!("../templates/aux_text.txt")),
            ("aux_audio", include_str!("../templates/aux_audio.txt")),
            ("aux_visual", include_str!("../templates/aux_visual.txt")),
            ("aux_text_constrained", include_str!("../templates/aux_text_constrained.txt")),
            ("aux_audio_constrained", include_str!("../templates/aux_audio_constrained.txt")),
            ("aux_visual_constrained", include_str!("../templates/aux_visual_constrained.txt")),
            ("main_sentiment", include_str!("../templates/main_sentiment.txt")),
            ("main_emotion", include_str!("../templates/main_emotion.txt")),
        ];
        Self::from_map(raw.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
            .expect("builtin templates are well formed")
    }

    /// Loads `<name>.txt` for every template name from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut map = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let body = fs::read_to_string(&path)
                .map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
            map.insert(name.to_string(), body);
        }
        Self::from_map(map)
    }

    pub fn from_map(templates: BTreeMap<String, String>) -> Result<Self, PromptError> {
        for name in TEMPLATE_NAMES {
            let body = templates
                .get(name)
                .ok_or_else(|| PromptError::MissingTemplate(name.to_string()))?;
            if let Some(bad) = placeholders(body).find(|p| !PLACEHOLDERS.contains(p)) {
                return Err(PromptError::UnknownPlaceholder {
                    template: name.to_string(),
                    placeholder: bad.to_string(),
                });
            }
        }
        let mut material = String::from(TEMPLATE_SET_VERSION);
        for (name, body) in &templates {
            material.push('\0');
            material.push_str(name);
            material.push('\0');
            material.push_str(body);
        }
        Ok(Self {
            hash: sha256_hex(material),
            templates,
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.templates.get(name).map(String::as_str)
    }
}

/// Display name for a BCP-47-ish language tag, used in the `{language}` slot.
pub fn language_name(tag: &str) -> String {
    match tag.split(['-', '_']).next().unwrap_or(tag) {
        "id" | "ind" => "Indonesian".into(),
        "zh" | "zho" => "Chinese".into(),
        "en" | "eng" => "English".into(),
        "ms" | "msa" => "Malay".into(),
        _ => tag.to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct PromptKit {
    templates: TemplateSet,
    language: String,
}

impl PromptKit {
    pub fn new(templates: TemplateSet, language_tag: &str) -> Self {
        Self {
            templates,
            language: language_name(language_tag),
        }
    }

    pub fn builtin(language_tag: &str) -> Self {
        Self::new(TemplateSet::builtin(), language_tag)
    }

    pub fn template_hash(&self) -> &str {
        self.templates.hash()
    }

    /// Renders the prompt for sample `s` and instruction `t`. With a
    /// `constraint`, the constrained-regeneration variant is used and the
    /// answer schema drops the sentiment key.
    pub fn render(
        &self,
        s: &Sample,
        t: InstructionType,
        constraint: Option<Sentiment>,
    ) -> Result<PromptBundle, PromptError> {
        if t.is_main() && constraint.is_some() {
            return Err(PromptError::ConstraintOnMain(t));
        }
        let need_text = matches!(
            t,
            InstructionType::AuxText | InstructionType::MainSentiment | InstructionType::MainEmotion
        );
        let need_audio = matches!(
            t,
            InstructionType::AuxAudio | InstructionType::MainSentiment | InstructionType::MainEmotion
        );
        let need_video = matches!(
            t,
            InstructionType::AuxVisual | InstructionType::MainSentiment | InstructionType::MainEmotion
        );
        let missing = |field| PromptError::MissingField {
            sample: s.id.clone(),
            field,
            instruction: t,
        };
        if need_text && s.transcript.trim().is_empty() {
            return Err(missing("transcript"));
        }
        if need_audio && s.audio_path.is_empty() {
            return Err(missing("audio_path"));
        }
        if need_video && s.video_path.is_empty() {
            return Err(missing("video_path"));
        }

        let name = t.template_name(constraint.is_some());
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| PromptError::MissingTemplate(name.to_string()))?;
        let sentiment = constraint.map(Sentiment::as_str).unwrap_or("");
        let instruction_text = fill(template, |key| match key {
            "text" => Some(s.transcript.as_str()),
            "audio" => Some(s.audio_path.as_str()),
            "visual" => Some(s.video_path.as_str()),
            "language" => Some(self.language.as_str()),
            "sentiment" => Some(sentiment),
            _ => None,
        });

        let mut attachments = Vec::new();
        if need_audio {
            attachments.push(Attachment {
                kind: AttachmentKind::Audio,
                path: s.audio_path.clone(),
            });
        }
        if need_video {
            attachments.push(Attachment {
                kind: AttachmentKind::Video,
                path: s.video_path.clone(),
            });
        }

        let expected_schema = match (t, constraint.is_some()) {
            (InstructionType::AuxText, true) => OutputSchema::AuxTextConstrained,
            (InstructionType::AuxAudio | InstructionType::AuxVisual, true) => {
                OutputSchema::AuxMediaConstrained
            }
            _ => t.schema(),
        };

        Ok(PromptBundle {
            sample_id: s.id.clone(),
            instruction_type: t,
            instruction_text,
            attachments,
            expected_schema,
            constraint,
        })
    }
}

/// Single left-to-right pass, so substituted values are never re-expanded.
fn fill<'a>(template: &str, lookup: impl Fn(&str) -> Option<&'a str>) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let key = &after[..close];
            lookup(key).map(|v| (v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample;
    use crate::corpus::Split;

    fn kit() -> PromptKit {
        PromptKit::builtin("id")
    }

    #[test]
    fn text_prompt_embeds_transcript() {
        let mut s = sample("seg_1", "spk", Split::Train);
        s.transcript = "aku galau banget".into();
        let b = kit().render(&s, InstructionType::AuxText, None).unwrap();
        assert!(b.instruction_text.contains("Text: aku galau banget"));
        assert!(b.instruction_text.contains("of Indonesian text"));
        assert!(b.attachments.is_empty());
        assert_eq!(b.expected_schema.required_keys(), ["Sentiment", "Emotion_keywords", "Explanation"]);
    }

    #[test]
    fn visual_prompt_has_one_video() {
        let s = sample("seg_2", "spk", Split::Train);
        let b = kit().render(&s, InstructionType::AuxVisual, None).unwrap();
        assert_eq!(
            b.attachments,
            [Attachment {
                kind: AttachmentKind::Video,
                path: "video/seg_2.mp4".into()
            }]
        );
        assert_eq!(b.expected_schema.required_keys(), ["Sentiment", "Explanation"]);
        assert!(b.instruction_text.contains("facial expressions and their temporal variations"));
    }

    #[test]
    fn audio_prompt_has_one_audio_and_embeds_constraint() {
        let s = sample("seg_3", "spk", Split::Train);
        let b = kit()
            .render(&s, InstructionType::AuxAudio, Some(Sentiment::Negative))
            .unwrap();
        assert_eq!(b.attachments.len(), 1);
        assert_eq!(b.attachments[0].kind, AttachmentKind::Audio);
        assert!(b.instruction_text.contains("annotated as \"negative\""));
        assert!(b.instruction_text.contains("justifies the given sentiment label"));
        assert_eq!(b.constraint, Some(Sentiment::Negative));
        assert_eq!(b.expected_schema, OutputSchema::AuxMediaConstrained);
    }

    #[test]
    fn main_prompts_carry_everything() {
        let s = sample("seg_4", "spk", Split::Train);
        for t in [InstructionType::MainSentiment, InstructionType::MainEmotion] {
            let b = kit().render(&s, t, None).unwrap();
            let kinds: Vec<_> = b.attachments.iter().map(|a| a.kind).collect();
            assert_eq!(kinds, [AttachmentKind::Audio, AttachmentKind::Video]);
            assert!(b.instruction_text.contains(&s.transcript));
            assert_eq!(b.expected_schema, t.schema());
        }
        assert_eq!(
            kit().render(&s, InstructionType::MainEmotion, Some(Sentiment::Positive)),
            Err(PromptError::ConstraintOnMain(InstructionType::MainEmotion))
        );
    }

    #[test]
    fn missing_fields_are_errors() {
        let mut s = sample("seg_5", "spk", Split::Train);
        s.video_path.clear();
        assert!(kit().render(&s, InstructionType::AuxText, None).is_ok());
        assert!(matches!(
            kit().render(&s, InstructionType::AuxVisual, None),
            Err(PromptError::MissingField { field: "video_path", .. })
        ));
        s.transcript = " ".into();
        assert!(matches!(
            kit().render(&s, InstructionType::MainSentiment, None),
            Err(PromptError::MissingField { field: "transcript", .. })
        ));
    }

    #[test]
    fn rendering_is_deterministic_and_never_reexpands() {
        let mut s = sample("seg_6", "spk", Split::Train);
        s.transcript = "contains {audio} literally".into();
        let a = kit().render(&s, InstructionType::MainEmotion, None).unwrap();
        let b = kit().render(&s, InstructionType::MainEmotion, None).unwrap();
        assert_eq!(a, b);
        assert!(a.instruction_text.contains("contains {audio} literally"));
        // The JSON braces in the answer block survive.
        assert!(a.instruction_text.contains("{\n\"Sentiment\""));
    }

    #[test]
    fn template_hash_tracks_wording() {
        let base = TemplateSet::builtin();
        let mut map: BTreeMap<String, String> =
            TEMPLATE_NAMES.iter().map(|n| (n.to_string(), base.get(n).unwrap().to_string())).collect();
        assert_eq!(TemplateSet::from_map(map.clone()).unwrap().hash(), base.hash());
        map.get_mut("main_emotion").unwrap().push(' ');
        assert_ne!(TemplateSet::from_map(map.clone()).unwrap().hash(), base.hash());
        map.insert("aux_text".into(), "Text: {transcript}".into());
        assert!(matches!(
            TemplateSet::from_map(map),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn template_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        assert_eq!(TemplateSet::from_dir(&dir).unwrap(), TemplateSet::builtin());
    }
}
