//! Pipeline toolkit for instruction-tuned multimodal emotion recognition:
//! corpus manifests, annotation aggregation, prompt rendering, model output
//! parsing, a chat-completion gateway, consistency-checked auxiliary
//! supervision, instruction scheduling and evaluation.

pub mod annotate;
pub mod artifact;
pub mod auxforge;
pub mod cli;
pub mod corpus;
pub mod evalkit;
pub mod labels;
pub mod modelgw;
pub mod outparse;
pub mod promptkit;
pub mod scheduler;

pub use labels::{Emotion, Modality, Pred, Sentiment};
