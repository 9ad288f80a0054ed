//! Cause-aware chain-of-thought empathetic response generation pipeline.
//!
//! The crate covers every stage between a raw empathetic-dialogue corpus and
//! a comparison report:
//!
//! - [`corpus`]: canonical dialogue model, importers, deterministic splits.
//! - [`cause`]: emotion-cause spans from a pluggable extraction backend, span F1.
//! - [`knowledge`]: five-relation commonsense inferences and their verbalization.
//! - [`templates`]: prompt variants, target templates, demonstrations, parsing.
//! - [`sft`]: instruction-tuning pairs for an external trainer.
//! - [`orchestrator`]: batch inference for each comparison strategy.
//! - [`metrics`]: accuracy, Distinct-n, BLEU, perplexity and report tables.
//!
//! Backends (cause extraction, commonsense, chat model) are traits with an
//! HTTP client and a fixture implementation each; see [`backend`].

pub mod backend;
pub mod cause;
pub mod chat;
pub mod corpus;
pub mod digest;
pub mod jsonl;
pub mod knowledge;
pub mod metrics;
pub mod orchestrator;
pub mod par;
pub mod sft;
pub mod templates;

pub use backend::BackendError;
pub use corpus::{Dialogue, EmotionLabel, LabelSet, Role, Split, Utterance};
