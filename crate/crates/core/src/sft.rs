//! Instruction-tuning pairs for an external trainer.

use crate::cause::CauseSpan;
use crate::corpus::Dialogue;
use crate::digest::sha256_hex;
use crate::knowledge::{verbalize, KnowledgeRecord};
use crate::templates::{
    listener_fields, parse_response, prompt_dialogue, prompt_preamble, render_target,
    sample_demonstrations, PromptVariant, RenderOptions, TargetFields, TargetVariant,
    TemplateError, ValenceMap, INS_CAUSE,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SFT_RECORDS: &str = "sft.jsonl";
pub const SFT_MANIFEST: &str = "sft_manifest.json";

#[derive(Debug, Error)]
pub enum SftError {
    #[error("missing cause spans for: {0:?}")]
    MissingCauses(Vec<String>),
    #[error("missing knowledge bundles for: {0:?}")]
    MissingKnowledge(Vec<String>),
    #[error("{id}: {source}")]
    Template {
        id: String,
        #[source]
        source: TemplateError,
    },
    #[error("{id}: field '{field}' contains a newline")]
    Newline { id: String, field: &'static str },
    #[error("{id}: rendered target does not parse back")]
    Unparseable { id: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub dialogue_id: String,
    pub prompt_variant: PromptVariant,
    pub target_variant: TargetVariant,
    pub seed: u64,
}

/// `instruction + " " + input` is the full P2kgE prompt; `output` is the
/// R2la target for the gold fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: SftMeta,
}

/// Recorded for the trainer; nothing here is executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSettings {
    pub learning_rate: f64,
    pub lora_rank: u32,
    pub batch_size: u32,
    pub objective: String,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            lora_rank: 8,
            batch_size: 4,
            objective: "token-level negative log-likelihood of output given instruction + input"
                .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftManifest {
    pub count: usize,
    pub seed: u64,
    pub prompt_variant: PromptVariant,
    pub target_variant: TargetVariant,
    pub sha256: String,
    /// Relative to the manifest's directory.
    pub records_path: PathBuf,
    pub trainer: TrainerSettings,
}

/// Builds one example per dialogue of `split`. Demonstrations are drawn
/// from `split` itself, excluding the query.
pub fn build_sft_examples(
    split: &[Dialogue],
    causes: &HashMap<String, CauseSpan>,
    knowledge: &HashMap<String, KnowledgeRecord>,
    vmap: &ValenceMap,
    opts: RenderOptions,
    seed: u64,
) -> Result<Vec<SftExample>, SftError> {
    let missing = |has: &dyn Fn(&str) -> bool| -> Vec<String> {
        split.iter().filter(|d| !has(&d.id)).map(|d| d.id.clone()).collect()
    };
    let no_cause = missing(&|id| causes.contains_key(id));
    if !no_cause.is_empty() {
        return Err(SftError::MissingCauses(no_cause));
    }
    let no_kg = missing(&|id| knowledge.contains_key(id));
    if !no_kg.is_empty() {
        return Err(SftError::MissingKnowledge(no_kg));
    }

    split
        .iter()
        .map(|d| {
            let tmpl = |source| SftError::Template {
                id: d.id.clone(),
                source,
            };
            let demos = sample_demonstrations(split, &d.id, seed).map_err(tmpl)?;
            let kg = verbalize(&knowledge[&d.id].cause_oriented, opts.subject);
            let fields = TargetFields {
                emotion: d.emotion.clone(),
                cause_text: Some(causes[&d.id].text.clone()),
                listener: Some(listener_fields(&d.emotion, vmap).map_err(tmpl)?),
                response: d.gold_response.clone(),
            };
            let target = render_target(TargetVariant::R2la, &fields, opts).map_err(tmpl)?;
            let ex = SftExample {
                instruction: prompt_preamble(INS_CAUSE, Some(&demos)),
                input: prompt_dialogue(d, Some(&kg)),
                output: target.rendered,
                meta: SftMeta {
                    dialogue_id: d.id.clone(),
                    prompt_variant: PromptVariant::P2kgE,
                    target_variant: TargetVariant::R2la,
                    seed,
                },
            };
            for (field, text) in [
                ("instruction", &ex.instruction),
                ("input", &ex.input),
                ("output", &ex.output),
            ] {
                if text.contains(['\n', '\r']) {
                    return Err(SftError::Newline {
                        id: d.id.clone(),
                        field,
                    });
                }
            }
            if !parse_response(&ex.output, TargetVariant::R2la).parse_ok {
                return Err(SftError::Unparseable { id: d.id.clone() });
            }
            Ok(ex)
        })
        .collect()
}

/// Writes [`SFT_RECORDS`] and [`SFT_MANIFEST`] into `dir`.
pub fn export_sft(
    split: &[Dialogue],
    causes: &HashMap<String, CauseSpan>,
    knowledge: &HashMap<String, KnowledgeRecord>,
    vmap: &ValenceMap,
    opts: RenderOptions,
    seed: u64,
    dir: &Path,
) -> Result<SftManifest, SftError> {
    let examples = build_sft_examples(split, causes, knowledge, vmap, opts, seed)?;
    let body = crate::jsonl::to_string(&examples).map_err(std::io::Error::other)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(SFT_RECORDS), &body)?;
    let manifest = SftManifest {
        count: examples.len(),
        seed,
        prompt_variant: PromptVariant::P2kgE,
        target_variant: TargetVariant::R2la,
        sha256: sha256_hex(&body),
        records_path: PathBuf::from(SFT_RECORDS),
        trainer: TrainerSettings::default(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
    std::fs::write(dir.join(SFT_MANIFEST), json + "\n")?;
    Ok(manifest)
}
