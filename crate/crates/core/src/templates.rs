//! Prompt variants, target templates, demonstrations and the inverse parser
//! that recovers structured fields from raw model text.

use crate::corpus::{context_string, Dialogue, EmotionLabel, LabelSet};
use crate::digest::seed_from_str;
use crate::knowledge::Pronoun;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;
use thiserror::Error;

/// Plain task instruction.
pub const INS_PLAIN: &str = "Analyze emotion and respond empathetically to the provided dialogue";
/// Cause-aware task instruction.
pub const INS_CAUSE: &str = "Analysis the emotion and identify the cause from the dialogue. \
Then respond empathetically to the provided dialogue.";
pub const DEMO_PREAMBLE: &str = "I'll give you five examples.";
pub const DEMO_COUNT: usize = 5;
pub const KNOWLEDGE_LEAD: &str = "In this Dialogue,";

pub const DEFAULT_VALENCE: &str = include_str!("../data/valence.tsv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemplateError {
    #[error("prompt variant {0} requires a knowledge clause")]
    MissingKnowledge(PromptVariant),
    #[error("prompt variant {0} takes no knowledge clause")]
    UnexpectedKnowledge(PromptVariant),
    #[error("prompt variant {0} requires a demonstration block")]
    MissingDemos(PromptVariant),
    #[error("prompt variant {0} takes no demonstration block")]
    UnexpectedDemos(PromptVariant),
    #[error("target variant {variant} requires field {field}")]
    MissingField {
        variant: TargetVariant,
        field: &'static str,
    },
    #[error("target variant {variant} does not use field {field}")]
    UnexpectedField {
        variant: TargetVariant,
        field: &'static str,
    },
    #[error("need {needed} demonstration dialogues, only {available} eligible")]
    InsufficientPool { needed: usize, available: usize },
    #[error("emotion '{0}' has no valence entry")]
    UnmappedEmotion(String),
    #[error("valence map: {0}")]
    ValenceMap(String),
    #[error("unknown variant '{0}'")]
    UnknownVariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    P1,
    P2,
    P2kg,
    #[serde(rename = "P2kgE")]
    P2kgE,
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptVariant::P1 => "P1",
            PromptVariant::P2 => "P2",
            PromptVariant::P2kg => "P2kg",
            PromptVariant::P2kgE => "P2kgE",
        })
    }
}

impl FromStr for PromptVariant {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P2kg" => Ok(Self::P2kg),
            "P2kgE" => Ok(Self::P2kgE),
            other => Err(TemplateError::UnknownVariant(other.to_string())),
        }
    }
}

fn terminated(s: &str) -> String {
    if s.ends_with('.') {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// A rendered block of solved example dialogues.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoBlock {
    pub dialogue_ids: Vec<String>,
    pub rendered: String,
}

fn count_word(n: usize) -> String {
    const WORDS: [&str; 11] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    WORDS.get(n).map(|w| w.to_string()).unwrap_or_else(|| n.to_string())
}

impl DemoBlock {
    /// `I'll give you five examples. Examples: (1) <dialogue> ... (5) <dialogue>`
    /// where each dialogue is its history followed by the gold listener reply.
    pub fn render(demos: &[&Dialogue]) -> Self {
        let preamble = if demos.len() == DEMO_COUNT {
            DEMO_PREAMBLE.to_string()
        } else {
            format!("I'll give you {} examples.", count_word(demos.len()))
        };
        let body: Vec<String> = demos
            .iter()
            .enumerate()
            .map(|(i, d)| format!("({}) {}; listener: {}", i + 1, context_string(d), d.gold_response))
            .collect();
        Self {
            dialogue_ids: demos.iter().map(|d| d.id.clone()).collect(),
            rendered: format!("{preamble} Examples: {}", body.join(" ")),
        }
    }
}

/// The part of a prompt that precedes the dialogue: instruction and, when
/// present, the demonstration block.
pub fn prompt_preamble(instruction: &str, demos: Option<&DemoBlock>) -> String {
    match demos {
        Some(d) => format!("{} {}", terminated(instruction), terminated(&d.rendered)),
        None => terminated(instruction),
    }
}

/// The dialogue part of a prompt, with the knowledge clause when present.
pub fn prompt_dialogue(dialogue: &Dialogue, knowledge: Option<&str>) -> String {
    let mut s = format!("The Dialogue: {}", terminated(&context_string(dialogue)));
    if let Some(k) = knowledge {
        s.push(' ');
        s.push_str(KNOWLEDGE_LEAD);
        s.push(' ');
        s.push_str(k);
    }
    s
}

/// Free-form composition used by variants and by strategies that reuse the
/// plain instruction with demonstrations.
pub fn compose_prompt(
    instruction: &str,
    demos: Option<&DemoBlock>,
    dialogue: &Dialogue,
    knowledge: Option<&str>,
) -> String {
    format!(
        "{} {}",
        prompt_preamble(instruction, demos),
        prompt_dialogue(dialogue, knowledge)
    )
}

pub fn build_prompt(
    variant: PromptVariant,
    dialogue: &Dialogue,
    knowledge: Option<&str>,
    demos: Option<&DemoBlock>,
) -> Result<String, TemplateError> {
    let (instruction, wants_kg, wants_demos) = match variant {
        PromptVariant::P1 => (INS_PLAIN, false, false),
        PromptVariant::P2 => (INS_CAUSE, false, false),
        PromptVariant::P2kg => (INS_CAUSE, true, false),
        PromptVariant::P2kgE => (INS_CAUSE, true, true),
    };
    match (wants_kg, knowledge.is_some()) {
        (true, false) => return Err(TemplateError::MissingKnowledge(variant)),
        (false, true) => return Err(TemplateError::UnexpectedKnowledge(variant)),
        _ => {}
    }
    match (wants_demos, demos.is_some()) {
        (true, false) => return Err(TemplateError::MissingDemos(variant)),
        (false, true) => return Err(TemplateError::UnexpectedDemos(variant)),
        _ => {}
    }
    Ok(compose_prompt(instruction, demos, dialogue, knowledge))
}

/// Five distinct training dialogues other than the query, chosen uniformly
/// without replacement and listed in pool order.
pub fn sample_demonstrations(
    train: &[Dialogue],
    query_id: &str,
    seed: u64,
) -> Result<DemoBlock, TemplateError> {
    let eligible: Vec<&Dialogue> = train.iter().filter(|d| d.id != query_id).collect();
    if eligible.len() < DEMO_COUNT {
        return Err(TemplateError::InsufficientPool {
            needed: DEMO_COUNT,
            available: eligible.len(),
        });
    }
    let mut picked: Vec<usize> = if eligible.len() == DEMO_COUNT {
        (0..DEMO_COUNT).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_from_str(seed, query_id));
        rand::seq::index::sample(&mut rng, eligible.len(), DEMO_COUNT).into_vec()
    };
    picked.sort_unstable();
    let chosen: Vec<&Dialogue> = picked.into_iter().map(|i| eligible[i]).collect();
    Ok(DemoBlock::render(&chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ListenerEmotion {
    Glad,
    Sorry,
}

impl ListenerEmotion {
    pub fn as_str(self) -> &'static str {
        match self {
            ListenerEmotion::Glad => "glad",
            ListenerEmotion::Sorry => "sorry",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Reassurance,
    Sympathize,
}

impl Intent {
    /// Surface form after "I will": the verb by default, the bare intent
    /// label in literal mode.
    fn surface(self, literal: bool) -> &'static str {
        match (self, literal) {
            (Intent::Reassurance, false) => "reassure",
            (Intent::Reassurance, true) => "reassurance",
            (Intent::Sympathize, false) => "sympathize with",
            (Intent::Sympathize, true) => "sympathize",
        }
    }
}

/// Emotion label → valence, loaded from a two-column text file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceMap {
    entries: BTreeMap<String, Valence>,
}

impl ValenceMap {
    /// `label<TAB or spaces>positive|negative` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [label, valence] = cols[..] else {
                return Err(TemplateError::ValenceMap(format!(
                    "line {}: expected two columns",
                    i + 1
                )));
            };
            let v = match valence {
                "positive" => Valence::Positive,
                "negative" => Valence::Negative,
                other => {
                    return Err(TemplateError::ValenceMap(format!(
                        "line {}: unknown valence '{other}'",
                        i + 1
                    )))
                }
            };
            if entries.insert(label.to_lowercase(), v).is_some() {
                return Err(TemplateError::ValenceMap(format!(
                    "line {}: duplicate label '{label}'",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TemplateError::ValenceMap(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks the map covers every label of `labels`.
    pub fn check_total(&self, labels: &LabelSet) -> Result<(), TemplateError> {
        match labels.iter().find(|l| !self.entries.contains_key(l.as_str())) {
            Some(l) => Err(TemplateError::UnmappedEmotion(l.to_string())),
            None => Ok(()),
        }
    }

    pub fn valence(&self, emotion: &str) -> Option<Valence> {
        self.entries.get(&emotion.trim().to_lowercase()).copied()
    }
}

impl Default for ValenceMap {
    fn default() -> Self {
        Self::parse(DEFAULT_VALENCE).expect("bundled valence map is valid")
    }
}

/// Listener reaction and conversational intent, both fixed by valence.
pub fn listener_fields(
    emotion: &EmotionLabel,
    vmap: &ValenceMap,
) -> Result<(ListenerEmotion, Intent), TemplateError> {
    match vmap.valence(emotion.as_str()) {
        Some(Valence::Positive) => Ok((ListenerEmotion::Glad, Intent::Sympathize)),
        Some(Valence::Negative) => Ok((ListenerEmotion::Sorry, Intent::Reassurance)),
        None => Err(TemplateError::UnmappedEmotion(emotion.to_string())),
    }
}

/// Output templates. `T1`..`T5` are the emotion/cause orderings compared
/// as listener-aware targets; `T5` renders identically to `R2la`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetVariant {
    R1,
    R2,
    #[serde(rename = "R2la")]
    R2la,
    T1,
    T2,
    T3,
    T4,
    T5,
}

impl TargetVariant {
    pub const ALL: [TargetVariant; 8] = [
        TargetVariant::R1,
        TargetVariant::R2,
        TargetVariant::R2la,
        TargetVariant::T1,
        TargetVariant::T2,
        TargetVariant::T3,
        TargetVariant::T4,
        TargetVariant::T5,
    ];

    pub fn needs_cause(self) -> bool {
        self != TargetVariant::R1
    }

    pub fn listener_aware(self) -> bool {
        !matches!(self, TargetVariant::R1 | TargetVariant::R2)
    }
}

impl fmt::Display for TargetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string tag"))
    }
}

impl FromStr for TargetVariant {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TargetVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| TemplateError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    pub subject: Pronoun,
    /// Emit the bare intent label ("I will reassurance him") instead of the
    /// verb form.
    pub literal: bool,
}

/// Inputs to a target rendering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetFields {
    pub emotion: EmotionLabel,
    pub cause_text: Option<String>,
    pub listener: Option<(ListenerEmotion, Intent)>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRecord {
    pub variant: TargetVariant,
    pub emotion: EmotionLabel,
    pub cause_text: Option<String>,
    pub listener_emotion: Option<ListenerEmotion>,
    pub intent: Option<Intent>,
    pub response: String,
    pub rendered: String,
}

fn ends_sentence(s: &str) -> bool {
    s.ends_with(['.', '!', '?'])
}

/// `"cause"` with a closing period unless the cause already ends a sentence.
fn quoted_sentence(cause: &str) -> String {
    if ends_sentence(cause) {
        format!("\"{cause}\"")
    } else {
        format!("\"{cause}\".")
    }
}

pub fn render_target(
    variant: TargetVariant,
    fields: &TargetFields,
    opts: RenderOptions,
) -> Result<TargetRecord, TemplateError> {
    let cause = match (variant.needs_cause(), &fields.cause_text) {
        (true, Some(c)) => Some(c.as_str()),
        (true, None) => {
            return Err(TemplateError::MissingField {
                variant,
                field: "cause_text",
            })
        }
        (false, Some(_)) => {
            return Err(TemplateError::UnexpectedField {
                variant,
                field: "cause_text",
            })
        }
        (false, None) => None,
    };
    let listener = match (variant.listener_aware(), fields.listener) {
        (true, Some(l)) => Some(l),
        (true, None) => {
            return Err(TemplateError::MissingField {
                variant,
                field: "listener_emotion/intent",
            })
        }
        (false, Some(_)) => {
            return Err(TemplateError::UnexpectedField {
                variant,
                field: "listener_emotion/intent",
            })
        }
        (false, None) => None,
    };

    let p = opts.subject;
    let (subj, subj_l, obj) = (p.subject(), p.subject_lower(), p.object());
    let (feels, says) = (p.verb("feel"), p.verb("say"));
    let emo = fields.emotion.as_str();
    let cau = cause.unwrap_or_default();

    let head = match variant {
        TargetVariant::R1 => format!("{subj} {feels} {emo}."),
        TargetVariant::R2 | TargetVariant::R2la | TargetVariant::T5 => {
            format!("{subj} {feels} {emo} because {subj_l} {says} {}", quoted_sentence(cau))
        }
        TargetVariant::T1 => format!("Emotion: {emo} Cause: {}", quoted_sentence(cau)),
        TargetVariant::T2 => format!("{subj} {says} \"{cau}\" and {subj_l} {feels} {emo}."),
        TargetVariant::T3 => format!("\"{cau}\" makes {obj} feel {emo}."),
        TargetVariant::T4 => format!("{subj} {feels} {emo} upon saying {}", quoted_sentence(cau)),
    };
    let tail = match listener {
        Some((le, intent)) => format!(
            "I'm {} to hear that. I will {} {obj}: {}",
            le.as_str(),
            intent.surface(opts.literal),
            fields.response
        ),
        None => format!("I will reply {obj}: {}", fields.response),
    };
    Ok(TargetRecord {
        variant,
        emotion: fields.emotion.clone(),
        cause_text: cause.map(str::to_string),
        listener_emotion: listener.map(|l| l.0),
        intent: listener.map(|l| l.1),
        response: fields.response.clone(),
        rendered: format!("{head} {tail}"),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub emotion: Option<String>,
    pub cause_text: Option<String>,
    pub listener_emotion: Option<ListenerEmotion>,
    pub intent: Option<Intent>,
    pub response: String,
    pub parse_ok: bool,
}

impl ParsedResponse {
    pub fn unparsed(raw: &str) -> Self {
        Self {
            emotion: None,
            cause_text: None,
            listener_emotion: None,
            intent: None,
            response: raw.to_string(),
            parse_ok: false,
        }
    }
}

const PREFIX: &str = r"^\s*(?:SYS\s*:\s*)?";
const SUBJ: &str = r"(?:He|She|They|A|The speaker)";
const SUBJ_L: &str = r"(?:he|she|they|He|She|They)";
const OBJ: &str = r"(?:him|her|them)";
const CAUSE_SENTENCE: &str = r#"(?:"(?P<cause>.*)"\.?|(?P<cause_bare>.+?)\.?)"#;
const CAUSE_INLINE: &str = r#"(?:"(?P<cause>.*)"|(?P<cause_bare>.+?))"#;

fn listener_clause() -> String {
    format!(
        r"\s*(?:I'm|I am|I feel so|I feel)\s+(?P<le>glad|sorry)\s+to hear that\.\s*(?:Therefore,\s*)?I will\s+(?P<intent>reassurance|reassure|sympathize with|sympathize)\s+{OBJ}\s*:(?P<resp>.*)$"
    )
}

fn reply_clause() -> String {
    format!(r"\s*I will reply\s+{OBJ}\s*:(?P<resp>.*)$")
}

fn pattern(variant: TargetVariant) -> String {
    let la = listener_clause();
    let reply = reply_clause();
    let body = match variant {
        TargetVariant::R1 => format!(r"{SUBJ}\s+feels?\s+(?P<emo>.+?)\.{reply}"),
        TargetVariant::R2 => {
            format!(r"{SUBJ}\s+feels?\s+(?P<emo>.+?)\s+because\s+{SUBJ_L}\s+says?\s+{CAUSE_SENTENCE}{reply}")
        }
        TargetVariant::R2la | TargetVariant::T5 => {
            format!(r"{SUBJ}\s+feels?\s+(?P<emo>.+?)\s+because\s+{SUBJ_L}\s+says?\s+{CAUSE_SENTENCE}{la}")
        }
        TargetVariant::T1 => format!(r"Emotion:\s*(?P<emo>.+?)\s+Cause:\s*{CAUSE_SENTENCE}{la}"),
        TargetVariant::T2 => {
            format!(r"{SUBJ}\s+says?\s+{CAUSE_INLINE}\s+and\s+{SUBJ_L}\s+feels?\s+(?P<emo>.+?)\.{la}")
        }
        TargetVariant::T3 => format!(r"{CAUSE_INLINE}\s+makes\s+{OBJ}\s+feel\s+(?P<emo>.+?)\.{la}"),
        TargetVariant::T4 => {
            format!(r"{SUBJ}\s+feels?\s+(?P<emo>.+?)\s+upon saying\s+{CAUSE_SENTENCE}{la}")
        }
    };
    format!("(?s){PREFIX}{body}")
}

fn regexes() -> &'static HashMap<TargetVariant, Regex> {
    static CELL: OnceLock<HashMap<TargetVariant, Regex>> = OnceLock::new();
    CELL.get_or_init(|| {
        TargetVariant::ALL
            .into_iter()
            .map(|v| (v, Regex::new(&pattern(v)).expect("template pattern compiles")))
            .collect()
    })
}

/// Recovers template fields from raw model output. Never fails: when the
/// text does not follow the variant's template, `parse_ok` is false and the
/// raw text is returned as the response.
pub fn parse_response(raw: &str, variant: TargetVariant) -> ParsedResponse {
    let Some(caps) = regexes()[&variant].captures(raw) else {
        return ParsedResponse::unparsed(raw);
    };
    let response = caps
        .name("resp")
        .map(|m| m.as_str().trim())
        .unwrap_or_default();
    if response.is_empty() {
        return ParsedResponse::unparsed(raw);
    }
    let cause_text = caps
        .name("cause")
        .or_else(|| caps.name("cause_bare"))
        .map(|m| m.as_str().to_string());
    let listener_emotion = caps.name("le").map(|m| match m.as_str() {
        "glad" => ListenerEmotion::Glad,
        _ => ListenerEmotion::Sorry,
    });
    let intent = caps.name("intent").map(|m| {
        if m.as_str().starts_with("reassur") {
            Intent::Reassurance
        } else {
            Intent::Sympathize
        }
    });
    ParsedResponse {
        emotion: caps.name("emo").map(|m| m.as_str().trim().to_string()),
        cause_text,
        listener_emotion,
        intent,
        response: response.to_string(),
        parse_ok: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::dialogue;

    fn label(s: &str) -> EmotionLabel {
        LabelSet::default().label(s).unwrap()
    }

    const HAIR_SYS: &str = "SYS:A feels embarrassed because he says \"I burned my hair with my hair dryer.\" \
I feel so sorry to hear that. Therefore, I will reassure him: I understand how you feel, but remember \
it's just temporary.Your hair will grow back.Perhaps get a haircut to fix it.";

    fn hair_dialogue() -> Dialogue {
        dialogue(
            "t3",
            "embarrassed",
            &[
                "I burned my hair with my hair dryer. I am so embarrassed to go out.",
                "I am sorry to hear that, my wife has done the same thing. She wore a hat for almost a month when she left the house.",
                "Yeah, it is the worst, I look so weird with my hair like this, it is so embarrassing.",
            ],
            "Well, like I told her, it will grow out, it will just take time.",
        )
    }

    fn pool(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| dialogue(&format!("p{i:03}"), "sad", &[&format!("turn {i}")], &format!("reply {i}")))
            .collect()
    }

    #[test]
    fn p1_single_turn() {
        let d = dialogue("a", "sad", &["hi"], "oh");
        assert_eq!(
            build_prompt(PromptVariant::P1, &d, None, None).unwrap(),
            "Analyze emotion and respond empathetically to the provided dialogue. The Dialogue: speaker: hi."
        );
    }

    #[test]
    fn dialogue_period_not_doubled() {
        let d = dialogue("a", "sad", &["I lost it."], "oh");
        let p = build_prompt(PromptVariant::P1, &d, None, None).unwrap();
        assert!(p.ends_with("speaker: I lost it."), "{p}");
    }

    #[test]
    fn p2_uses_cause_instruction_once_terminated() {
        let d = dialogue("a", "sad", &["hi"], "oh");
        assert_eq!(
            build_prompt(PromptVariant::P2, &d, None, None).unwrap(),
            "Analysis the emotion and identify the cause from the dialogue. Then respond \
             empathetically to the provided dialogue. The Dialogue: speaker: hi."
        );
    }

    #[test]
    fn p2kg_knowledge_splice() {
        let kg = "He tends to look nice; He needs to have a haircut; He wants to fix his hair; \
                  The effect is that he ends up burning his hair; He feels embarrassed.";
        let p = build_prompt(PromptVariant::P2kg, &hair_dialogue(), Some(kg), None).unwrap();
        assert!(p.contains("In this Dialogue, He tends to look nice;"));
        assert!(p.ends_with("He feels embarrassed."));
    }

    #[test]
    fn p2kge_demo_position() {
        let train = pool(10);
        let demos = sample_demonstrations(&train, "t3", 1).unwrap();
        let d = hair_dialogue();
        let p = build_prompt(PromptVariant::P2kgE, &d, Some("K."), Some(&demos)).unwrap();
        assert_eq!(p.matches(DEMO_PREAMBLE).count(), 1);
        let pre = p.find(DEMO_PREAMBLE).unwrap();
        assert!(pre >= INS_CAUSE.len());
        assert!(pre < p.find("The Dialogue:").unwrap());
        let without = build_prompt(PromptVariant::P2kg, &d, Some("K."), None).unwrap();
        let spliced = format!("{} {}", terminated(&demos.rendered), "");
        assert_eq!(p.replacen(&spliced, "", 1), without);
    }

    #[test]
    fn prompt_preconditions() {
        let d = dialogue("a", "sad", &["hi"], "oh");
        let demos = sample_demonstrations(&pool(6), "a", 0).unwrap();
        assert_eq!(
            build_prompt(PromptVariant::P1, &d, Some("k"), None),
            Err(TemplateError::UnexpectedKnowledge(PromptVariant::P1))
        );
        assert_eq!(
            build_prompt(PromptVariant::P2, &d, None, Some(&demos)),
            Err(TemplateError::UnexpectedDemos(PromptVariant::P2))
        );
        assert_eq!(
            build_prompt(PromptVariant::P2kg, &d, None, None),
            Err(TemplateError::MissingKnowledge(PromptVariant::P2kg))
        );
        assert_eq!(
            build_prompt(PromptVariant::P2kgE, &d, Some("k"), None),
            Err(TemplateError::MissingDemos(PromptVariant::P2kgE))
        );
    }

    #[test]
    fn forced_demo_selection_keeps_pool_order() {
        let mut train = pool(5);
        train.push(dialogue("q", "sad", &["query"], "r"));
        let block = sample_demonstrations(&train, "q", 99).unwrap();
        assert_eq!(block.dialogue_ids, ["p000", "p001", "p002", "p003", "p004"]);
        assert!(block.rendered.starts_with("I'll give you five examples. Examples: (1) speaker: turn 0; listener: reply 0"));
    }

    #[test]
    fn demos_exclude_query_and_are_deterministic() {
        let train = pool(30);
        let a = sample_demonstrations(&train, "p007", 5).unwrap();
        assert_eq!(a, sample_demonstrations(&train, "p007", 5).unwrap());
        assert!(!a.dialogue_ids.contains(&"p007".to_string()));
        let mut ids = a.dialogue_ids.clone();
        ids.dedup();
        assert_eq!(ids.len(), 5);
        assert!(matches!(
            sample_demonstrations(&pool(5), "p000", 0),
            Err(TemplateError::InsufficientPool { needed: 5, available: 4 })
        ));
    }

    #[test]
    fn demo_sampling_is_uniform() {
        let train = pool(100);
        let trials = 1000;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seed in 0..trials {
            for id in sample_demonstrations(&train, "query", seed).unwrap().dialogue_ids {
                *counts.entry(id).or_default() += 1;
            }
        }
        let p = 5.0 / 100.0;
        let mean = trials as f64 * p;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for d in &train {
            let c = *counts.get(&d.id).unwrap_or(&0) as f64;
            assert!((c - mean).abs() <= 3.0 * sigma, "{} sampled {c} times", d.id);
        }
    }

    #[test]
    fn listener_fields_by_valence() {
        let v = ValenceMap::default();
        assert_eq!(
            listener_fields(&label("embarrassed"), &v).unwrap(),
            (ListenerEmotion::Sorry, Intent::Reassurance)
        );
        assert_eq!(
            listener_fields(&label("confident"), &v).unwrap(),
            (ListenerEmotion::Glad, Intent::Sympathize)
        );
        assert_eq!(
            listener_fields(&label("angry"), &v).unwrap(),
            (ListenerEmotion::Sorry, Intent::Reassurance)
        );
        let labels = LabelSet::default();
        v.check_total(&labels).unwrap();
        for a in labels.iter() {
            for b in labels.iter() {
                if v.valence(a.as_str()) == v.valence(b.as_str()) {
                    assert_eq!(listener_fields(&a, &v), listener_fields(&b, &v));
                }
            }
            let (le, intent) = listener_fields(&a, &v).unwrap();
            assert_eq!(le == ListenerEmotion::Glad, intent == Intent::Sympathize);
        }
    }

    #[test]
    fn valence_map_errors() {
        let partial = ValenceMap::parse("sad negative\n").unwrap();
        assert!(matches!(
            partial.check_total(&LabelSet::default()),
            Err(TemplateError::UnmappedEmotion(_))
        ));
        assert!(listener_fields(&label("joyful"), &partial).is_err());
        assert!(ValenceMap::parse("sad meh\n").is_err());
        assert!(ValenceMap::parse("sad negative extra\n").is_err());
        assert!(ValenceMap::parse("sad negative\nsad positive\n").is_err());
    }

    fn fields(emo: &str, cause: Option<&str>, la: bool, resp: &str) -> TargetFields {
        TargetFields {
            emotion: label(emo),
            cause_text: cause.map(String::from),
            listener: la.then_some((ListenerEmotion::Sorry, Intent::Reassurance)),
            response: resp.into(),
        }
    }

    #[test]
    fn r2la_literal_rendering() {
        let f = fields("embarrassed", Some("I burned my hair with my hair dryer."), true, "X");
        let lit = RenderOptions {
            literal: true,
            ..Default::default()
        };
        assert_eq!(
            render_target(TargetVariant::R2la, &f, lit).unwrap().rendered,
            "He feels embarrassed because he says \"I burned my hair with my hair dryer.\" \
             I'm sorry to hear that. I will reassurance him: X"
        );
        assert_eq!(
            render_target(TargetVariant::R2la, &f, RenderOptions::default())
                .unwrap()
                .rendered,
            "He feels embarrassed because he says \"I burned my hair with my hair dryer.\" \
             I'm sorry to hear that. I will reassure him: X"
        );
    }

    #[test]
    fn r1_rendering() {
        let f = fields("sad", None, false, "ok");
        assert_eq!(
            render_target(TargetVariant::R1, &f, RenderOptions::default())
                .unwrap()
                .rendered,
            "He feels sad. I will reply him: ok"
        );
    }

    #[test]
    fn template_rows_render_distinctly() {
        let f = fields("sad", Some("we broke up"), true, "hang in there");
        let o = RenderOptions::default();
        let r = |v| render_target(v, &f, o).unwrap().rendered;
        assert_eq!(r(TargetVariant::T1), "Emotion: sad Cause: \"we broke up\". I'm sorry to hear that. I will reassure him: hang in there");
        assert_eq!(r(TargetVariant::T2), "He says \"we broke up\" and he feels sad. I'm sorry to hear that. I will reassure him: hang in there");
        assert_eq!(r(TargetVariant::T3), "\"we broke up\" makes him feel sad. I'm sorry to hear that. I will reassure him: hang in there");
        assert_eq!(r(TargetVariant::T4), "He feels sad upon saying \"we broke up\". I'm sorry to hear that. I will reassure him: hang in there");
        assert_eq!(r(TargetVariant::T5), r(TargetVariant::R2la));
        let rows: Vec<_> = [TargetVariant::T1, TargetVariant::T2, TargetVariant::T3, TargetVariant::T4, TargetVariant::T5]
            .into_iter()
            .map(r)
            .collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                assert_ne!(rows[i], rows[j]);
            }
        }
    }

    #[test]
    fn render_field_checks() {
        let o = RenderOptions::default();
        assert!(matches!(
            render_target(TargetVariant::R2, &fields("sad", None, false, "x"), o),
            Err(TemplateError::MissingField { field: "cause_text", .. })
        ));
        assert!(matches!(
            render_target(TargetVariant::R2la, &fields("sad", Some("c"), false, "x"), o),
            Err(TemplateError::MissingField { .. })
        ));
        assert!(matches!(
            render_target(TargetVariant::R1, &fields("sad", Some("c"), false, "x"), o),
            Err(TemplateError::UnexpectedField { .. })
        ));
        assert!(matches!(
            render_target(TargetVariant::R2, &fields("sad", Some("c"), true, "x"), o),
            Err(TemplateError::UnexpectedField { .. })
        ));
    }

    #[test]
    fn parses_hair_system_line() {
        let p = parse_response(HAIR_SYS, TargetVariant::R2la);
        assert!(p.parse_ok);
        assert_eq!(p.emotion.as_deref(), Some("embarrassed"));
        assert_eq!(p.cause_text.as_deref(), Some("I burned my hair with my hair dryer."));
        assert_eq!(p.listener_emotion, Some(ListenerEmotion::Sorry));
        assert_eq!(p.intent, Some(Intent::Reassurance));
        assert!(p.response.starts_with("I understand how you feel"));
    }

    #[test]
    fn parses_positive_wedding_line() {
        let raw = "SYS:A feels confident because he says \"when I got married and I had my hair and \
                   makeup done I felt like I was beautiful!  I had so much confidence\" I feel so glad \
                   to hear that. Therefore, I will sympathize him: Your wedding day sounds like a dream.";
        let p = parse_response(raw, TargetVariant::R2la);
        assert!(p.parse_ok);
        assert_eq!(p.emotion.as_deref(), Some("confident"));
        assert_eq!(p.intent, Some(Intent::Sympathize));
        assert_eq!(p.listener_emotion, Some(ListenerEmotion::Glad));
        assert!(p.cause_text.unwrap().ends_with("so much confidence"));
    }

    #[test]
    fn unquoted_cause_accepted() {
        let p = parse_response(
            "He feels sad because he says we broke up. I will reply him: sorry",
            TargetVariant::R2,
        );
        assert!(p.parse_ok);
        assert_eq!(p.cause_text.as_deref(), Some("we broke up"));
    }

    #[test]
    fn unparseable_text_passes_through() {
        let p = parse_response("hello", TargetVariant::R2);
        assert!(!p.parse_ok);
        assert_eq!(p.response, "hello");
        let p = parse_response("He feels sad. I will reply him:   ", TargetVariant::R1);
        assert!(!p.parse_ok);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in TargetVariant::ALL {
            assert_eq!(v.to_string().parse::<TargetVariant>().unwrap(), v);
        }
        assert_eq!(TargetVariant::R2la.to_string(), "R2la");
        assert_eq!("P2kgE".parse::<PromptVariant>().unwrap(), PromptVariant::P2kgE);
    }

    mod round_trip {
        use super::*;
        use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
        use proptest::strategy::Strategy as _;

        fn words(max: usize) -> impl proptest::strategy::Strategy<Value = String> {
            prop::collection::vec("[a-zA-Z']{1,8}", 1..max).prop_map(|w| w.join(" "))
        }

        proptest! {
            #[test]
            fn parse_inverts_render(
                vi in 0usize..8,
                li in 0usize..32,
                cause in words(8),
                punct in prop::sample::select(vec!["", ".", "!", "?"]),
                response in words(14),
                glad in any::<bool>(),
                pi in 0usize..3,
                literal in any::<bool>(),
            ) {
                let variant = TargetVariant::ALL[vi];
                let emotion = LabelSet::default().iter().nth(li).unwrap();
                let fields = TargetFields {
                    emotion: emotion.clone(),
                    cause_text: variant.needs_cause().then(|| format!("{cause}{punct}")),
                    listener: variant.listener_aware().then_some(if glad {
                        (ListenerEmotion::Glad, Intent::Sympathize)
                    } else {
                        (ListenerEmotion::Sorry, Intent::Reassurance)
                    }),
                    response: response.clone(),
                };
                let subject = [Pronoun::He, Pronoun::She, Pronoun::They][pi];
                let rec = render_target(variant, &fields, RenderOptions { subject, literal }).unwrap();
                let p = parse_response(&rec.rendered, variant);
                prop_assert!(p.parse_ok, "{}", rec.rendered);
                prop_assert_eq!(p.emotion.as_deref(), Some(emotion.as_str()));
                prop_assert_eq!(p.cause_text, fields.cause_text);
                prop_assert_eq!(p.listener_emotion, fields.listener.map(|l| l.0));
                prop_assert_eq!(p.intent, fields.listener.map(|l| l.1));
                prop_assert_eq!(p.response, response);
            }
        }
    }
}
