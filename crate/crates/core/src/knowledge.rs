//! Five-relation commonsense inferences and their natural-language
//! verbalization for the knowledge clause of prompts.

use crate::backend::{BackendError, JsonClient, RetryPolicy};
use crate::cause::CauseSpan;
use crate::corpus::{normalize_text, Dialogue};
use crate::par;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KnowledgeError {
    #[error("knowledge backend failed on {relation} for '{head}': {source}")]
    Backend {
        head: String,
        relation: Relation,
        #[source]
        source: BackendError,
    },
    #[error("knowledge backend returned no usable tail for relation {0}")]
    MissingRelation(Relation),
    #[error("knowledge source text is empty")]
    EmptySource,
    #[error("cause-oriented knowledge needs a cause span for '{0}'")]
    MissingCause(String),
    #[error("unknown subject pronoun '{0}' (expected He, She or They)")]
    UnknownSubject(String),
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
    #[error("knowledge fixture error: {0}")]
    Fixture(String),
}

impl KnowledgeError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, KnowledgeError::Backend { source, .. } if source.is_retryable())
    }
}

/// Declaration order is the verbalization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xReact")]
    XReact,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::XIntent,
        Relation::XNeed,
        Relation::XWant,
        Relation::XEffect,
        Relation::XReact,
    ];

    /// Wire name understood by COMET-style backends.
    pub fn wire_name(self) -> &'static str {
        match self {
            Relation::XIntent => "xIntent",
            Relation::XNeed => "xNeed",
            Relation::XWant => "xWant",
            Relation::XEffect => "xEffect",
            Relation::XReact => "xReact",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for Relation {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL
            .into_iter()
            .find(|r| r.wire_name() == s)
            .ok_or_else(|| KnowledgeError::UnknownRelation(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeMode {
    /// Head event is the emotion-cause span.
    CauseOriented,
    /// Head event is the final speaker utterance.
    LastUtterance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonsenseBundle {
    pub source_text: String,
    pub mode: KnowledgeMode,
    pub inferences: BTreeMap<Relation, String>,
}

impl CommonsenseBundle {
    pub fn new(
        source_text: impl Into<String>,
        mode: KnowledgeMode,
        inferences: BTreeMap<Relation, String>,
    ) -> Result<Self, KnowledgeError> {
        for r in Relation::ALL {
            match inferences.get(&r) {
                Some(t) if !t.trim().is_empty() => {}
                _ => return Err(KnowledgeError::MissingRelation(r)),
            }
        }
        Ok(Self {
            source_text: source_text.into(),
            mode,
            inferences,
        })
    }

    pub fn tail(&self, relation: Relation) -> &str {
        &self.inferences[&relation]
    }
}

/// Head text for a mode: the cause span, or the final speaker turn.
pub fn knowledge_source(
    dialogue: &Dialogue,
    mode: KnowledgeMode,
    cause: Option<&CauseSpan>,
) -> Result<String, KnowledgeError> {
    match mode {
        KnowledgeMode::CauseOriented => cause
            .map(|c| c.text.clone())
            .ok_or_else(|| KnowledgeError::MissingCause(dialogue.id.clone())),
        KnowledgeMode::LastUtterance => Ok(dialogue.last_speaker_utterance().text.clone()),
    }
}

pub trait KnowledgeBackend: Send + Sync {
    fn describe(&self) -> String;
    /// Ranked tails for `(head, relation)`, best first.
    fn infer(&self, head: &str, relation: Relation, k: usize) -> Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeRequest {
    pub head: String,
    pub relation: Relation,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeResponse {
    pub tails: Vec<String>,
}

/// HTTP backend: POST `{"head", "relation", "k"}`, answer `{"tails": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpKnowledgeBackend {
    url: String,
    client: JsonClient,
}

impl HttpKnowledgeBackend {
    pub fn new(url: impl Into<String>, timeout: Duration, bearer: Option<String>) -> Self {
        Self {
            url: url.into(),
            client: JsonClient::new(timeout, bearer),
        }
    }
}

impl KnowledgeBackend for HttpKnowledgeBackend {
    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }

    fn infer(&self, head: &str, relation: Relation, k: usize) -> Result<Vec<String>, BackendError> {
        let req = KnowledgeRequest {
            head: head.to_string(),
            relation,
            k,
        };
        let resp: KnowledgeResponse = self.client.post(&self.url, &req)?;
        Ok(resp.tails)
    }
}

/// One line of a knowledge fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnowledgeFixtureEntry {
    pub head: String,
    pub relation: Relation,
    pub tails: Vec<String>,
}

/// Fixture backend keyed by `(head, relation)`; a miss is an error.
#[derive(Debug, Clone, Default)]
pub struct FixtureKnowledgeBackend {
    label: String,
    entries: HashMap<(String, Relation), Vec<String>>,
}

impl FixtureKnowledgeBackend {
    pub fn new(entries: impl IntoIterator<Item = KnowledgeFixtureEntry>) -> Self {
        Self {
            label: "fixture:inline".into(),
            entries: entries
                .into_iter()
                .map(|e| ((e.head.trim().to_string(), e.relation), e.tails))
                .collect(),
        }
    }

    /// Adds all five relations for one head.
    pub fn insert_bundle(&mut self, head: &str, tails: [&str; 5]) {
        for (r, t) in Relation::ALL.into_iter().zip(tails) {
            self.entries
                .insert((head.trim().to_string(), r), vec![t.to_string()]);
        }
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let entries: Vec<KnowledgeFixtureEntry> = crate::jsonl::read(path)
            .map_err(|e| KnowledgeError::Fixture(e.to_string()))?;
        let mut me = Self::new(entries);
        me.label = format!("fixture:{}", path.display());
        Ok(me)
    }
}

impl KnowledgeBackend for FixtureKnowledgeBackend {
    fn describe(&self) -> String {
        self.label.clone()
    }

    fn infer(&self, head: &str, relation: Relation, _k: usize) -> Result<Vec<String>, BackendError> {
        self.entries
            .get(&(head.trim().to_string(), relation))
            .cloned()
            .ok_or_else(|| BackendError::FixtureMiss(format!("({head:?}, {relation})")))
    }
}

fn clean_tail(tail: &str) -> Option<String> {
    let t = normalize_text(tail);
    let t = t.trim_end_matches('.').trim();
    if t.is_empty() || t.eq_ignore_ascii_case("none") {
        None
    } else {
        Some(t.to_string())
    }
}

/// Top-ranked usable tail per relation. COMET's literal "none" counts as no
/// tail.
pub fn fetch_commonsense(
    source_text: &str,
    mode: KnowledgeMode,
    backend: &dyn KnowledgeBackend,
    k: usize,
) -> Result<CommonsenseBundle, KnowledgeError> {
    let head = normalize_text(source_text);
    if head.is_empty() {
        return Err(KnowledgeError::EmptySource);
    }
    let results = par::map(&Relation::ALL, Relation::ALL.len(), |_, &relation| {
        let tails = backend
            .infer(&head, relation, k.max(1))
            .map_err(|source| KnowledgeError::Backend {
                head: head.clone(),
                relation,
                source,
            })?;
        tails
            .iter()
            .find_map(|t| clean_tail(t))
            .map(|t| (relation, t))
            .ok_or(KnowledgeError::MissingRelation(relation))
    });
    let inferences = results.into_iter().collect::<Result<BTreeMap<_, _>, _>>()?;
    CommonsenseBundle::new(head, mode, inferences)
}

/// Both knowledge bundles for one dialogue, as stored by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub dialogue_id: String,
    pub cause_oriented: CommonsenseBundle,
    pub last_utterance: CommonsenseBundle,
}

/// Fetches both modes for every dialogue, in input order.
pub fn fetch_all(
    dialogues: &[(Dialogue, CauseSpan)],
    backend: &dyn KnowledgeBackend,
    k: usize,
    parallelism: usize,
    retry: RetryPolicy,
) -> Vec<Result<KnowledgeRecord, KnowledgeError>> {
    let one = |d: &Dialogue, c: &CauseSpan, mode| -> Result<CommonsenseBundle, KnowledgeError> {
        let source = knowledge_source(d, mode, Some(c))?;
        let mut last = None;
        let (res, _) = retry.run(|| match fetch_commonsense(&source, mode, backend, k) {
            Ok(b) => Ok(Ok(b)),
            Err(KnowledgeError::Backend { source, .. }) if source.is_retryable() => Err(source),
            Err(e) => {
                last = Some(e.clone());
                Ok(Err(e))
            }
        });
        match res {
            Ok(inner) => inner,
            Err(err) => Err(last.unwrap_or(KnowledgeError::Backend {
                head: source.clone(),
                relation: Relation::XIntent,
                source: err,
            })),
        }
    };
    par::map(dialogues, parallelism, |_, (d, c)| {
        Ok(KnowledgeRecord {
            dialogue_id: d.id.clone(),
            cause_oriented: one(d, c, KnowledgeMode::CauseOriented)?,
            last_utterance: one(d, c, KnowledgeMode::LastUtterance)?,
        })
    })
}

/// Subject pronoun used in verbalized knowledge and rendered targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pronoun {
    #[default]
    He,
    She,
    They,
}

impl FromStr for Pronoun {
    type Err = KnowledgeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "He" | "he" => Ok(Pronoun::He),
            "She" | "she" => Ok(Pronoun::She),
            "They" | "they" => Ok(Pronoun::They),
            other => Err(KnowledgeError::UnknownSubject(other.to_string())),
        }
    }
}

impl Pronoun {
    pub fn subject(self) -> &'static str {
        match self {
            Pronoun::He => "He",
            Pronoun::She => "She",
            Pronoun::They => "They",
        }
    }

    pub fn subject_lower(self) -> &'static str {
        match self {
            Pronoun::He => "he",
            Pronoun::She => "she",
            Pronoun::They => "they",
        }
    }

    pub fn object(self) -> &'static str {
        match self {
            Pronoun::He => "him",
            Pronoun::She => "her",
            Pronoun::They => "them",
        }
    }

    pub fn possessive(self) -> &'static str {
        match self {
            Pronoun::He => "his",
            Pronoun::She => "her",
            Pronoun::They => "their",
        }
    }

    /// Present-tense verb agreeing with the pronoun: `feel` → `feels`.
    pub fn verb(self, base: &str) -> String {
        match self {
            Pronoun::They => base.to_string(),
            _ => format!("{base}s"),
        }
    }
}

const GERUND_EXCEPTIONS: &[(&str, &str)] = &[
    ("be", "being"),
    ("see", "seeing"),
    ("flee", "fleeing"),
    ("agree", "agreeing"),
    ("dye", "dyeing"),
    ("begin", "beginning"),
    ("forget", "forgetting"),
    ("admit", "admitting"),
    ("commit", "committing"),
    ("regret", "regretting"),
    ("prefer", "preferring"),
    ("occur", "occurring"),
    ("refer", "referring"),
    ("permit", "permitting"),
    ("upset", "upsetting"),
    ("quit", "quitting"),
    ("panic", "panicking"),
    ("picnic", "picnicking"),
];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

fn vowel_groups(word: &str) -> usize {
    let mut groups = 0;
    let mut prev = false;
    for c in word.chars() {
        let v = is_vowel(c);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    groups
}

/// Present participle by suffix rules plus an exceptions table.
pub fn gerund(verb: &str) -> String {
    let lower = verb.to_lowercase();
    if let Some((_, g)) = GERUND_EXCEPTIONS.iter().find(|(v, _)| *v == lower) {
        return g.to_string();
    }
    if lower.ends_with("ing") && lower.len() > 4 {
        return verb.to_string();
    }
    if let Some(stem) = verb.strip_suffix("ie") {
        return format!("{stem}ying");
    }
    if verb.ends_with("ee") || verb.ends_with("oe") || verb.ends_with("ye") {
        return format!("{verb}ing");
    }
    if let Some(stem) = verb.strip_suffix('e') {
        if stem.chars().count() >= 2 {
            return format!("{stem}ing");
        }
    }
    let chars: Vec<char> = lower.chars().collect();
    let n = chars.len();
    if n >= 3 && vowel_groups(&lower) == 1 {
        let (c1, v, c2) = (chars[n - 3], chars[n - 2], chars[n - 1]);
        let consonant = |c: char| c.is_ascii_alphabetic() && !is_vowel(c);
        if consonant(c1) && is_vowel(v) && consonant(c2) && !matches!(c2, 'w' | 'x' | 'y') {
            let last = verb.chars().last().expect("non-empty");
            return format!("{verb}{last}ing");
        }
    }
    format!("{verb}ing")
}

/// Nouns that take the subject's possessive when they directly follow the
/// tail's verb ("burn hair" → "burn his hair").
const POSSESSED_NOUNS: &[&str] = &[
    "hair", "face", "head", "hand", "hands", "teeth", "nails", "skin", "body", "car", "phone",
    "house", "home", "room", "job", "wife", "husband", "girlfriend", "boyfriend", "family",
    "friend", "friends", "dog", "cat", "pet", "mom", "dad", "mother", "father", "kids", "son",
    "daughter", "clothes", "shirt", "money", "life",
];

/// Possessive substitution (`the`/`their` → subject possessive), possessive
/// insertion before a bare possessed noun after the verb, and gerund form
/// for effect tails.
fn smooth_tail(tail: &str, relation: Relation, subject: Pronoun) -> String {
    let mut words: Vec<String> = tail.split_whitespace().map(str::to_string).collect();
    if relation == Relation::XEffect {
        if words.first().map(|w| w.eq_ignore_ascii_case("to")) == Some(true) && words.len() > 1 {
            words.remove(0);
        }
        if let Some(first) = words.first_mut() {
            *first = gerund(first);
        }
    }
    for w in words.iter_mut() {
        if w.eq_ignore_ascii_case("the") || w.eq_ignore_ascii_case("their") {
            *w = subject.possessive().to_string();
        }
    }
    let verb_pos = usize::from(words.first().map(|w| w.eq_ignore_ascii_case("to")) == Some(true));
    if let Some(noun) = words.get(verb_pos + 1) {
        if POSSESSED_NOUNS.contains(&noun.to_lowercase().as_str()) {
            words.insert(verb_pos + 1, subject.possessive().to_string());
        }
    }
    words.join(" ")
}

/// Renders the five inferences as `"; "`-joined segments ending in `"."`,
/// in the fixed order xIntent, xNeed, xWant, xEffect, xReact.
pub fn verbalize(bundle: &CommonsenseBundle, subject: Pronoun) -> String {
    let s = subject.subject();
    let segments: Vec<String> = Relation::ALL
        .into_iter()
        .map(|r| {
            let tail = smooth_tail(bundle.tail(r), r, subject);
            match r {
                Relation::XIntent => format!("{s} {} {tail}", subject.verb("tend")),
                Relation::XNeed => format!("{s} {} {tail}", subject.verb("need")),
                Relation::XWant => format!("{s} {} {tail}", subject.verb("want")),
                Relation::XEffect => format!(
                    "The effect is that {} {} up {tail}",
                    subject.subject_lower(),
                    subject.verb("end")
                ),
                Relation::XReact => format!("{s} {} {tail}", subject.verb("feel")),
            }
        })
        .collect();
    format!("{}.", segments.join("; "))
}
