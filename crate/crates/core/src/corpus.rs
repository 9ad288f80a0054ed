//! Canonical dialogue model, corpus importers and deterministic splitting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

/// The 32 EmpatheticDialogues emotion categories shipped with the crate.
pub const DEFAULT_LABELS: &str = include_str!("../data/emotions.txt");

pub const LABEL_COUNT: usize = 32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown corpus format '{0}' (expected canonical or edialogue-csv)")]
    UnknownFormat(String),
    #[error("label set must contain exactly {LABEL_COUNT} distinct lowercase names, found {0}")]
    LabelSetSize(usize),
    #[error("label '{0}' is not lowercase")]
    LabelNotLowercase(String),
    #[error("invalid dialogue: {0}")]
    InvalidDialogue(String),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("duplicate dialogue id '{0}'")]
    DuplicateId(String),
    #[error("split manifest references unknown dialogue id '{0}'")]
    UnknownId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionLabel(String);

impl EmotionLabel {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The closed set of emotion categories a corpus may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: BTreeSet<String>,
}

impl LabelSet {
    /// Parses one label per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut names = BTreeSet::new();
        let mut count = 0;
        for line in text.lines() {
            let name = line.split('#').next().unwrap_or("").trim();
            if name.is_empty() {
                continue;
            }
            if name != name.to_lowercase() {
                return Err(CorpusError::LabelNotLowercase(name.to_string()));
            }
            count += 1;
            names.insert(name.to_string());
        }
        if names.len() != LABEL_COUNT || count != LABEL_COUNT {
            return Err(CorpusError::LabelSetSize(names.len()));
        }
        Ok(Self { names })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Case-insensitive lookup.
    pub fn label(&self, name: &str) -> Option<EmotionLabel> {
        let key = name.trim().to_lowercase();
        self.names.contains(&key).then_some(EmotionLabel(key))
    }

    pub fn iter(&self) -> impl Iterator<Item = EmotionLabel> + '_ {
        self.names.iter().cloned().map(EmotionLabel)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

impl Default for LabelSet {
    fn default() -> Self {
        Self::parse(DEFAULT_LABELS).expect("bundled label set is valid")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
    #[default]
    Unassigned,
}

/// A dialogue history ending on a speaker turn plus the reference listener
/// reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub emotion: EmotionLabel,
    pub utterances: Vec<Utterance>,
    pub gold_response: String,
    pub split: Split,
}

/// Collapses newline runs to a single space and trims.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_break = false;
    for c in text.chars() {
        if c == '\n' || c == '\r' {
            if !in_break {
                out.push(' ');
                in_break = true;
            }
        } else {
            out.push(c);
            in_break = false;
        }
    }
    out.trim().to_string()
}

impl Dialogue {
    /// Builds a validated dialogue. Texts are normalized; roles must
    /// alternate starting with the speaker and the history must end on a
    /// speaker turn.
    pub fn new(
        id: impl Into<String>,
        emotion: EmotionLabel,
        turns: impl IntoIterator<Item = (Role, String)>,
        gold_response: impl AsRef<str>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let invalid = |msg: String| CorpusError::InvalidDialogue(format!("{id}: {msg}"));
        if id.trim().is_empty() {
            return Err(CorpusError::InvalidDialogue("empty id".into()));
        }
        let mut utterances = Vec::new();
        for (index, (role, text)) in turns.into_iter().enumerate() {
            let expected = if index % 2 == 0 {
                Role::Speaker
            } else {
                Role::Listener
            };
            if role != expected {
                return Err(invalid(format!(
                    "turn {index} has role {} but roles must alternate starting with speaker",
                    role.as_str()
                )));
            }
            let text = normalize_text(&text);
            if text.is_empty() {
                return Err(invalid(format!("turn {index} is empty")));
            }
            utterances.push(Utterance { index, role, text });
        }
        match utterances.last() {
            None => return Err(invalid("no utterances".into())),
            Some(u) if u.role != Role::Speaker => {
                return Err(invalid("history must end with a speaker turn".into()))
            }
            _ => {}
        }
        let gold_response = normalize_text(gold_response.as_ref());
        if gold_response.is_empty() {
            return Err(invalid("empty gold response".into()));
        }
        Ok(Self {
            id,
            emotion,
            utterances,
            gold_response,
            split: Split::Unassigned,
        })
    }

    pub fn last_speaker_utterance(&self) -> &Utterance {
        self.utterances
            .iter()
            .rev()
            .find(|u| u.role == Role::Speaker)
            .expect("validated dialogue ends with a speaker turn")
    }

    pub fn to_record(&self) -> CanonicalRecord {
        CanonicalRecord {
            id: self.id.clone(),
            emotion: self.emotion.as_str().to_string(),
            utterances: self
                .utterances
                .iter()
                .map(|u| RecordTurn {
                    role: u.role,
                    text: u.text.clone(),
                })
                .collect(),
            gold_response: self.gold_response.clone(),
        }
    }

    pub fn from_record(record: CanonicalRecord, labels: &LabelSet) -> Result<Self, CorpusError> {
        let emotion = labels.label(&record.emotion).ok_or_else(|| {
            CorpusError::InvalidDialogue(format!(
                "{}: emotion '{}' is not in the label set",
                record.id, record.emotion
            ))
        })?;
        Dialogue::new(
            record.id,
            emotion,
            record.utterances.into_iter().map(|t| (t.role, t.text)),
            record.gold_response,
        )
    }
}

/// One line of the canonical corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalRecord {
    pub id: String,
    pub emotion: String,
    pub utterances: Vec<RecordTurn>,
    pub gold_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTurn {
    pub role: Role,
    pub text: String,
}

/// Role-tagged turns joined with `"; "` in turn order.
pub fn context_string(dialogue: &Dialogue) -> String {
    dialogue
        .utterances
        .iter()
        .map(|u| format!("{}: {}", u.role.as_str(), u.text))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportFormat {
    #[serde(rename = "canonical")]
    Canonical,
    #[serde(rename = "edialogue-csv")]
    EDialogueCsv,
}

impl FromStr for ImportFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical" => Ok(Self::Canonical),
            "edialogue-csv" => Ok(Self::EDialogueCsv),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    /// 1-based line (canonical) or conversation id (CSV).
    pub location: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ImportReport {
    pub dialogues: Vec<Dialogue>,
    pub rejects: Vec<Reject>,
}

pub fn import_corpus(
    path: &Path,
    format: ImportFormat,
    labels: &LabelSet,
) -> Result<ImportReport, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match format {
        ImportFormat::Canonical => import_canonical(&text, labels),
        ImportFormat::EDialogueCsv => import_edialogue_csv(&text, labels),
    })
}

pub fn import_canonical(text: &str, labels: &LabelSet) -> ImportReport {
    let mut report = ImportReport::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", i + 1);
        let parsed = serde_json::from_str::<CanonicalRecord>(line)
            .map_err(|e| e.to_string())
            .and_then(|r| Dialogue::from_record(r, labels).map_err(|e| e.to_string()));
        match parsed {
            Ok(d) if !seen.insert(d.id.clone()) => report.rejects.push(Reject {
                location,
                reason: format!("duplicate dialogue id '{}'", d.id),
            }),
            Ok(d) => report.dialogues.push(d),
            Err(reason) => report.rejects.push(Reject { location, reason }),
        }
    }
    report
}

/// Importer for the public EmpatheticDialogues CSV release.
///
/// Column mapping (header row required):
///
/// | column          | use                                              |
/// |-----------------|--------------------------------------------------|
/// | `conv_id`       | dialogue id; rows are grouped on it              |
/// | `utterance_idx` | 1-based turn order within the conversation       |
/// | `context`       | emotion label                                    |
/// | `speaker_idx`   | worker id; the author of turn 1 is the speaker   |
/// | `utterance`     | turn text, `_comma_` decoded to `,`              |
///
/// Other columns (`prompt`, `selfeval`, `tags`) are ignored. The last
/// listener turn becomes the gold response and everything before it the
/// history; a trailing unanswered speaker turn is dropped.
pub fn import_edialogue_csv(text: &str, labels: &LabelSet) -> ImportReport {
    let mut report = ImportReport::default();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(_) => return report,
    };
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(c_conv), Some(c_idx), Some(c_ctx), Some(c_spk), Some(c_utt)) = (
        col("conv_id"),
        col("utterance_idx"),
        col("context"),
        col("speaker_idx"),
        col("utterance"),
    ) else {
        if !headers.is_empty() {
            report.rejects.push(Reject {
                location: "header".into(),
                reason: "missing one of conv_id, utterance_idx, context, speaker_idx, utterance"
                    .into(),
            });
        }
        return report;
    };

    struct Row {
        idx: u32,
        emotion: String,
        speaker: String,
        text: String,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for (i, rec) in reader.records().enumerate() {
        let location = format!("row {}", i + 2);
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                report.rejects.push(Reject {
                    location,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |c: usize| rec.get(c).map(str::trim);
        let (Some(conv), Some(idx), Some(ctx), Some(spk), Some(utt)) =
            (field(c_conv), field(c_idx), field(c_ctx), field(c_spk), field(c_utt))
        else {
            report.rejects.push(Reject {
                location,
                reason: "too few fields".into(),
            });
            continue;
        };
        let Ok(idx) = idx.parse::<u32>() else {
            report.rejects.push(Reject {
                location,
                reason: format!("utterance_idx '{idx}' is not an integer"),
            });
            continue;
        };
        if !groups.contains_key(conv) {
            order.push(conv.to_string());
        }
        groups.entry(conv.to_string()).or_default().push(Row {
            idx,
            emotion: ctx.to_string(),
            speaker: spk.to_string(),
            text: utt.replace("_comma_", ","),
        });
    }

    for conv in order {
        let mut rows = groups.remove(&conv).unwrap_or_default();
        rows.sort_by_key(|r| r.idx);
        let reject = |reason: String| Reject {
            location: conv.clone(),
            reason,
        };
        let emotion = &rows[0].emotion;
        if rows.iter().any(|r| &r.emotion != emotion) {
            report
                .rejects
                .push(reject("conversation mixes emotion labels".into()));
            continue;
        }
        let Some(label) = labels.label(emotion) else {
            report.rejects.push(reject(format!(
                "emotion '{emotion}' is not in the label set"
            )));
            continue;
        };
        let first = rows[0].speaker.clone();
        let mut turns: Vec<(Role, String)> = rows
            .into_iter()
            .map(|r| {
                let role = if r.speaker == first {
                    Role::Speaker
                } else {
                    Role::Listener
                };
                (role, r.text)
            })
            .collect();
        if turns.last().map(|t| t.0) == Some(Role::Speaker) {
            turns.pop();
        }
        let Some((Role::Listener, gold)) = turns.pop() else {
            report
                .rejects
                .push(reject("no listener reply to use as gold response".into()));
            continue;
        };
        match Dialogue::new(conv.clone(), label, turns, gold) {
            Ok(d) => report.dialogues.push(d),
            Err(e) => report.rejects.push(reject(e.to_string())),
        }
    }
    report
}

pub fn write_canonical(path: &Path, dialogues: &[Dialogue]) -> std::io::Result<()> {
    let records: Vec<_> = dialogues.iter().map(Dialogue::to_record).collect();
    crate::jsonl::write(path, &records)
}

/// Train/valid/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self, CorpusError> {
        let r = [train, valid, test];
        let ok = r.iter().all(|x| x.is_finite() && *x > 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(CorpusError::BadRatios(r));
        }
        Ok(Self { train, valid, test })
    }

    /// Ratios from integer weights such as 8:1:1.
    pub fn from_weights(train: u32, valid: u32, test: u32) -> Result<Self, CorpusError> {
        let total = f64::from(train) + f64::from(valid) + f64::from(test);
        if train == 0 || valid == 0 || test == 0 {
            return Err(CorpusError::BadRatios([
                f64::from(train),
                f64::from(valid),
                f64::from(test),
            ]));
        }
        Ok(Self {
            train: f64::from(train) / total,
            valid: f64::from(valid) / total,
            test: f64::from(test) / total,
        })
    }

    /// Floor-allocated valid/test sizes with the remainder going to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // Absorb binary representation error such as 0.1 * 30 = 3.0000000000000004
        // or 0.7 * 10 = 6.999999999999999.
        let floor = |f: f64| ((n as f64) * f + 1e-9 * (n as f64).max(1.0)).floor() as usize;
        let valid = floor(self.valid).min(n);
        let test = floor(self.test).min(n - valid);
        (n - valid - test, valid, test)
    }
}

/// Split assignment by dialogue id, serialized as the split manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Deterministic shuffled split. The result depends only on the set of ids,
/// the ratios and the seed; input order does not matter.
pub fn split_corpus(
    dialogues: &[Dialogue],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<SplitManifest, CorpusError> {
    SplitRatios::new(ratios.train, ratios.valid, ratios.test)?;
    if dialogues.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut ids: Vec<&str> = dialogues.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(CorpusError::DuplicateId(w[0].to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let (n_train, n_valid, _) = ratios.sizes(ids.len());
    let take = |slice: &[&str]| {
        let mut v: Vec<String> = slice.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    Ok(SplitManifest {
        seed,
        ratios: *ratios,
        train: take(&ids[..n_train]),
        valid: take(&ids[n_train..n_train + n_valid]),
        test: take(&ids[n_train + n_valid..]),
    })
}

impl SplitManifest {
    /// Assigns each dialogue its split, keeping corpus order within each part.
    pub fn partition(&self, dialogues: &[Dialogue]) -> Result<Partition, CorpusError> {
        let mut assignment: HashMap<&str, Split> = HashMap::new();
        for (ids, split) in [
            (&self.train, Split::Train),
            (&self.valid, Split::Valid),
            (&self.test, Split::Test),
        ] {
            for id in ids {
                assignment.insert(id.as_str(), split);
            }
        }
        let mut out = Partition::default();
        let mut found = 0;
        for d in dialogues {
            let Some(split) = assignment.get(d.id.as_str()) else {
                continue;
            };
            found += 1;
            let mut d = d.clone();
            d.split = *split;
            match split {
                Split::Train => out.train.push(d),
                Split::Valid => out.valid.push(d),
                Split::Test => out.test.push(d),
                Split::Unassigned => unreachable!(),
            }
        }
        if found != assignment.len() {
            let present: HashSet<&str> = dialogues.iter().map(|d| d.id.as_str()).collect();
            let missing = assignment
                .keys()
                .find(|id| !present.contains(*id))
                .map(|s| s.to_string())
                .unwrap_or_default();
            return Err(CorpusError::UnknownId(missing));
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn dialogue(id: &str, emotion: &str, turns: &[&str], gold: &str) -> Dialogue {
        let labels = LabelSet::default();
        let turns = turns.iter().enumerate().map(|(i, t)| {
            let role = if i % 2 == 0 {
                Role::Speaker
            } else {
                Role::Listener
            };
            (role, t.to_string())
        });
        Dialogue::new(id, labels.label(emotion).unwrap(), turns, gold).unwrap()
    }

    #[test]
    fn bundled_label_set_has_32_names() {
        let labels = LabelSet::default();
        assert_eq!(labels.len(), 32);
        assert!(labels.label("Embarrassed").is_some());
        assert!(labels.label("bored").is_none());
    }

    #[test]
    fn label_set_rejects_wrong_size_and_case() {
        assert!(matches!(
            LabelSet::parse("sad\nhappy\n"),
            Err(CorpusError::LabelSetSize(2))
        ));
        let mut text = DEFAULT_LABELS.replace("sad", "Sad");
        assert!(matches!(
            LabelSet::parse(&text),
            Err(CorpusError::LabelNotLowercase(_))
        ));
        text = DEFAULT_LABELS.replace("sad", "angry");
        assert!(LabelSet::parse(&text).is_err());
    }

    #[test]
    fn normalization_collapses_newlines() {
        assert_eq!(normalize_text("  a\r\n\nb \n"), "a b");
        assert_eq!(normalize_text("one\ntwo"), "one two");
    }

    #[test]
    fn dialogue_invariants() {
        let labels = LabelSet::default();
        let sad = labels.label("sad").unwrap();
        let bad_start = Dialogue::new("x", sad.clone(), [(Role::Listener, "hi".into())], "ok");
        assert!(bad_start.is_err());
        let ends_listener = Dialogue::new(
            "x",
            sad.clone(),
            [(Role::Speaker, "a".into()), (Role::Listener, "b".into())],
            "ok",
        );
        assert!(ends_listener.is_err());
        let empty = Dialogue::new("x", sad.clone(), Vec::new(), "ok");
        assert!(empty.is_err());
        let blank = Dialogue::new("x", sad, [(Role::Speaker, " \n ".into())], "ok");
        assert!(blank.is_err());
    }

    #[test]
    fn context_single_turn() {
        let d = dialogue("a", "sad", &["hi"], "oh");
        assert_eq!(context_string(&d), "speaker: hi");
    }

    #[test]
    fn context_figure_one_dialogue() {
        let d = dialogue(
            "fig1",
            "sad",
            &[
                "I just broke up with my girlfriend.",
                "I'm sorry to hear that. What happened?",
                "We wanted different things and I can't sleep.",
            ],
            "That sounds really hard.",
        );
        assert_eq!(
            context_string(&d),
            "speaker: I just broke up with my girlfriend.; \
             listener: I'm sorry to hear that. What happened?; \
             speaker: We wanted different things and I can't sleep."
        );
    }

    #[test]
    fn context_separator_count_is_turns_minus_one() {
        let d = dialogue("a", "sad", &["one", "two", "three", "four", "five"], "g");
        let ctx = context_string(&d);
        assert_eq!(ctx.matches(';').count(), d.utterances.len() - 1);
        for n in [1, 3, 7] {
            let turns: Vec<&str> = (0..n).map(|_| "t").collect();
            let d = dialogue("b", "sad", &turns, "g");
            assert_eq!(context_string(&d).matches("; ").count(), n - 1);
        }
    }

    #[test]
    fn canonical_import_collects_rejects() {
        let labels = LabelSet::default();
        let good = r#"{"id":"a","emotion":"sad","utterances":[{"role":"speaker","text":"hi"}],"gold_response":"oh"}"#;
        let bad_label = r#"{"id":"b","emotion":"bored","utterances":[{"role":"speaker","text":"hi"}],"gold_response":"oh"}"#;
        let text = format!("{good}\n\n{bad_label}\nnot json\n{good}\n");
        let report = import_canonical(&text, &labels);
        assert_eq!(report.dialogues.len(), 1);
        assert_eq!(report.rejects.len(), 3);
        assert!(report.rejects[0].reason.contains("bored"));
        assert_eq!(report.rejects[0].location, "line 3");
        assert!(report.rejects[2].reason.contains("duplicate"));
    }

    #[test]
    fn empty_file_imports_nothing() {
        let report = import_canonical("", &LabelSet::default());
        assert!(report.dialogues.is_empty());
        assert!(report.rejects.is_empty());
        let report = import_edialogue_csv("", &LabelSet::default());
        assert!(report.dialogues.is_empty());
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!(matches!(
            "jsonl".parse::<ImportFormat>(),
            Err(CorpusError::UnknownFormat(_))
        ));
    }

    #[test]
    fn edialogue_csv_import() {
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n\
hit:1_conv:2,1,embarrassed,I burned my hair,1,I burned my hair with my hair dryer._comma_ ugh,5|5|5_2|2|5,\n\
hit:1_conv:2,3,embarrassed,I burned my hair,1,Yeah it is the worst,5|5|5_2|2|5,\n\
hit:1_conv:2,2,embarrassed,I burned my hair,2,I am sorry to hear that,5|5|5_2|2|5,\n\
hit:1_conv:2,4,embarrassed,I burned my hair,2,It will grow out,5|5|5_2|2|5,\n\
hit:3_conv:6,1,bored,x,7,hello,,\n\
hit:3_conv:6,2,bored,x,8,hi,,\n\
hit:4_conv:8,1,sad,x,7,only one turn,,\n";
        let report = import_edialogue_csv(csv, &LabelSet::default());
        assert_eq!(report.dialogues.len(), 1);
        let d = &report.dialogues[0];
        assert_eq!(d.id, "hit:1_conv:2");
        assert_eq!(d.utterances.len(), 3);
        assert_eq!(d.utterances[0].text, "I burned my hair with my hair dryer., ugh");
        assert_eq!(d.utterances[1].role, Role::Listener);
        assert_eq!(d.gold_response, "It will grow out");
        assert_eq!(report.rejects.len(), 2);
    }

    #[test]
    fn split_sizes_full_benchmark() {
        let r = SplitRatios::from_weights(8, 1, 1).unwrap();
        assert_eq!(r.sizes(24_850), (19_880, 2_485, 2_485));
        assert_eq!(r.sizes(10), (8, 1, 1));
        assert_eq!(r.sizes(7), (7, 0, 0));
        let r = SplitRatios::new(0.7, 0.2, 0.1).unwrap();
        assert_eq!(r.sizes(10), (7, 2, 1));
    }

    #[test]
    fn ratio_validation() {
        assert!(SplitRatios::new(0.8, 0.1, 0.2).is_err());
        assert!(SplitRatios::new(1.0, 0.0, 0.0).is_err());
        assert!(SplitRatios::new(0.8, 0.1, 0.1).is_ok());
        assert!(SplitRatios::from_weights(8, 0, 1).is_err());
    }

    fn corpus(n: usize) -> Vec<Dialogue> {
        (0..n)
            .map(|i| dialogue(&format!("d{i:05}"), "sad", &["hello"], "hi"))
            .collect()
    }

    #[test]
    fn split_ten_is_exact() {
        let ds = corpus(10);
        let r = SplitRatios::from_weights(8, 1, 1).unwrap();
        let m = split_corpus(&ds, &r, 7).unwrap();
        assert_eq!((m.train.len(), m.valid.len(), m.test.len()), (8, 1, 1));
        let p = m.partition(&ds).unwrap();
        assert!(p.train.iter().all(|d| d.split == Split::Train));
        assert_eq!(p.test[0].split, Split::Test);
    }

    #[test]
    fn split_is_order_independent_and_seeded() {
        let ds = corpus(100);
        let r = SplitRatios::from_weights(8, 1, 1).unwrap();
        let a = split_corpus(&ds, &r, 1).unwrap();
        let mut rev = ds.clone();
        rev.reverse();
        assert_eq!(a, split_corpus(&rev, &r, 1).unwrap());
        assert_ne!(a, split_corpus(&ds, &r, 2).unwrap());
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&split_corpus(&ds, &r, 1).unwrap()).unwrap()
        );
    }

    #[test]
    fn split_errors() {
        let r = SplitRatios::from_weights(8, 1, 1).unwrap();
        assert!(matches!(split_corpus(&[], &r, 0), Err(CorpusError::EmptyCorpus)));
        let mut ds = corpus(3);
        ds.push(ds[0].clone());
        assert!(matches!(
            split_corpus(&ds, &r, 0),
            Err(CorpusError::DuplicateId(_))
        ));
        let bad = SplitRatios {
            train: 0.5,
            valid: 0.5,
            test: 0.5,
        };
        assert!(matches!(
            split_corpus(&corpus(3), &bad, 0),
            Err(CorpusError::BadRatios(_))
        ));
    }

    #[test]
    fn partition_detects_unknown_ids() {
        let ds = corpus(10);
        let r = SplitRatios::from_weights(8, 1, 1).unwrap();
        let m = split_corpus(&ds, &r, 3).unwrap();
        assert!(matches!(
            m.partition(&ds[1..]),
            Err(CorpusError::UnknownId(_))
        ));
    }
}
