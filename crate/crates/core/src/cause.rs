//! Emotion-cause spans: backend protocol, single-span selection and span F1.

use crate::backend::{BackendError, JsonClient, RetryPolicy};
use crate::corpus::{CanonicalRecord, Dialogue};
use crate::par;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CauseError {
    #[error("cause backend failed for '{id}': {source}")]
    Backend {
        id: String,
        #[source]
        source: BackendError,
    },
    #[error("invalid span for '{id}': {reason}")]
    InvalidSpan { id: String, reason: String },
    #[error("dialogue id sets differ between predicted and gold spans")]
    IdMismatch,
    #[error("duplicate dialogue id '{0}' in span list")]
    DuplicateId(String),
    #[error("cause fixture error: {0}")]
    Fixture(String),
}

impl CauseError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, CauseError::Backend { source, .. } if source.is_retryable())
    }
}

/// A contiguous character span of one history utterance. Offsets count
/// Unicode scalar values and are half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseSpan {
    pub dialogue_id: String,
    pub utterance_index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

impl CauseSpan {
    pub fn from_offsets(
        dialogue: &Dialogue,
        utterance_index: usize,
        char_start: usize,
        char_end: usize,
    ) -> Result<Self, CauseError> {
        let invalid = |reason: String| CauseError::InvalidSpan {
            id: dialogue.id.clone(),
            reason,
        };
        let utt = dialogue
            .utterances
            .get(utterance_index)
            .ok_or_else(|| invalid(format!("utterance index {utterance_index} out of range")))?;
        let len = utt.text.chars().count();
        if char_start >= char_end || char_end > len {
            return Err(invalid(format!(
                "offsets [{char_start}, {char_end}) invalid for utterance of {len} chars"
            )));
        }
        let text: String = utt
            .text
            .chars()
            .skip(char_start)
            .take(char_end - char_start)
            .collect();
        Ok(Self {
            dialogue_id: dialogue.id.clone(),
            utterance_index,
            char_start,
            char_end,
            text,
        })
    }

    /// The whole utterance as a span.
    pub fn whole_utterance(dialogue: &Dialogue, utterance_index: usize) -> Result<Self, CauseError> {
        let len = dialogue
            .utterances
            .get(utterance_index)
            .map(|u| u.text.chars().count())
            .unwrap_or(0);
        Self::from_offsets(dialogue, utterance_index, 0, len)
    }

    /// Re-checks both invariants against `dialogue`.
    pub fn validate(&self, dialogue: &Dialogue) -> Result<(), CauseError> {
        let fresh =
            Self::from_offsets(dialogue, self.utterance_index, self.char_start, self.char_end)?;
        if fresh != *self {
            return Err(CauseError::InvalidSpan {
                id: dialogue.id.clone(),
                reason: "span text does not match the utterance substring".into(),
            });
        }
        Ok(())
    }
}

/// One span as sent over the wire by a cause backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireSpan {
    pub utterance_index: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CauseResponse {
    pub spans: Vec<WireSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSpan {
    pub span: CauseSpan,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauseBackendResult {
    pub spans: Vec<ScoredSpan>,
    /// The backend payload, kept for audit.
    pub raw: String,
}

impl CauseBackendResult {
    pub fn from_response(dialogue: &Dialogue, response: &CauseResponse) -> Result<Self, CauseError> {
        let mut spans = Vec::with_capacity(response.spans.len());
        for w in &response.spans {
            if !(0.0..=1.0).contains(&w.confidence) {
                return Err(CauseError::InvalidSpan {
                    id: dialogue.id.clone(),
                    reason: format!("confidence {} outside [0, 1]", w.confidence),
                });
            }
            spans.push(ScoredSpan {
                span: CauseSpan::from_offsets(dialogue, w.utterance_index, w.char_start, w.char_end)?,
                confidence: w.confidence,
            });
        }
        let raw = serde_json::to_string(response).unwrap_or_default();
        Ok(Self { spans, raw })
    }
}

pub trait CauseBackend: Send + Sync {
    /// Identity recorded in run manifests.
    fn describe(&self) -> String;
    fn extract(&self, dialogue: &Dialogue) -> Result<CauseResponse, BackendError>;
}

/// HTTP cause backend: POST `{"dialogue": <canonical record>}`.
#[derive(Debug, Clone)]
pub struct HttpCauseBackend {
    url: String,
    client: JsonClient,
}

impl HttpCauseBackend {
    pub fn new(url: impl Into<String>, timeout: Duration, bearer: Option<String>) -> Self {
        Self {
            url: url.into(),
            client: JsonClient::new(timeout, bearer),
        }
    }
}

#[derive(Serialize)]
struct CauseRequest<'a> {
    dialogue: &'a CanonicalRecord,
}

impl CauseBackend for HttpCauseBackend {
    fn describe(&self) -> String {
        format!("http:{}", self.url)
    }

    fn extract(&self, dialogue: &Dialogue) -> Result<CauseResponse, BackendError> {
        let record = dialogue.to_record();
        self.client.post(&self.url, &CauseRequest { dialogue: &record })
    }
}

/// Fixture backend: a JSON object mapping dialogue id to a response.
/// A lookup miss is an error.
#[derive(Debug, Clone, Default)]
pub struct FixtureCauseBackend {
    label: String,
    entries: HashMap<String, CauseResponse>,
}

impl FixtureCauseBackend {
    pub fn new(entries: impl IntoIterator<Item = (String, CauseResponse)>) -> Self {
        Self {
            label: "fixture:inline".into(),
            entries: entries.into_iter().collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CauseError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CauseError::Fixture(format!("{}: {e}", path.display())))?;
        let entries: BTreeMap<String, CauseResponse> =
            serde_json::from_str(&text).map_err(|e| CauseError::Fixture(format!("{}: {e}", path.display())))?;
        Ok(Self {
            label: format!("fixture:{}", path.display()),
            entries: entries.into_iter().collect(),
        })
    }
}

impl CauseBackend for FixtureCauseBackend {
    fn describe(&self) -> String {
        self.label.clone()
    }

    fn extract(&self, dialogue: &Dialogue) -> Result<CauseResponse, BackendError> {
        self.entries
            .get(&dialogue.id)
            .cloned()
            .ok_or_else(|| BackendError::FixtureMiss(format!("dialogue '{}'", dialogue.id)))
    }
}

/// The span chosen for a dialogue, serialized one per line in cause files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseAnnotation {
    pub span: CauseSpan,
    pub confidence: Option<f64>,
    /// Set when the backend proposed nothing and the last speaker turn was used.
    pub fallback: bool,
}

/// Picks the single span that feeds knowledge generation and the targets:
/// highest confidence, then lowest utterance index, then lowest start.
pub fn select_span(dialogue: &Dialogue, result: &CauseBackendResult) -> CauseAnnotation {
    let best = result.spans.iter().min_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.span.utterance_index.cmp(&b.span.utterance_index))
            .then(a.span.char_start.cmp(&b.span.char_start))
    });
    match best {
        Some(s) => CauseAnnotation {
            span: s.span.clone(),
            confidence: Some(s.confidence),
            fallback: false,
        },
        None => {
            let last = dialogue.last_speaker_utterance().index;
            CauseAnnotation {
                span: CauseSpan::whole_utterance(dialogue, last)
                    .expect("validated utterances are non-empty"),
                confidence: None,
                fallback: true,
            }
        }
    }
}

pub fn annotate_causes(
    dialogue: &Dialogue,
    backend: &dyn CauseBackend,
) -> Result<CauseAnnotation, CauseError> {
    let response = backend.extract(dialogue).map_err(|source| CauseError::Backend {
        id: dialogue.id.clone(),
        source,
    })?;
    let result = CauseBackendResult::from_response(dialogue, &response)?;
    Ok(select_span(dialogue, &result))
}

/// Annotates every dialogue with bounded concurrency and retries; results
/// are in input order.
pub fn annotate_all(
    dialogues: &[Dialogue],
    backend: &dyn CauseBackend,
    parallelism: usize,
    retry: RetryPolicy,
) -> Vec<Result<CauseAnnotation, CauseError>> {
    par::map(dialogues, parallelism, |_, d| {
        let mut last_err = None;
        let (res, _) = retry.run(|| match annotate_causes(d, backend) {
            Ok(a) => Ok(Ok(a)),
            Err(CauseError::Backend { source, .. }) => Err(source),
            Err(other) => {
                last_err = Some(other.clone());
                Ok(Err(other))
            }
        });
        match res {
            Ok(inner) => inner,
            Err(source) => Err(last_err.unwrap_or(CauseError::Backend {
                id: d.id.clone(),
                source,
            })),
        }
    })
}

fn whitespace_tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Token-overlap F1 between two span texts (whitespace tokens, multiset
/// overlap). Two empty texts score 1.
pub fn token_f1(predicted: &str, gold: &str) -> f64 {
    let p = whitespace_tokens(predicted);
    let g = whitespace_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Macro (per-dialogue, unweighted) mean of token-overlap F1.
pub fn cause_span_f1(predicted: &[CauseSpan], gold: &[CauseSpan]) -> Result<f64, CauseError> {
    let index = |spans: &[CauseSpan]| -> Result<BTreeMap<String, String>, CauseError> {
        let mut m = BTreeMap::new();
        for s in spans {
            if m.insert(s.dialogue_id.clone(), s.text.clone()).is_some() {
                return Err(CauseError::DuplicateId(s.dialogue_id.clone()));
            }
        }
        Ok(m)
    };
    let p = index(predicted)?;
    let g = index(gold)?;
    if p.len() != g.len() || p.keys().ne(g.keys()) {
        return Err(CauseError::IdMismatch);
    }
    if p.is_empty() {
        return Ok(1.0);
    }
    let total: f64 = p
        .iter()
        .zip(g.values())
        .map(|((_, pt), gt)| token_f1(pt, gt))
        .sum();
    Ok(total / p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::dialogue;
    use proptest::prelude::*;

    fn figure_one() -> Dialogue {
        dialogue(
            "fig1",
            "sad",
            &[
                "I just broke up with my girlfriend.",
                "Oh no, I'm sorry. How are you holding up?",
                "Not great. I keep thinking about what went wrong and can't sleep.",
            ],
            "That is really tough, give yourself some time.",
        )
    }

    fn span(d: &Dialogue, u: usize, s: usize, e: usize, c: f64) -> WireSpan {
        let _ = d;
        WireSpan {
            utterance_index: u,
            char_start: s,
            char_end: e,
            confidence: c,
        }
    }

    #[test]
    fn figure_one_cause() {
        let d = figure_one();
        let backend = FixtureCauseBackend::new([(
            "fig1".to_string(),
            CauseResponse {
                spans: vec![span(&d, 0, 0, 35, 0.93), span(&d, 2, 0, 10, 0.2)],
            },
        )]);
        let a = annotate_causes(&d, &backend).unwrap();
        assert_eq!(a.span.text, "I just broke up with my girlfriend.");
        assert!(!a.fallback);
        a.span.validate(&d).unwrap();
    }

    #[test]
    fn singleton_full_utterance_returned_unchanged() {
        let d = figure_one();
        let len = d.utterances[2].text.chars().count();
        let result = CauseBackendResult::from_response(
            &d,
            &CauseResponse {
                spans: vec![span(&d, 2, 0, len, 0.5)],
            },
        )
        .unwrap();
        let a = select_span(&d, &result);
        assert_eq!(a.span.text, d.utterances[2].text);
        assert_eq!(a.confidence, Some(0.5));
    }

    #[test]
    fn highest_confidence_wins_then_position() {
        let d = figure_one();
        let pick = |spans: Vec<WireSpan>| {
            let r = CauseBackendResult::from_response(&d, &CauseResponse { spans }).unwrap();
            select_span(&d, &r).span
        };
        let s = pick(vec![span(&d, 2, 0, 5, 0.4), span(&d, 0, 7, 12, 0.9)]);
        assert_eq!((s.utterance_index, s.char_start), (0, 7));
        let s = pick(vec![span(&d, 2, 0, 5, 0.7), span(&d, 0, 7, 12, 0.7)]);
        assert_eq!(s.utterance_index, 0);
        let s = pick(vec![span(&d, 0, 7, 12, 0.7), span(&d, 0, 2, 5, 0.7)]);
        assert_eq!(s.char_start, 2);
    }

    #[test]
    fn empty_response_falls_back_to_last_speaker_turn() {
        let d = figure_one();
        let backend = FixtureCauseBackend::new([("fig1".to_string(), CauseResponse::default())]);
        let a = annotate_causes(&d, &backend).unwrap();
        assert!(a.fallback);
        assert_eq!(a.span.utterance_index, 2);
        assert_eq!(a.span.text, d.utterances[2].text);
    }

    #[test]
    fn fixture_miss_is_an_error() {
        let d = figure_one();
        let backend = FixtureCauseBackend::default();
        let err = annotate_causes(&d, &backend).unwrap_err();
        assert!(matches!(
            err,
            CauseError::Backend {
                source: BackendError::FixtureMiss(_),
                ..
            }
        ));
        assert!(!err.is_retryable());
    }

    #[test]
    fn invalid_offsets_and_confidence_rejected() {
        let d = figure_one();
        for bad in [span(&d, 9, 0, 1, 0.5), span(&d, 0, 5, 5, 0.5), span(&d, 0, 0, 500, 0.5), span(&d, 0, 0, 3, 1.5)] {
            assert!(CauseBackendResult::from_response(&d, &CauseResponse { spans: vec![bad] }).is_err());
        }
    }

    #[test]
    fn offsets_are_characters_not_bytes() {
        let d = dialogue("u", "sad", &["café déjà vu"], "ok");
        let s = CauseSpan::from_offsets(&d, 0, 5, 9).unwrap();
        assert_eq!(s.text, "déjà");
    }

    struct Flaky(std::sync::atomic::AtomicUsize);
    impl CauseBackend for Flaky {
        fn describe(&self) -> String {
            "flaky".into()
        }
        fn extract(&self, _: &Dialogue) -> Result<CauseResponse, BackendError> {
            if self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                Err(BackendError::Timeout)
            } else {
                Ok(CauseResponse::default())
            }
        }
    }

    #[test]
    fn annotate_all_retries_transient_failures() {
        let d = figure_one();
        let backend = Flaky(Default::default());
        let out = annotate_all(&[d], &backend, 2, RetryPolicy::no_delay(3));
        assert!(out[0].as_ref().unwrap().fallback);
    }

    fn cs(id: &str, text: &str) -> CauseSpan {
        CauseSpan {
            dialogue_id: id.into(),
            utterance_index: 0,
            char_start: 0,
            char_end: text.chars().count().max(1),
            text: text.into(),
        }
    }

    #[test]
    fn f1_hand_cases() {
        let gold = vec![cs("a", "I burned my hair"), cs("b", "we broke up")];
        assert_eq!(cause_span_f1(&gold, &gold).unwrap(), 1.0);
        let disjoint = vec![cs("a", "x y"), cs("b", "z")];
        assert_eq!(cause_span_f1(&disjoint, &gold).unwrap(), 0.0);
        let f = cause_span_f1(&[cs("a", "a b c")], &[cs("a", "b c d")]).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("a", ""), 0.0);
    }

    #[test]
    fn f1_requires_matching_ids() {
        assert_eq!(
            cause_span_f1(&[cs("a", "x")], &[cs("b", "x")]),
            Err(CauseError::IdMismatch)
        );
        assert_eq!(
            cause_span_f1(&[cs("a", "x"), cs("a", "y")], &[cs("a", "x")]),
            Err(CauseError::DuplicateId("a".into()))
        );
    }

    proptest! {
        #[test]
        fn f1_symmetric_and_bounded(a in "[abc ]{0,12}", b in "[abc ]{0,12}") {
            let ab = token_f1(&a, &b);
            let ba = token_f1(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let mut ta: Vec<_> = a.split_whitespace().collect();
            let mut tb: Vec<_> = b.split_whitespace().collect();
            ta.sort();
            tb.sort();
            prop_assert_eq!(ab == 1.0, ta == tb);
        }
    }
}
