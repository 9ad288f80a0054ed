//! Automatic metrics and the per-strategy comparison table.

use crate::cause::token_f1;
use crate::chat::{ChatBackend, ChatMessage, ChatRequest};
use crate::corpus::{Dialogue, EmotionLabel};
use crate::orchestrator::{PredictionRecord, Strategy};
use crate::templates::ParsedResponse;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

/// Added to the numerator of a zero modified precision.
pub const BLEU_EPSILON: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {predicted} predictions vs {gold} gold")]
    LengthMismatch { predicted: usize, gold: usize },
    #[error("n must be >= 1")]
    ZeroOrder,
    #[error("no {0}-grams in any response")]
    NoNgrams(usize),
    #[error("strategies were evaluated on different gold sets ({0})")]
    GoldMismatch(String),
    #[error("no predictions to report")]
    Empty,
}

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn emotion_accuracy(parsed: &[ParsedResponse], gold: &[EmotionLabel]) -> Result<f64, MetricError> {
    if parsed.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            predicted: parsed.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = parsed
        .iter()
        .zip(gold)
        .filter(|(p, g)| {
            p.emotion
                .as_deref()
                .is_some_and(|e| e.trim().to_lowercase() == g.as_str().to_lowercase())
        })
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n)
}

pub fn distinct_n<S: AsRef<str>>(responses: &[S], n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let tokenized: Vec<Vec<String>> = responses.iter().map(|r| tokenize(r.as_ref())).collect();
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for toks in &tokenized {
        for g in ngrams(toks, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricError::NoNgrams(n));
    }
    Ok(unique.len() as f64 / total as f64)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_default() += 1;
    }
    m
}

/// Sentence BLEU against one reference: uniform weights over orders 1..=n,
/// clipped precisions, epsilon smoothing of zero matches and brevity penalty.
pub fn bleu_n(hypothesis: &str, reference: &str, n: usize) -> Result<f64, MetricError> {
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let hyp = tokenize(hypothesis);
    let rf = tokenize(reference);
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let h = counts(&hyp, k);
        let r = counts(&rf, k);
        let matched: usize = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(k - 1).max(1);
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (num / total as f64).ln();
    }
    let (c, r) = (hyp.len() as f64, rf.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

/// Example-level mean of [`bleu_n`].
pub fn mean_sentence_bleu<S: AsRef<str>>(pairs: &[(S, S)], n: usize) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (h, r) in pairs {
        sum += bleu_n(h.as_ref(), r.as_ref(), n)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// exp of the token-weighted mean negative log-likelihood. `None` when
/// there are no tokens at all.
pub fn perplexity_from_logprobs(per_example: &[Vec<f64>]) -> Option<f64> {
    let tokens: usize = per_example.iter().map(Vec::len).sum();
    if tokens == 0 {
        return None;
    }
    let nll: f64 = -per_example.iter().flatten().sum::<f64>();
    Some((nll / tokens as f64).exp())
}

/// Scores each gold response conditioned on its prompt. Absent when the
/// backend returns no logprobs or fails.
pub fn perplexity(
    items: &[(String, String)],
    backend: &dyn ChatBackend,
    model: &str,
) -> Option<f64> {
    let mut per_example = Vec::with_capacity(items.len());
    for (prompt, gold) in items {
        let req = ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage::user(prompt.clone()), ChatMessage::assistant(gold.clone())],
            temperature: 0.0,
            max_tokens: 0,
            logprobs: Some(true),
        };
        match backend.complete(&req) {
            Ok(resp) => match resp.token_logprobs {
                Some(lp) => per_example.push(lp),
                None => {
                    log::warn!("{} returned no logprobs; PPL omitted", backend.describe());
                    return None;
                }
            },
            Err(e) => {
                log::warn!("PPL scoring failed: {e}; PPL omitted");
                return None;
            }
        }
    }
    perplexity_from_logprobs(&per_example)
}

/// One strategy's scores on one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyScores {
    pub strategy: Strategy,
    pub acc: f64,
    pub ppl: Option<f64>,
    pub dist1: f64,
    pub dist2: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub cause_f1: Option<f64>,
    pub n_examples: usize,
}

/// Scores predictions against the gold dialogues (same ids, same order).
/// `gold_causes` maps dialogue id to annotated cause text; cause F1 is
/// reported only when some prediction carries a cause.
pub fn score_strategy(
    records: &[PredictionRecord],
    gold: &[Dialogue],
    gold_causes: &HashMap<String, String>,
    ppl: Option<f64>,
) -> Result<StrategyScores, MetricError> {
    let strategy = records.first().ok_or(MetricError::Empty)?.strategy;
    if records.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            predicted: records.len(),
            gold: gold.len(),
        });
    }
    if let Some((r, d)) = records.iter().zip(gold).find(|(r, d)| r.dialogue_id != d.id) {
        return Err(MetricError::GoldMismatch(format!(
            "{strategy}: prediction {} aligned with gold {}",
            r.dialogue_id, d.id
        )));
    }
    let parsed: Vec<ParsedResponse> = records.iter().map(|r| r.parsed.clone()).collect();
    let labels: Vec<EmotionLabel> = gold.iter().map(|d| d.emotion.clone()).collect();
    let acc = emotion_accuracy(&parsed, &labels)?;
    let responses: Vec<&str> = parsed.iter().map(|p| p.response.as_str()).collect();
    // A run where nothing produced an n-gram has no diversity to speak of.
    let dist = |n| match distinct_n(&responses, n) {
        Ok(v) => Ok(v),
        Err(MetricError::NoNgrams(_)) => Ok(0.0),
        Err(e) => Err(e),
    };
    let pairs: Vec<(&str, &str)> = parsed
        .iter()
        .zip(gold)
        .map(|(p, d)| (p.response.as_str(), d.gold_response.as_str()))
        .collect();
    let cause_f1 = if parsed.iter().any(|p| p.cause_text.is_some()) {
        let scored: Vec<f64> = parsed
            .iter()
            .zip(gold)
            .filter_map(|(p, d)| {
                gold_causes
                    .get(&d.id)
                    .map(|g| token_f1(p.cause_text.as_deref().unwrap_or(""), g))
            })
            .collect();
        (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
    } else {
        None
    };
    Ok(StrategyScores {
        strategy,
        acc,
        ppl,
        dist1: dist(1)?,
        dist2: dist(2)?,
        bleu2: mean_sentence_bleu(&pairs, 2)?,
        bleu4: mean_sentence_bleu(&pairs, 4)?,
        cause_f1,
        n_examples: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: Strategy,
    pub acc: f64,
    pub ppl: Option<f64>,
    pub dist1: f64,
    pub dist2: f64,
    pub bleu2: f64,
    pub bleu4: f64,
    pub cause_f1: Option<f64>,
    pub n_examples: usize,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Mean of the values that are present in every seed; absent otherwise.
fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    if xs.iter().all(Option::is_some) {
        Some(mean(xs.iter().flatten().copied()))
    } else {
        None
    }
}

/// Averages per-seed scores into one row per strategy, in strategy order.
/// Every run must cover the same number of examples.
pub fn build_report(runs: &[StrategyScores]) -> Result<MetricReport, MetricError> {
    if runs.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = runs[0].n_examples;
    if let Some(bad) = runs.iter().find(|r| r.n_examples != n) {
        return Err(MetricError::GoldMismatch(format!(
            "{} has {} examples, expected {n}",
            bad.strategy, bad.n_examples
        )));
    }
    let mut grouped: BTreeMap<Strategy, Vec<&StrategyScores>> = BTreeMap::new();
    for r in runs {
        grouped.entry(r.strategy).or_default().push(r);
    }
    let rows = grouped
        .into_iter()
        .map(|(strategy, g)| ReportRow {
            strategy,
            acc: mean(g.iter().map(|r| r.acc)),
            ppl: mean_opt(&g.iter().map(|r| r.ppl).collect::<Vec<_>>()),
            dist1: mean(g.iter().map(|r| r.dist1)),
            dist2: mean(g.iter().map(|r| r.dist2)),
            bleu2: mean(g.iter().map(|r| r.bleu2)),
            bleu4: mean(g.iter().map(|r| r.bleu4)),
            cause_f1: mean_opt(&g.iter().map(|r| r.cause_f1).collect::<Vec<_>>()),
            n_examples: n,
            n_seeds: g.len(),
        })
        .collect();
    Ok(MetricReport { rows })
}

impl MetricReport {
    /// Aligned plain-text table. Dist columns appear both as fractions and
    /// scaled by 100.
    pub fn render_text(&self) -> String {
        let header = [
            "strategy", "acc", "ppl", "dist1", "dist2", "dist1x100", "dist2x100", "bleu2", "bleu4",
            "cause_f1", "n_examples", "n_seeds",
        ];
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.strategy.to_string(),
                format!("{:.4}", r.acc),
                opt(r.ppl),
                format!("{:.4}", r.dist1),
                format!("{:.4}", r.dist2),
                format!("{:.2}", r.dist1 * 100.0),
                format!("{:.2}", r.dist2 * 100.0),
                format!("{:.4}", r.bleu2),
                format!("{:.4}", r.bleu4),
                opt(r.cause_f1),
                r.n_examples.to_string(),
                r.n_seeds.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
