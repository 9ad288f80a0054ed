//! A/B win rates and inter-annotator agreement.

use crate::session::{Aspect, Mode};
use crate::store::AnnotationRecord;
use crate::HumanEvalError;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub aspect: Aspect,
    /// Percentages; the three sum to 100.
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
    pub n: usize,
}

/// Outcomes from `system`'s point of view against `opponent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbTable {
    pub system: String,
    pub opponent: String,
    pub rows: Vec<AbRow>,
}

pub fn ab_results(
    records: &[AnnotationRecord],
    system: &str,
    opponent: &str,
) -> Result<AbTable, HumanEvalError> {
    let pair: BTreeSet<&str> = [system, opponent].into();
    let relevant: Vec<&AnnotationRecord> = records
        .iter()
        .filter(|r| r.mode == Mode::AbPair)
        .filter(|r| r.shown.iter().map(String::as_str).collect::<BTreeSet<_>>() == pair)
        .collect();
    let mut rows = Vec::new();
    for aspect in Aspect::ALL {
        let (mut win, mut lose, mut tie) = (0usize, 0usize, 0usize);
        for r in &relevant {
            match r.preferred_system(aspect) {
                Some(Some(s)) if s == system => win += 1,
                Some(Some(_)) => lose += 1,
                Some(None) => tie += 1,
                None => {}
            }
        }
        let n = win + lose + tie;
        if n == 0 {
            continue;
        }
        let pct = |k: usize| 100.0 * k as f64 / n as f64;
        rows.push(AbRow {
            aspect,
            win: pct(win),
            lose: pct(lose),
            tie: pct(tie),
            n,
        });
    }
    if rows.is_empty() {
        return Err(HumanEvalError::EmptyPairing(format!("{system} vs {opponent}")));
    }
    Ok(AbTable {
        system: system.to_string(),
        opponent: opponent.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KappaMethod {
    Cohen,
    Fleiss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub method: KappaMethod,
    pub kappa: f64,
    pub p_o: f64,
    pub p_e: f64,
    pub n_items: usize,
    pub n_raters: usize,
}

/// item id -> annotator id -> categorical label.
pub type Ratings = BTreeMap<String, BTreeMap<String, String>>;

/// Cohen's kappa for two annotators, Fleiss' for more. Only items rated by
/// every annotator count.
pub fn kappa(ratings: &Ratings) -> Result<AgreementStats, HumanEvalError> {
    let raters: BTreeSet<&str> = ratings
        .values()
        .flat_map(|m| m.keys().map(String::as_str))
        .collect();
    if raters.len() < 2 {
        return Err(HumanEvalError::InsufficientOverlap(format!(
            "{} annotator(s)",
            raters.len()
        )));
    }
    let shared: Vec<&BTreeMap<String, String>> = ratings
        .values()
        .filter(|m| m.len() == raters.len())
        .collect();
    if shared.is_empty() {
        return Err(HumanEvalError::InsufficientOverlap(
            "no item rated by every annotator".into(),
        ));
    }
    let n = shared.len() as f64;
    let (method, p_o, p_e): (KappaMethod, f64, f64) = if raters.len() == 2 {
        let agree = shared
            .iter()
            .filter(|m| {
                let mut v = m.values();
                v.next() == v.next()
            })
            .count() as f64;
        let mut marg: [BTreeMap<&str, f64>; 2] = Default::default();
        for m in &shared {
            for (i, label) in m.values().enumerate() {
                *marg[i].entry(label.as_str()).or_default() += 1.0 / n;
            }
        }
        let p_e = marg[0]
            .iter()
            .map(|(c, p)| p * marg[1].get(c).copied().unwrap_or(0.0))
            .sum();
        (KappaMethod::Cohen, agree / n, p_e)
    } else {
        let m = raters.len() as f64;
        let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
        let mut p_sum = 0.0;
        for item in &shared {
            let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
            for label in item.values() {
                *counts.entry(label.as_str()).or_default() += 1.0;
                *totals.entry(label.as_str()).or_default() += 1.0;
            }
            let sq: f64 = counts.values().map(|c| c * c).sum();
            p_sum += (sq - m) / (m * (m - 1.0));
        }
        let p_e = totals.values().map(|t| (t / (n * m)).powi(2)).sum();
        (KappaMethod::Fleiss, p_sum / n, p_e)
    };
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        if (1.0 - p_o).abs() < 1e-12 {
            1.0
        } else {
            return Err(HumanEvalError::DegenerateKappa);
        }
    } else {
        (p_o - p_e) / (1.0 - p_e)
    };
    Ok(AgreementStats {
        method,
        kappa,
        p_o,
        p_e,
        n_items: shared.len(),
        n_raters: raters.len(),
    })
}

/// Likert scores for one aspect as five categories, keyed by item and
/// rated system.
pub fn likert_ratings(records: &[AnnotationRecord], aspect: Aspect) -> Ratings {
    let mut out = Ratings::new();
    for r in records.iter().filter(|r| r.mode == Mode::Likert) {
        if let Some(score) = r.scores.get(&aspect) {
            out.entry(format!("{}/{}", r.item_id, r.shown[0]))
                .or_default()
                .insert(r.annotator_id.clone(), score.to_string());
        }
    }
    out
}

/// De-blinded A/B outcomes for one aspect: the preferred system or "tie".
pub fn ab_ratings(records: &[AnnotationRecord], aspect: Aspect) -> Ratings {
    let mut out = Ratings::new();
    for r in records.iter().filter(|r| r.mode == Mode::AbPair) {
        if let Some(p) = r.preferred_system(aspect) {
            out.entry(r.item_id.clone())
                .or_default()
                .insert(r.annotator_id.clone(), p.unwrap_or("tie").to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub mode: Mode,
    pub aspect: Aspect,
    pub stats: AgreementStats,
}

/// Every (mode, aspect) breakdown for which kappa is defined.
pub fn agreement(records: &[AnnotationRecord]) -> Vec<AgreementRow> {
    let mut rows = Vec::new();
    for (mode, f) in [
        (Mode::Likert, likert_ratings as fn(&[AnnotationRecord], Aspect) -> Ratings),
        (Mode::AbPair, ab_ratings),
    ] {
        for aspect in Aspect::ALL {
            if let Ok(stats) = kappa(&f(records, aspect)) {
                rows.push(AgreementRow { mode, aspect, stats });
            }
        }
    }
    rows
}
