//! Evaluation items, sessions and blinded task assignment.

use crate::HumanEvalError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Likert,
    AbPair,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Coherence,
    Empathy,
    Informative,
    Fluency,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [
        Aspect::Coherence,
        Aspect::Empathy,
        Aspect::Informative,
        Aspect::Fluency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::Coherence => "coherence",
            Aspect::Empathy => "empathy",
            Aspect::Informative => "informative",
            Aspect::Fluency => "fluency",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aspect {
    type Err = HumanEvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| HumanEvalError::Invalid(format!("unknown aspect '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub context: String,
    /// System id to response text.
    pub candidates: BTreeMap<String, String>,
    pub mode: Mode,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), HumanEvalError> {
        let n = self.candidates.len();
        let ok = match self.mode {
            Mode::Likert => n >= 1,
            Mode::AbPair => n == 2,
        };
        if ok {
            Ok(())
        } else {
            Err(HumanEvalError::Invalid(format!(
                "item {} has {n} candidates for {:?}",
                self.item_id, self.mode
            )))
        }
    }
}

/// Server-side task. Likert items yield one task per candidate; A/B items
/// one task per pair. `shown` lists system ids in presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub item_id: String,
    pub annotator_id: String,
    pub mode: Mode,
    pub shown: Vec<String>,
    /// A/B only: the presented order is the reverse of sorted system order.
    pub swapped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub blinding_seed: u64,
    pub annotators: Vec<String>,
    pub items: Vec<EvalItem>,
    pub tasks: Vec<Task>,
}

/// What a client sees: no system ids, only the slot order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub mode: Mode,
    pub context: String,
    pub responses: Vec<String>,
    pub answered: bool,
}

pub fn create_session(
    session_id: &str,
    items: Vec<EvalItem>,
    annotators: Vec<String>,
    blinding_seed: u64,
) -> Result<Session, HumanEvalError> {
    if items.is_empty() {
        return Err(HumanEvalError::Invalid("session has no items".into()));
    }
    if annotators.is_empty() {
        return Err(HumanEvalError::Invalid("session has no annotators".into()));
    }
    let mut seen = BTreeSet::new();
    for item in &items {
        item.validate()?;
        if !seen.insert(item.item_id.as_str()) {
            return Err(HumanEvalError::Invalid(format!("duplicate item {}", item.item_id)));
        }
    }
    if annotators.iter().collect::<BTreeSet<_>>().len() != annotators.len() {
        return Err(HumanEvalError::Invalid("duplicate annotator id".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(blinding_seed);
    let mut tasks = Vec::new();
    for item in &items {
        let systems: Vec<String> = item.candidates.keys().cloned().collect();
        for annotator in &annotators {
            match item.mode {
                Mode::Likert => {
                    for system in &systems {
                        tasks.push(Task {
                            task_id: format!("{session_id}-{:05}", tasks.len()),
                            item_id: item.item_id.clone(),
                            annotator_id: annotator.clone(),
                            mode: Mode::Likert,
                            shown: vec![system.clone()],
                            swapped: false,
                        });
                    }
                }
                Mode::AbPair => {
                    let swapped: bool = rng.gen();
                    let mut shown = systems.clone();
                    if swapped {
                        shown.reverse();
                    }
                    tasks.push(Task {
                        task_id: format!("{session_id}-{:05}", tasks.len()),
                        item_id: item.item_id.clone(),
                        annotator_id: annotator.clone(),
                        mode: Mode::AbPair,
                        shown,
                        swapped,
                    });
                }
            }
        }
    }
    Ok(Session {
        session_id: session_id.to_string(),
        blinding_seed,
        annotators,
        items,
        tasks,
    })
}

impl Session {
    pub fn task(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn item(&self, item_id: &str) -> Option<&EvalItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn view(&self, task: &Task, answered: bool) -> TaskView {
        let item = self.item(&task.item_id).expect("task refers to a session item");
        TaskView {
            task_id: task.task_id.clone(),
            mode: task.mode,
            context: item.context.clone(),
            responses: task.shown.iter().map(|s| item.candidates[s].clone()).collect(),
            answered,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ab_item(id: &str) -> EvalItem {
        EvalItem {
            item_id: id.into(),
            context: format!("speaker: context {id}"),
            candidates: BTreeMap::from([
                ("cfeg".to_string(), format!("reply one {id}")),
                ("base".to_string(), format!("reply two {id}")),
            ]),
            mode: Mode::AbPair,
        }
    }

    fn annotators(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ann{i}")).collect()
    }

    #[test]
    fn one_item_one_annotator() {
        let s = create_session("s", vec![ab_item("i")], annotators(1), 0).unwrap();
        assert_eq!(s.tasks.len(), 1);
    }

    #[test]
    fn two_hundred_by_three() {
        let items = (0..200).map(|i| ab_item(&format!("i{i}"))).collect();
        let s = create_session("s", items, annotators(3), 7).unwrap();
        assert_eq!(s.tasks.len(), 600);
    }

    #[test]
    fn left_assignment_is_fair() {
        // 1000 tasks; fair coin sd = sqrt(1000 * 0.25) ≈ 15.8
        let items = (0..1000).map(|i| ab_item(&format!("i{i}"))).collect();
        let s = create_session("s", items, annotators(1), 42).unwrap();
        let left_cfeg = s.tasks.iter().filter(|t| t.shown[0] == "cfeg").count() as f64;
        assert!((left_cfeg - 500.0).abs() <= 3.0 * 250f64.sqrt(), "{left_cfeg}");
        let again = create_session("s", (0..1000).map(|i| ab_item(&format!("i{i}"))).collect(), annotators(1), 42).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn likert_task_per_candidate() {
        let mut item = ab_item("i");
        item.mode = Mode::Likert;
        let s = create_session("s", vec![item], annotators(2), 0).unwrap();
        assert_eq!(s.tasks.len(), 4);
    }

    #[test]
    fn rejects_bad_items() {
        let mut item = ab_item("i");
        item.candidates.insert("third".into(), "x".into());
        assert!(create_session("s", vec![item], annotators(1), 0).is_err());
        assert!(create_session("s", vec![], annotators(1), 0).is_err());
        assert!(create_session("s", vec![ab_item("i"), ab_item("i")], annotators(1), 0).is_err());
    }

    #[test]
    fn view_hides_system_ids() {
        let s = create_session("s", vec![ab_item("i")], annotators(1), 3).unwrap();
        let json = serde_json::to_string(&s.view(&s.tasks[0], false)).unwrap();
        assert!(!json.contains("cfeg") && !json.contains("base"));
    }
}
