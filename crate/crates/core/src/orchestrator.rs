//! Batch inference for each strategy of the comparison matrix.

use crate::backend::{BackendError, RetryPolicy};
use crate::cause::CauseSpan;
use crate::chat::{ChatBackend, ChatMessage, ChatRequest, ChatResponse};
use crate::corpus::{context_string, Dialogue};
use crate::digest::sha256_hex;
use crate::knowledge::{verbalize, KnowledgeRecord, Pronoun};
use crate::metrics::tokenize;
use crate::par;
use crate::templates::{
    build_prompt, compose_prompt, parse_response, sample_demonstrations, DemoBlock,
    ParsedResponse, PromptVariant, TargetVariant, TemplateError, INS_PLAIN,
};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, RwLock};
use std::time::Instant;
use thiserror::Error;

/// Stage-one question of the two-call situation-reasoning baseline.
pub const COT_SITUATION_QUESTION: &str =
    "Don't rush to reply yet, what may be the user's emotion, and what may be the situation?";
/// Stage-two instruction of the two-call baseline.
pub const COT_REPLY_INSTRUCTION: &str =
    "Combine your thoughts with the dialogue context and give your response.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrchestratorError {
    #[error("strategy {strategy} is missing {what} for dialogues: {ids:?}")]
    MissingInputs {
        strategy: Strategy,
        what: &'static str,
        ids: Vec<String>,
    },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("invalid generation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Base,
    Icl,
    Cot,
    Ckg,
    KgEcpe,
    Cfeg,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Base,
        Strategy::Icl,
        Strategy::Cot,
        Strategy::Ckg,
        Strategy::KgEcpe,
        Strategy::Cfeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Icl => "icl",
            Strategy::Cot => "cot",
            Strategy::Ckg => "ckg",
            Strategy::KgEcpe => "kg_ecpe",
            Strategy::Cfeg => "cfeg",
        }
    }

    /// Backend calls issued per dialogue.
    pub fn calls_per_dialogue(self) -> usize {
        if self == Strategy::Cot {
            2
        } else {
            1
        }
    }

    /// Template the raw output is parsed against.
    pub fn parse_variant(self, cfeg_target: TargetVariant) -> TargetVariant {
        match self {
            Strategy::Base | Strategy::Icl | Strategy::Cot => TargetVariant::R1,
            Strategy::Ckg | Strategy::KgEcpe => TargetVariant::R2,
            Strategy::Cfeg => cfeg_target,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| OrchestratorError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub parallelism: usize,
    pub seed: u64,
    pub retry: RetryPolicy,
    /// Target template the cfeg strategy's output is parsed against.
    pub cfeg_target: TargetVariant,
    pub subject: Pronoun,
    pub icl_k: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model_name: "default".into(),
            temperature: 0.0,
            max_tokens: 256,
            parallelism: 4,
            seed: 0,
            retry: RetryPolicy::default(),
            cfeg_target: TargetVariant::R2la,
            subject: Pronoun::He,
            icl_k: 5,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(self.temperature >= 0.0) {
            return Err(OrchestratorError::Config("temperature must be >= 0".into()));
        }
        if self.parallelism == 0 {
            return Err(OrchestratorError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

/// Similarity between a query dialogue and a candidate demonstration.
pub trait Similarity: Sync {
    fn describe(&self) -> String;
    fn score(&self, query: &Dialogue, candidate: &Dialogue) -> f64;
}

/// Token-set Jaccard over context strings. Not the similarity function of
/// any published baseline; it is the offline fallback.
#[derive(Default)]
pub struct LexicalJaccard {
    cache: RwLock<HashMap<String, Arc<HashSet<String>>>>,
}

impl LexicalJaccard {
    fn tokens(&self, d: &Dialogue) -> Arc<HashSet<String>> {
        if let Some(t) = self.cache.read().expect("cache lock").get(&d.id) {
            return t.clone();
        }
        let set: Arc<HashSet<String>> = Arc::new(tokenize(&context_string(d)).into_iter().collect());
        self.cache
            .write()
            .expect("cache lock")
            .insert(d.id.clone(), set.clone());
        set
    }
}

/// |A ∩ B| / |A ∪ B|, zero when both are empty.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl Similarity for LexicalJaccard {
    fn describe(&self) -> String {
        "lexical-jaccard".into()
    }

    fn score(&self, query: &Dialogue, candidate: &Dialogue) -> f64 {
        jaccard(&self.tokens(query), &self.tokens(candidate))
    }
}

/// Top-k pool dialogues by similarity to `query`, ties broken by id.
pub fn similar_demos(
    query: &Dialogue,
    train: &[Dialogue],
    k: usize,
    similarity: &dyn Similarity,
) -> Result<DemoBlock, TemplateError> {
    let mut scored: Vec<(f64, &Dialogue)> = train
        .iter()
        .filter(|d| d.id != query.id)
        .map(|d| (similarity.score(query, d), d))
        .collect();
    if scored.len() < k {
        return Err(TemplateError::InsufficientPool {
            needed: k,
            available: scored.len(),
        });
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let top: Vec<&Dialogue> = scored.into_iter().take(k).map(|(_, d)| d).collect();
    Ok(DemoBlock::render(&top))
}

/// Precomputed per-dialogue inputs shared by all strategies.
pub struct StrategyInputs<'a> {
    pub train: &'a [Dialogue],
    pub causes: &'a HashMap<String, CauseSpan>,
    pub knowledge: &'a HashMap<String, KnowledgeRecord>,
    pub similarity: &'a dyn Similarity,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageCounters {
    pub calls: u32,
    pub attempts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub strategy: Strategy,
    pub prompt_digest: String,
    pub raw_text: String,
    pub parsed: ParsedResponse,
    /// Wall-clock time; kept out of prediction files so they stay
    /// reproducible.
    #[serde(skip)]
    pub latency_ms: u64,
    pub usage: UsageCounters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct StrategyRun {
    pub records: Vec<PredictionRecord>,
    /// Dialogue ids whose generation failed after retries.
    pub gaps: Vec<String>,
}

impl StrategyRun {
    pub fn backend_calls(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.usage.attempts)).sum()
    }
}

fn check_inputs(
    strategy: Strategy,
    split: &[Dialogue],
    inputs: &StrategyInputs<'_>,
) -> Result<(), OrchestratorError> {
    let need_cause = matches!(strategy, Strategy::KgEcpe | Strategy::Cfeg);
    let need_kg = matches!(strategy, Strategy::Ckg | Strategy::KgEcpe | Strategy::Cfeg);
    let missing = |pred: &dyn Fn(&Dialogue) -> bool| -> Vec<String> {
        split.iter().filter(|d| pred(d)).map(|d| d.id.clone()).collect()
    };
    if need_cause {
        let ids = missing(&|d| !inputs.causes.contains_key(&d.id));
        if !ids.is_empty() {
            return Err(OrchestratorError::MissingInputs {
                strategy,
                what: "cause spans",
                ids,
            });
        }
    }
    if need_kg {
        let ids = missing(&|d| !inputs.knowledge.contains_key(&d.id));
        if !ids.is_empty() {
            return Err(OrchestratorError::MissingInputs {
                strategy,
                what: "knowledge bundles",
                ids,
            });
        }
    }
    Ok(())
}

/// The single-turn prompt a strategy sends for `dialogue` (for cot, the
/// dialogue prompt the stage-one question is appended to).
pub fn strategy_prompt(
    strategy: Strategy,
    dialogue: &Dialogue,
    inputs: &StrategyInputs<'_>,
    config: &GenerationConfig,
) -> Result<String, OrchestratorError> {
    let kg = |cause_oriented: bool| {
        inputs.knowledge.get(&dialogue.id).map(|k| {
            let bundle = if cause_oriented {
                &k.cause_oriented
            } else {
                &k.last_utterance
            };
            verbalize(bundle, config.subject)
        })
    };
    let missing = |what| OrchestratorError::MissingInputs {
        strategy,
        what,
        ids: vec![dialogue.id.clone()],
    };
    Ok(match strategy {
        Strategy::Base | Strategy::Cot => build_prompt(PromptVariant::P1, dialogue, None, None)?,
        Strategy::Icl => {
            let demos = similar_demos(dialogue, inputs.train, config.icl_k, inputs.similarity)?;
            compose_prompt(INS_PLAIN, Some(&demos), dialogue, None)
        }
        Strategy::Ckg => {
            let k = kg(false).ok_or_else(|| missing("knowledge bundles"))?;
            build_prompt(PromptVariant::P2kg, dialogue, Some(&k), None)?
        }
        Strategy::KgEcpe => {
            let k = kg(true).ok_or_else(|| missing("knowledge bundles"))?;
            build_prompt(PromptVariant::P2kg, dialogue, Some(&k), None)?
        }
        Strategy::Cfeg => {
            let k = kg(true).ok_or_else(|| missing("knowledge bundles"))?;
            let demos = sample_demonstrations(inputs.train, &dialogue.id, config.seed)?;
            build_prompt(PromptVariant::P2kgE, dialogue, Some(&k), Some(&demos))?
        }
    })
}

fn request(config: &GenerationConfig, messages: Vec<ChatMessage>) -> ChatRequest {
    ChatRequest {
        model: config.model_name.clone(),
        messages,
        temperature: config.temperature,
        max_tokens: config.max_tokens,
        logprobs: None,
    }
}

fn call(
    backend: &dyn ChatBackend,
    req: &ChatRequest,
    retry: RetryPolicy,
    usage: &mut UsageCounters,
) -> Result<ChatResponse, BackendError> {
    let (res, attempts) = retry.run(|| backend.complete(req));
    usage.calls += 1;
    usage.attempts += attempts;
    if let Ok(resp) = &res {
        if let Some(u) = resp.usage {
            usage.prompt_tokens += u.prompt_tokens;
            usage.completion_tokens += u.completion_tokens;
        }
    }
    res
}

/// Runs one strategy over `split`. Backend failures are recorded per
/// dialogue and never abort the batch; records come back in input order.
pub fn run_strategy(
    strategy: Strategy,
    split: &[Dialogue],
    config: &GenerationConfig,
    inputs: &StrategyInputs<'_>,
    backend: &dyn ChatBackend,
) -> Result<StrategyRun, OrchestratorError> {
    config.validate()?;
    check_inputs(strategy, split, inputs)?;
    // Render every prompt before the first call so template errors surface
    // without spending backend requests.
    let prompts = split
        .iter()
        .map(|d| strategy_prompt(strategy, d, inputs, config))
        .collect::<Result<Vec<_>, _>>()?;
    let variant = strategy.parse_variant(config.cfeg_target);

    let records = par::map(split, config.parallelism, |i, d| {
        let prompt = &prompts[i];
        let started = Instant::now();
        let mut usage = UsageCounters::default();
        let outcome = if strategy == Strategy::Cot {
            let first = vec![ChatMessage::user(format!("{prompt} {COT_SITUATION_QUESTION}"))];
            call(backend, &request(config, first.clone()), config.retry, &mut usage).and_then(
                |thoughts| {
                    let mut second = first;
                    second.push(ChatMessage::assistant(thoughts.text));
                    second.push(ChatMessage::user(COT_REPLY_INSTRUCTION));
                    call(backend, &request(config, second), config.retry, &mut usage)
                },
            )
        } else {
            let msgs = vec![ChatMessage::user(prompt.clone())];
            call(backend, &request(config, msgs), config.retry, &mut usage)
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        let (raw_text, error) = match outcome {
            Ok(resp) => (resp.text, None),
            Err(e) => {
                log::warn!("{strategy} failed for {}: {e}", d.id);
                (String::new(), Some(e.to_string()))
            }
        };
        let parsed = if error.is_some() {
            ParsedResponse::unparsed("")
        } else {
            parse_response(&raw_text, variant)
        };
        PredictionRecord {
            dialogue_id: d.id.clone(),
            strategy,
            prompt_digest: sha256_hex(prompt),
            raw_text,
            parsed,
            latency_ms,
            usage,
            error,
        }
    });
    let gaps = records
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.dialogue_id.clone())
        .collect();
    Ok(StrategyRun { records, gaps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::{Recording, ScriptedChatBackend};
    use crate::corpus::tests::dialogue;
    use crate::knowledge::{CommonsenseBundle, KnowledgeMode, Relation};
    use std::time::Duration;

    fn bundle(mode: KnowledgeMode, tag: &str) -> CommonsenseBundle {
        CommonsenseBundle::new(
            "src",
            mode,
            Relation::ALL
                .into_iter()
                .map(|r| (r, format!("{tag}{}", r.wire_name().to_lowercase())))
                .collect(),
        )
        .unwrap()
    }

    struct World {
        train: Vec<Dialogue>,
        test: Vec<Dialogue>,
        causes: HashMap<String, CauseSpan>,
        knowledge: HashMap<String, KnowledgeRecord>,
    }

    fn world(n_test: usize) -> World {
        let train: Vec<Dialogue> = (0..8)
            .map(|i| dialogue(&format!("tr{i}"), "sad", &[&format!("train words {i}")], "ok"))
            .collect();
        let test: Vec<Dialogue> = (0..n_test)
            .map(|i| dialogue(&format!("te{i:02}"), "joyful", &[&format!("I won prize {i}")], "nice"))
            .collect();
        let causes = test
            .iter()
            .map(|d| (d.id.clone(), CauseSpan::whole_utterance(d, 0).unwrap()))
            .collect();
        let knowledge = test
            .iter()
            .map(|d| {
                (
                    d.id.clone(),
                    KnowledgeRecord {
                        dialogue_id: d.id.clone(),
                        cause_oriented: bundle(KnowledgeMode::CauseOriented, "c-"),
                        last_utterance: bundle(KnowledgeMode::LastUtterance, "l-"),
                    },
                )
            })
            .collect();
        World {
            train,
            test,
            causes,
            knowledge,
        }
    }

    fn config() -> GenerationConfig {
        GenerationConfig {
            retry: RetryPolicy::no_delay(3),
            parallelism: 3,
            ..Default::default()
        }
    }

    fn echo() -> Recording<ScriptedChatBackend> {
        Recording::new(
            ScriptedChatBackend::new(|_| {
                Ok(ChatResponse::text(
                    "He feels joyful because he says \"I won\". I'm glad to hear that. I will sympathize with him: congrats",
                ))
            })
            .with_delay(Duration::from_millis(2)),
        )
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_value(s).unwrap(), s.as_str());
        }
        assert!("zero_shot".parse::<Strategy>().is_err());
    }

    #[test]
    fn call_counts_and_order() {
        let w = world(7);
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        for s in Strategy::ALL {
            let backend = echo();
            let run = run_strategy(s, &w.test, &config(), &inputs, &backend).unwrap();
            assert_eq!(backend.calls(), w.test.len() * s.calls_per_dialogue(), "{s}");
            assert_eq!(run.backend_calls() as usize, backend.calls());
            let ids: Vec<_> = run.records.iter().map(|r| r.dialogue_id.as_str()).collect();
            let want: Vec<_> = w.test.iter().map(|d| d.id.as_str()).collect();
            assert_eq!(ids, want);
            assert!(backend.high_water() <= 3);
            assert!(run.gaps.is_empty());
        }
    }

    #[test]
    fn empty_split_yields_no_records() {
        let w = world(0);
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        let backend = echo();
        for s in Strategy::ALL {
            let run = run_strategy(s, &[], &config(), &inputs, &backend).unwrap();
            assert!(run.records.is_empty());
        }
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn prompts_per_strategy() {
        let w = world(1);
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        let d = &w.test[0];
        let cfg = config();
        let p = |s| strategy_prompt(s, d, &inputs, &cfg).unwrap();
        assert!(p(Strategy::Base).starts_with("Analyze emotion"));
        assert_eq!(p(Strategy::Base), p(Strategy::Cot));
        assert!(p(Strategy::Icl).contains("I'll give you five examples."));
        assert!(p(Strategy::Ckg).contains("In this Dialogue, He tends l-xintent"));
        assert!(p(Strategy::KgEcpe).contains("In this Dialogue, He tends c-xintent"));
        let cfeg = p(Strategy::Cfeg);
        assert!(cfeg.starts_with("Analysis the emotion"));
        assert!(cfeg.contains("I'll give you five examples."));
        assert!(cfeg.contains("He tends c-xintent"));
    }

    #[test]
    fn cot_threads_first_reply_into_second_call() {
        let w = world(1);
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let backend = ScriptedChatBackend::new(move |r| {
            seen2.lock().unwrap().push(r.messages.clone());
            Ok(ChatResponse::text(format!("reply{}", r.messages.len())))
        });
        let run = run_strategy(Strategy::Cot, &w.test, &config(), &inputs, &backend).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[0][0].content.ends_with(COT_SITUATION_QUESTION));
        assert_eq!(seen[1][1], ChatMessage::assistant("reply1"));
        assert_eq!(seen[1][2], ChatMessage::user(COT_REPLY_INSTRUCTION));
        assert_eq!(run.records[0].raw_text, "reply3");
    }

    #[test]
    fn failures_are_recorded_not_fatal() {
        let w = world(4);
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        let backend = Recording::new(ScriptedChatBackend::new(|r| {
            if r.messages[0].content.contains("prize 2") {
                Err(BackendError::Timeout)
            } else {
                Ok(ChatResponse::text("He feels joyful. I will reply him: yay"))
            }
        }));
        let run = run_strategy(Strategy::Base, &w.test, &config(), &inputs, &backend).unwrap();
        assert_eq!(run.gaps, ["te02"]);
        assert_eq!(run.records.len(), 4);
        assert_eq!(run.records[2].usage.attempts, 3);
        assert!(run.records[2].error.is_some());
        assert!(run.records[0].parsed.parse_ok);
        assert_eq!(backend.calls(), 3 + 3);
    }

    #[test]
    fn missing_inputs_rejected_before_calls() {
        let mut w = world(3);
        w.knowledge.remove("te01");
        let sim = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &w.train,
            causes: &w.causes,
            knowledge: &w.knowledge,
            similarity: &sim,
        };
        let backend = echo();
        let err = run_strategy(Strategy::Cfeg, &w.test, &config(), &inputs, &backend).unwrap_err();
        assert!(matches!(err, OrchestratorError::MissingInputs { ref ids, .. } if ids == &["te01"]));
        assert_eq!(backend.calls(), 0);
        assert!(run_strategy(Strategy::Base, &w.test, &config(), &inputs, &backend).is_ok());
    }

    #[test]
    fn similar_demos_identical_first() {
        let mut pool: Vec<Dialogue> = (0..8)
            .map(|i| dialogue(&format!("p{i}"), "sad", &[&format!("zebra{i} quokka{i}")], "ok"))
            .collect();
        let q = dialogue("q", "sad", &["my dog ran away today"], "oh");
        pool.push(dialogue("z-copy", "sad", &["my dog ran away today"], "oh"));
        let block = similar_demos(&q, &pool, 5, &LexicalJaccard::default()).unwrap();
        assert_eq!(block.dialogue_ids[0], "z-copy");
        assert_eq!(block.dialogue_ids.len(), 5);
    }

    #[test]
    fn similar_demos_ties_by_id() {
        let pool: Vec<Dialogue> = ["e", "b", "d", "a", "c", "f"]
            .iter()
            .map(|id| dialogue(id, "sad", &[&format!("zz{id}")], "x"))
            .collect();
        let q = dialogue("q", "sad", &["unrelated"], "x");
        // every candidate shares only the role tag with the query
        let block = similar_demos(&q, &pool, 5, &LexicalJaccard::default()).unwrap();
        assert_eq!(block.dialogue_ids, ["a", "b", "c", "d", "e"]);
        assert!(similar_demos(&q, &pool[..3], 5, &LexicalJaccard::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = config();
        c.parallelism = 0;
        assert!(c.validate().is_err());
        c.parallelism = 1;
        c.temperature = -0.1;
        assert!(c.validate().is_err());
    }
}
