//! One function per pipeline stage. Each reads its inputs from the run
//! directory, writes its outputs there and records both in the manifest.

use crate::config::{BackendConfig, BackendKind, Config};
use crate::manifest::{StageOutcome, StageStatus, Workspace};
use crate::Failure;
use anyhow::{Context, Result};
use cfeg_core::backend::RetryPolicy;
use cfeg_core::cause::{
    annotate_all, CauseAnnotation, CauseBackend, CauseSpan, FixtureCauseBackend, HttpCauseBackend,
};
use cfeg_core::chat::{ChatBackend, FixtureChatBackend, HttpChatBackend};
use cfeg_core::corpus::{
    context_string, import_corpus, split_corpus, CanonicalRecord, Dialogue, LabelSet, Partition,
    SplitManifest,
};
use cfeg_core::digest::sha256_hex;
use cfeg_core::jsonl;
use cfeg_core::knowledge::{
    fetch_all, FixtureKnowledgeBackend, HttpKnowledgeBackend, KnowledgeBackend, KnowledgeRecord,
};
use cfeg_core::metrics::{build_report, perplexity, score_strategy, MetricReport, StrategyScores};
use cfeg_core::orchestrator::{
    run_strategy, strategy_prompt, GenerationConfig, LexicalJaccard, PredictionRecord, Strategy,
    StrategyInputs,
};
use cfeg_core::sft::{export_sft, SFT_MANIFEST, SFT_RECORDS};
use cfeg_core::templates::{RenderOptions, ValenceMap};
use cfeg_humaneval::{
    ab_results, agreement, create_session, serve, EvalItem, EvalService, Mode, ServerConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub const CORPUS: &str = "corpus.jsonl";
pub const REJECTS: &str = "rejects.jsonl";
pub const SPLIT: &str = "split.json";
pub const CAUSES: &str = "causes.jsonl";
pub const KNOWLEDGE: &str = "knowledge.jsonl";
pub const SCORES: &str = "scores.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn prompts_file(s: Strategy, seed: u64) -> String {
    format!("prompts/{s}.seed{seed}.jsonl")
}

pub fn predictions_file(s: Strategy, seed: u64) -> String {
    format!("predictions/{s}.seed{seed}.jsonl")
}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    Failure::Config(e.to_string()).into()
}

fn backend_err(e: impl std::fmt::Display) -> anyhow::Error {
    Failure::Backend(e.to_string()).into()
}

fn abbreviate(items: &[String]) -> String {
    const SHOWN: usize = 3;
    let mut s = items.iter().take(SHOWN).cloned().collect::<Vec<_>>().join("; ");
    if items.len() > SHOWN {
        s.push_str(&format!("; and {} more", items.len() - SHOWN));
    }
    s
}

fn timeout(b: &BackendConfig) -> Duration {
    Duration::from_secs(b.timeout_secs)
}

pub fn chat_backend(b: &BackendConfig) -> Result<Box<dyn ChatBackend>> {
    Ok(match b.backend {
        BackendKind::Http => Box::new(HttpChatBackend::new(
            b.url.clone().expect("validated"),
            timeout(b),
            b.token.clone(),
        )),
        BackendKind::Fixture => {
            Box::new(FixtureChatBackend::load(b.fixture.as_ref().expect("validated")).map_err(config_err)?)
        }
        BackendKind::None => return Err(config_err("chat backend is \"none\"")),
    })
}

fn cause_backend(b: &BackendConfig) -> Result<Box<dyn CauseBackend>> {
    Ok(match b.backend {
        BackendKind::Http => Box::new(HttpCauseBackend::new(
            b.url.clone().expect("validated"),
            timeout(b),
            b.token.clone(),
        )),
        BackendKind::Fixture => {
            Box::new(FixtureCauseBackend::load(b.fixture.as_ref().expect("validated")).map_err(config_err)?)
        }
        BackendKind::None => return Err(config_err("cause backend is \"none\"")),
    })
}

fn knowledge_backend(b: &BackendConfig) -> Result<Box<dyn KnowledgeBackend>> {
    Ok(match b.backend {
        BackendKind::Http => Box::new(HttpKnowledgeBackend::new(
            b.url.clone().expect("validated"),
            timeout(b),
            b.token.clone(),
        )),
        BackendKind::Fixture => Box::new(
            FixtureKnowledgeBackend::load(b.fixture.as_ref().expect("validated")).map_err(config_err)?,
        ),
        BackendKind::None => return Err(config_err("knowledge backend is \"none\"")),
    })
}

fn labels(cfg: &Config) -> Result<LabelSet> {
    match &cfg.corpus.labels {
        Some(p) => LabelSet::load(p).map_err(config_err),
        None => Ok(LabelSet::default()),
    }
}

fn valence(cfg: &Config, labels: &LabelSet) -> Result<ValenceMap> {
    let vmap = match &cfg.corpus.valence {
        Some(p) => ValenceMap::load(p).map_err(config_err)?,
        None => ValenceMap::default(),
    };
    vmap.check_total(labels).map_err(config_err)?;
    Ok(vmap)
}

fn render_options(cfg: &Config) -> RenderOptions {
    RenderOptions {
        subject: cfg.knowledge.subject,
        literal: cfg.generation.literal,
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config sections serialize")
}

/// Loaded stage outputs shared by the later stages.
struct Loaded {
    partition: Partition,
    causes: HashMap<String, CauseSpan>,
    knowledge: HashMap<String, KnowledgeRecord>,
}

fn load_corpus(ws: &Workspace, labels: &LabelSet) -> Result<Vec<Dialogue>> {
    let records: Vec<CanonicalRecord> = jsonl::read(&ws.path(CORPUS))?;
    records
        .into_iter()
        .map(|r| Dialogue::from_record(r, labels).map_err(Into::into))
        .collect()
}

fn load_partition(ws: &Workspace, dialogues: &[Dialogue]) -> Result<Partition> {
    let manifest: SplitManifest = serde_json::from_str(&std::fs::read_to_string(ws.path(SPLIT))?)?;
    Ok(manifest.partition(dialogues)?)
}

fn load_all(ws: &Workspace, labels: &LabelSet) -> Result<Loaded> {
    let dialogues = load_corpus(ws, labels)?;
    let partition = load_partition(ws, &dialogues)?;
    let causes = jsonl::read::<CauseAnnotation>(&ws.path(CAUSES))?
        .into_iter()
        .map(|a| (a.span.dialogue_id.clone(), a.span))
        .collect();
    let knowledge = jsonl::read::<KnowledgeRecord>(&ws.path(KNOWLEDGE))?
        .into_iter()
        .map(|k| (k.dialogue_id.clone(), k))
        .collect();
    Ok(Loaded {
        partition,
        causes,
        knowledge,
    })
}

fn eval_split<'a>(cfg: &Config, p: &'a Partition) -> &'a [Dialogue] {
    match cfg.generation.split.as_str() {
        "valid" => &p.valid,
        _ => &p.test,
    }
}

fn generation_config(cfg: &Config, seed: u64) -> GenerationConfig {
    let g = &cfg.generation;
    GenerationConfig {
        model_name: g.model.clone(),
        temperature: g.temperature,
        max_tokens: g.max_tokens,
        parallelism: g.backend.parallelism,
        seed,
        retry: RetryPolicy::default(),
        cfeg_target: g.target,
        subject: cfg.knowledge.subject,
        icl_k: g.icl_k,
    }
}

pub fn ingest(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = json!({"format": cfg.corpus.format, "labels": cfg.corpus.labels});
    ws.stage("ingest", &[cfg.corpus.path.clone()], &params, vec![], |ws| {
        let labels = labels(cfg)?;
        let report = import_corpus(&cfg.corpus.path, cfg.import_format(), &labels)
            .with_context(|| format!("importing {}", cfg.corpus.path.display()))?;
        if !report.rejects.is_empty() {
            log::warn!("ingest: {} record(s) rejected, see {REJECTS}", report.rejects.len());
        }
        let (corpus, rejects) = (ws.path(CORPUS), ws.path(REJECTS));
        let records: Vec<CanonicalRecord> = report.dialogues.iter().map(Dialogue::to_record).collect();
        jsonl::write(&corpus, &records)?;
        jsonl::write(&rejects, &report.rejects)?;
        Ok(StageOutcome {
            outputs: vec![corpus, rejects],
            backends: vec![],
            notes: json!({"dialogues": records.len(), "rejects": report.rejects.len()}),
        })
    })
}

pub fn split(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = json!({"ratios": cfg.split.ratios, "seed": cfg.run.seed});
    let input = ws.path(CORPUS);
    ws.stage("split", &[input], &params, vec![cfg.run.seed], |ws| {
        let dialogues = load_corpus(ws, &labels(cfg)?)?;
        let manifest = split_corpus(&dialogues, &cfg.split_ratios(), cfg.run.seed)?;
        let out = ws.path(SPLIT);
        std::fs::write(&out, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(StageOutcome {
            outputs: vec![out],
            backends: vec![],
            notes: json!({
                "train": manifest.train.len(),
                "valid": manifest.valid.len(),
                "test": manifest.test.len(),
            }),
        })
    })
}

pub fn annotate_causes(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = to_json(&cfg.cause.backend);
    let input = ws.path(CORPUS);
    ws.stage("annotate-causes", &[input], &params, vec![], |ws| {
        let dialogues = load_corpus(ws, &labels(cfg)?)?;
        let backend = cause_backend(&cfg.cause.backend)?;
        let results = annotate_all(
            &dialogues,
            backend.as_ref(),
            cfg.cause.backend.parallelism,
            RetryPolicy::default(),
        );
        let mut annotations = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for r in results {
            match r {
                Ok(a) => annotations.push(a),
                Err(e) => failures.push(e.to_string()),
            }
        }
        if !failures.is_empty() {
            return Err(backend_err(format!(
                "{} dialogue(s) without a cause: {}",
                failures.len(),
                abbreviate(&failures)
            )));
        }
        let fallbacks = annotations.iter().filter(|a| a.fallback).count();
        let out = ws.path(CAUSES);
        jsonl::write(&out, &annotations)?;
        Ok(StageOutcome {
            outputs: vec![out],
            backends: vec![backend.describe()],
            notes: json!({"annotated": annotations.len(), "fallbacks": fallbacks}),
        })
    })
}

pub fn gen_knowledge(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = json!({"backend": to_json(&cfg.knowledge.backend), "k": cfg.knowledge.k});
    let inputs = [ws.path(CORPUS), ws.path(CAUSES)];
    ws.stage("gen-knowledge", &inputs, &params, vec![], |ws| {
        let dialogues = load_corpus(ws, &labels(cfg)?)?;
        let causes: HashMap<String, CauseSpan> = jsonl::read::<CauseAnnotation>(&ws.path(CAUSES))?
            .into_iter()
            .map(|a| (a.span.dialogue_id.clone(), a.span))
            .collect();
        let pairs: Vec<(Dialogue, CauseSpan)> = dialogues
            .into_iter()
            .map(|d| {
                let c = causes
                    .get(&d.id)
                    .cloned()
                    .with_context(|| format!("no cause span for {}", d.id))?;
                Ok((d, c))
            })
            .collect::<Result<_>>()?;
        let backend = knowledge_backend(&cfg.knowledge.backend)?;
        let results = fetch_all(
            &pairs,
            backend.as_ref(),
            cfg.knowledge.k,
            cfg.knowledge.backend.parallelism,
            RetryPolicy::default(),
        );
        let records: Vec<KnowledgeRecord> = results
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(backend_err)?;
        let out = ws.path(KNOWLEDGE);
        jsonl::write(&out, &records)?;
        Ok(StageOutcome {
            outputs: vec![out],
            backends: vec![backend.describe()],
            notes: json!({"bundles": records.len()}),
        })
    })
}

fn downstream_inputs(ws: &Workspace) -> Vec<PathBuf> {
    [CORPUS, SPLIT, CAUSES, KNOWLEDGE].iter().map(|f| ws.path(f)).collect()
}

#[derive(Serialize)]
struct PromptLine<'a> {
    dialogue_id: &'a str,
    strategy: Strategy,
    seed: u64,
    prompt_digest: String,
    prompt: String,
}

pub fn build_prompts(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = json!({"generation": to_json(&cfg.generation), "subject": cfg.knowledge.subject});
    let inputs = downstream_inputs(ws);
    ws.stage("build-prompts", &inputs, &params, cfg.seeds(), |ws| {
        let data = load_all(ws, &labels(cfg)?)?;
        let similarity = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &data.partition.train,
            causes: &data.causes,
            knowledge: &data.knowledge,
            similarity: &similarity,
        };
        std::fs::create_dir_all(ws.path("prompts"))?;
        let mut outputs = Vec::new();
        for &strategy in &cfg.generation.strategies {
            for seed in cfg.seeds() {
                let gc = generation_config(cfg, seed);
                let lines = eval_split(cfg, &data.partition)
                    .iter()
                    .map(|d| {
                        let prompt = strategy_prompt(strategy, d, &inputs, &gc)?;
                        Ok(PromptLine {
                            dialogue_id: &d.id,
                            strategy,
                            seed,
                            prompt_digest: sha256_hex(&prompt),
                            prompt,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let out = ws.path(&prompts_file(strategy, seed));
                jsonl::write(&out, &lines)?;
                outputs.push(out);
            }
        }
        Ok(StageOutcome {
            outputs,
            ..Default::default()
        })
    })
}

pub fn export_sft_stage(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let params = json!({
        "seed": cfg.run.seed,
        "subject": cfg.knowledge.subject,
        "literal": cfg.generation.literal,
        "valence": cfg.corpus.valence,
    });
    let inputs = downstream_inputs(ws);
    ws.stage("export-sft", &inputs, &params, vec![cfg.run.seed], |ws| {
        let labels = labels(cfg)?;
        let vmap = valence(cfg, &labels)?;
        let data = load_all(ws, &labels)?;
        let dir = ws.path("sft");
        let manifest = export_sft(
            &data.partition.train,
            &data.causes,
            &data.knowledge,
            &vmap,
            render_options(cfg),
            cfg.run.seed,
            &dir,
        )?;
        Ok(StageOutcome {
            outputs: vec![dir.join(SFT_RECORDS), dir.join(SFT_MANIFEST)],
            backends: vec![],
            notes: json!({"count": manifest.count, "sha256": manifest.sha256}),
        })
    })
}

pub fn infer(ws: &mut Workspace, cfg: &Config, only: &[Strategy]) -> Result<StageStatus> {
    let strategies: Vec<Strategy> = if only.is_empty() {
        cfg.generation.strategies.clone()
    } else {
        only.to_vec()
    };
    let params = json!({
        "generation": to_json(&cfg.generation),
        "strategies": strategies,
        "subject": cfg.knowledge.subject,
    });
    let inputs = downstream_inputs(ws);
    let mut gaps: Vec<String> = Vec::new();
    let status = ws.stage("infer", &inputs, &params, cfg.seeds(), |ws| {
        let data = load_all(ws, &labels(cfg)?)?;
        let backend = chat_backend(&cfg.generation.backend)?;
        let similarity = LexicalJaccard::default();
        let inputs = StrategyInputs {
            train: &data.partition.train,
            causes: &data.causes,
            knowledge: &data.knowledge,
            similarity: &similarity,
        };
        std::fs::create_dir_all(ws.path("predictions"))?;
        let mut outputs = Vec::new();
        let mut notes = BTreeMap::new();
        for &strategy in &strategies {
            for seed in cfg.seeds() {
                let gc = generation_config(cfg, seed);
                let split = eval_split(cfg, &data.partition);
                let run = run_strategy(strategy, split, &gc, &inputs, backend.as_ref())?;
                let out = ws.path(&predictions_file(strategy, seed));
                jsonl::write(&out, &run.records)?;
                outputs.push(out);
                let latency: u64 = run.records.iter().map(|r| r.latency_ms).sum();
                notes.insert(
                    format!("{strategy}.seed{seed}"),
                    json!({
                        "records": run.records.len(),
                        "backend_calls": run.backend_calls(),
                        "gaps": run.gaps,
                        "latency_ms_total": latency,
                    }),
                );
                gaps.extend(run.gaps.iter().map(|id| format!("{strategy}.seed{seed}:{id}")));
            }
        }
        Ok(StageOutcome {
            outputs,
            backends: vec![backend.describe()],
            notes: to_json(&notes),
        })
    })?;
    if !gaps.is_empty() {
        return Err(backend_err(format!(
            "{} generation(s) failed after retries (recorded as gaps): {}",
            gaps.len(),
            abbreviate(&gaps)
        )));
    }
    Ok(status)
}

pub fn evaluate(ws: &mut Workspace, cfg: &Config) -> Result<StageStatus> {
    let mut inputs = downstream_inputs(ws);
    for &s in &cfg.generation.strategies {
        for seed in cfg.seeds() {
            inputs.push(ws.path(&predictions_file(s, seed)));
        }
    }
    if let Some(g) = &cfg.cause.gold {
        inputs.push(g.clone());
    }
    let params = json!({
        "strategies": cfg.generation.strategies,
        "seeds": cfg.seeds(),
        "scoring": cfg.scoring.as_ref().map(to_json),
        "split": cfg.generation.split,
    });
    ws.stage("evaluate", &inputs, &params, cfg.seeds(), |ws| {
        let data = load_all(ws, &labels(cfg)?)?;
        let gold = eval_split(cfg, &data.partition);
        let gold_causes: HashMap<String, String> = match &cfg.cause.gold {
            Some(p) => jsonl::read::<CauseSpan>(p)?
                .into_iter()
                .map(|s| (s.dialogue_id, s.text))
                .collect(),
            None => HashMap::new(),
        };
        let scorer = match &cfg.scoring {
            Some(s) if s.backend.backend != BackendKind::None => {
                Some((chat_backend(&s.backend)?, s.model.clone().expect("validated")))
            }
            _ => None,
        };
        let similarity = LexicalJaccard::default();
        let strategy_inputs = StrategyInputs {
            train: &data.partition.train,
            causes: &data.causes,
            knowledge: &data.knowledge,
            similarity: &similarity,
        };
        let mut scores: Vec<StrategyScores> = Vec::new();
        let mut backends = Vec::new();
        for &s in &cfg.generation.strategies {
            for seed in cfg.seeds() {
                let records: Vec<PredictionRecord> = jsonl::read(&ws.path(&predictions_file(s, seed)))?;
                let ppl = match &scorer {
                    Some((backend, model)) => {
                        let gc = generation_config(cfg, seed);
                        let items = gold
                            .iter()
                            .map(|d| Ok((strategy_prompt(s, d, &strategy_inputs, &gc)?, d.gold_response.clone())))
                            .collect::<Result<Vec<_>>>()?;
                        perplexity(&items, backend.as_ref(), model)
                    }
                    None => None,
                };
                scores.push(score_strategy(&records, gold, &gold_causes, ppl)?);
            }
        }
        if let Some((b, _)) = &scorer {
            backends.push(b.describe());
        }
        let report = build_report(&scores)?;
        let (s_path, j_path, t_path) = (ws.path(SCORES), ws.path(REPORT_JSON), ws.path(REPORT_TXT));
        std::fs::write(&s_path, serde_json::to_string_pretty(&scores)? + "\n")?;
        std::fs::write(&j_path, serde_json::to_string_pretty(&report)? + "\n")?;
        std::fs::write(&t_path, report.render_text())?;
        Ok(StageOutcome {
            outputs: vec![s_path, j_path, t_path],
            backends,
            notes: json!({"rows": report.rows.len()}),
        })
    })
}

fn ab_summary(cfg: &Config) -> Result<Option<String>> {
    let Some(h) = &cfg.humaneval else {
        return Ok(None);
    };
    let svc = match EvalService::open(&h.data_dir, &h.session_id) {
        Ok(s) => s,
        Err(cfeg_humaneval::HumanEvalError::UnknownSession(_)) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let records = svc.records();
    let mut out = String::new();
    let (sys, opp) = (h.system.to_string(), h.opponent.to_string());
    match ab_results(&records, &sys, &opp) {
        Ok(table) => {
            out.push_str(&format!("A/B: {sys} vs {opp}\n"));
            out.push_str(&format!("{:<12} {:>7} {:>7} {:>7} {:>5}\n", "aspect", "win", "lose", "tie", "n"));
            for r in &table.rows {
                out.push_str(&format!(
                    "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>5}\n",
                    r.aspect.to_string(),
                    r.win,
                    r.lose,
                    r.tie,
                    r.n
                ));
            }
        }
        Err(e) => out.push_str(&format!("A/B: {e}\n")),
    }
    for row in agreement(&records) {
        out.push_str(&format!(
            "kappa[{:?}/{}] = {:.4} ({:?}, {} items, {} raters)\n",
            row.mode, row.aspect, row.stats.kappa, row.stats.method, row.stats.n_items, row.stats.n_raters
        ));
    }
    Ok(Some(out))
}

pub fn report(ws: &mut Workspace, cfg: &Config) -> Result<String> {
    let inputs = [ws.path(REPORT_JSON)];
    let mut text = String::new();
    ws.stage("report", &inputs, &json!({}), vec![], |ws| {
        let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(ws.path(REPORT_JSON))?)?;
        let mut body = report.render_text();
        if let Some(ab) = ab_summary(cfg)? {
            body.push('\n');
            body.push_str(&ab);
        }
        let out = ws.path(SUMMARY_TXT);
        std::fs::write(&out, &body)?;
        Ok(StageOutcome {
            outputs: vec![out],
            ..Default::default()
        })
    })?;
    text.push_str(&std::fs::read_to_string(ws.path(SUMMARY_TXT))?);
    Ok(text)
}

/// Creates the A/B session on first use from the two configured systems'
/// predictions, then serves it. With `setup_only` returns after creation.
pub fn serve_humaneval(ws: &mut Workspace, cfg: &Config, setup_only: bool) -> Result<()> {
    let h = cfg
        .humaneval
        .as_ref()
        .ok_or_else(|| config_err("missing section [humaneval]"))?;
    let token = h
        .admin_token
        .clone()
        .ok_or_else(|| config_err("missing key humaneval.admin_token (or CFEG_ADMIN_TOKEN)"))?;
    let svc = match EvalService::open(&h.data_dir, &h.session_id) {
        Ok(s) => s,
        Err(cfeg_humaneval::HumanEvalError::UnknownSession(_)) => {
            let data = load_all(ws, &labels(cfg)?)?;
            let seed = cfg.seeds()[0];
            let preds = |s: Strategy| -> Result<HashMap<String, String>> {
                let recs: Vec<PredictionRecord> = jsonl::read(&ws.path(&predictions_file(s, seed)))?;
                Ok(recs
                    .into_iter()
                    .filter(|r| r.error.is_none())
                    .map(|r| {
                        let text = if r.parsed.response.is_empty() { r.raw_text } else { r.parsed.response };
                        (r.dialogue_id, text)
                    })
                    .collect())
            };
            let (a, b) = (preds(h.system)?, preds(h.opponent)?);
            let pool: Vec<&Dialogue> = eval_split(cfg, &data.partition)
                .iter()
                .filter(|d| a.contains_key(&d.id) && b.contains_key(&d.id))
                .collect();
            let n = h.items.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(h.blinding_seed);
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
            picked.sort_unstable();
            let items = picked
                .into_iter()
                .map(|i| {
                    let d = pool[i];
                    EvalItem {
                        item_id: d.id.clone(),
                        context: context_string(d),
                        candidates: BTreeMap::from([
                            (h.system.to_string(), a[&d.id].clone()),
                            (h.opponent.to_string(), b[&d.id].clone()),
                        ]),
                        mode: Mode::AbPair,
                    }
                })
                .collect();
            let session = create_session(&h.session_id, items, h.annotators.clone(), h.blinding_seed)?;
            log::info!("created session {} with {} tasks", h.session_id, session.tasks.len());
            EvalService::create(&h.data_dir, session)?
        }
        Err(e) => return Err(e.into()),
    };
    if setup_only {
        println!("session {}: {} tasks", h.session_id, svc.session().tasks.len());
        return Ok(());
    }
    let server = serve(
        Arc::new(svc),
        ServerConfig {
            addr: h.addr.clone(),
            admin_token: token,
            static_dir: h.static_dir.clone(),
            workers: h.workers,
        },
    )?;
    println!("serving session {} on {}", h.session_id, server.url());
    server.join();
    Ok(())
}
