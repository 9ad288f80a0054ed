//! Run configuration (TOML). Relative paths resolve against the config
//! file's directory. Environment variables may override credentials only.

use crate::Failure;
use cfeg_core::corpus::{ImportFormat, SplitRatios};
use cfeg_core::knowledge::Pronoun;
use cfeg_core::orchestrator::Strategy;
use cfeg_core::templates::TargetVariant;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ENV_CAUSE_TOKEN: &str = "CFEG_CAUSE_TOKEN";
pub const ENV_KNOWLEDGE_TOKEN: &str = "CFEG_KNOWLEDGE_TOKEN";
pub const ENV_LLM_TOKEN: &str = "CFEG_LLM_TOKEN";
pub const ENV_SCORING_TOKEN: &str = "CFEG_SCORING_TOKEN";
pub const ENV_ADMIN_TOKEN: &str = "CFEG_ADMIN_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Fixture,
    None,
}

/// Where a backend lives. Tokens never appear in manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub backend: BackendKind,
    pub url: Option<String>,
    pub fixture: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub token: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_timeout() -> u64 {
    60
}

fn default_parallelism() -> usize {
    4
}

fn default_k() -> usize {
    1
}

fn default_max_tokens() -> u32 {
    256
}

fn default_icl_k() -> usize {
    5
}

fn default_split() -> String {
    "test".into()
}

fn default_target() -> TargetVariant {
    TargetVariant::R2la
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: String,
    pub labels: Option<PathBuf>,
    pub valence: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub ratios: [u32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CauseSection {
    #[serde(flatten)]
    pub backend: BackendConfig,
    /// Gold spans (one `CauseSpan` per line) for cause F1.
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSection {
    #[serde(flatten)]
    pub backend: BackendConfig,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub subject: Pronoun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSection {
    #[serde(flatten)]
    pub backend: BackendConfig,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Defaults to `[run.seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_target")]
    pub target: TargetVariant,
    #[serde(default)]
    pub literal: bool,
    #[serde(default = "default_icl_k")]
    pub icl_k: usize,
    /// Split generated for: "test" or "valid".
    #[serde(default = "default_split")]
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringSection {
    #[serde(flatten)]
    pub backend: BackendConfig,
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanEvalSection {
    pub data_dir: PathBuf,
    pub session_id: String,
    pub addr: String,
    pub static_dir: Option<PathBuf>,
    pub annotators: Vec<String>,
    pub items: usize,
    pub blinding_seed: u64,
    pub system: Strategy,
    pub opponent: Strategy,
    #[serde(skip_serializing)]
    pub admin_token: Option<String>,
    #[serde(default = "default_parallelism")]
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub cause: CauseSection,
    pub knowledge: KnowledgeSection,
    pub generation: GenerationSection,
    pub scoring: Option<ScoringSection>,
    pub humaneval: Option<HumanEvalSection>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut cfg: Config =
            toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.out_dir);
        fix(&mut self.corpus.path);
        for p in [&mut self.corpus.labels, &mut self.corpus.valence, &mut self.cause.gold] {
            if let Some(p) = p {
                fix(p);
            }
        }
        let mut backends = vec![
            &mut self.cause.backend,
            &mut self.knowledge.backend,
            &mut self.generation.backend,
        ];
        if let Some(s) = &mut self.scoring {
            backends.push(&mut s.backend);
        }
        for b in backends {
            if let Some(p) = &mut b.fixture {
                fix(p);
            }
        }
        if let Some(h) = &mut self.humaneval {
            fix(&mut h.data_dir);
            if let Some(p) = &mut h.static_dir {
                fix(p);
            }
        }
    }

    /// Credentials only; everything else comes from the file.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        let set = |slot: &mut Option<String>, key: &str| {
            if let Some(v) = get(key) {
                *slot = Some(v);
            }
        };
        set(&mut self.cause.backend.token, ENV_CAUSE_TOKEN);
        set(&mut self.knowledge.backend.token, ENV_KNOWLEDGE_TOKEN);
        set(&mut self.generation.backend.token, ENV_LLM_TOKEN);
        if let Some(s) = &mut self.scoring {
            set(&mut s.backend.token, ENV_SCORING_TOKEN);
        }
        if let Some(h) = &mut self.humaneval {
            set(&mut h.admin_token, ENV_ADMIN_TOKEN);
        }
    }

    /// Collects every problem before failing so one run lists them all.
    pub fn validate(&self) -> Result<(), Failure> {
        let mut problems = Vec::new();
        let mut backend = |name: &str, b: &BackendConfig, optional: bool| {
            match b.backend {
                BackendKind::Http if b.url.is_none() => problems.push(format!("missing key {name}.url")),
                BackendKind::Fixture if b.fixture.is_none() => {
                    problems.push(format!("missing key {name}.fixture"))
                }
                BackendKind::None if !optional => {
                    problems.push(format!("{name}.backend cannot be \"none\""))
                }
                _ => {}
            }
            if b.parallelism == 0 {
                problems.push(format!("{name}.parallelism must be >= 1"));
            }
        };
        backend("cause", &self.cause.backend, false);
        backend("knowledge", &self.knowledge.backend, false);
        backend("generation", &self.generation.backend, false);
        if let Some(s) = &self.scoring {
            backend("scoring", &s.backend, true);
            if s.backend.backend != BackendKind::None && s.model.is_none() {
                problems.push("missing key scoring.model".into());
            }
        }
        if self.corpus.format.parse::<ImportFormat>().is_err() {
            problems.push(format!("corpus.format: unknown format '{}'", self.corpus.format));
        }
        let [a, b, c] = self.split.ratios;
        if SplitRatios::from_weights(a, b, c).is_err() {
            problems.push("split.ratios must be three positive weights".into());
        }
        let g = &self.generation;
        if !(g.temperature >= 0.0) {
            problems.push("generation.temperature must be >= 0".into());
        }
        if g.strategies.is_empty() {
            problems.push("generation.strategies is empty".into());
        }
        if !matches!(g.split.as_str(), "test" | "valid") {
            problems.push(format!("generation.split must be \"test\" or \"valid\", got '{}'", g.split));
        }
        if let Some(h) = &self.humaneval {
            if h.annotators.is_empty() {
                problems.push("humaneval.annotators is empty".into());
            }
            if h.items == 0 {
                problems.push("humaneval.items must be >= 1".into());
            }
            if h.system == h.opponent {
                problems.push("humaneval.system and humaneval.opponent must differ".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Failure::Config(problems.join("; ")))
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.generation.seeds.is_empty() {
            vec![self.run.seed]
        } else {
            self.generation.seeds.clone()
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        let [a, b, c] = self.split.ratios;
        SplitRatios::from_weights(a, b, c).expect("validated")
    }

    pub fn import_format(&self) -> ImportFormat {
        self.corpus.format.parse().expect("validated")
    }
}
