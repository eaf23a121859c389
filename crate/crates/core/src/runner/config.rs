use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{SplitSpec, ICLINIQ_WORD_CAP, MEDQUAD_WORD_CAP};
use crate::embedding::{EmbedderEndpoint, DEFAULT_INSTRUCTION, MIN_MOCK_DIM};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::llmgw::{GenerationParams, GeneratorEndpoint, MockMode};
use crate::promptgen::{ExampleOrder, PromptStrategy, StrategyKind, DEFAULT_K};
use crate::qtype::ClassifierEndpoint;
use crate::textmetrics::Scale;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// A MedQuAD XML file, or a directory searched recursively for `*.xml`.
    Medquad {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
    },
    Jsonl {
        path: PathBuf,
        source: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
    },
    Synthetic {
        types: usize,
        per_type: usize,
        dim: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<usize>,
    },
}

impl CorpusSource {
    pub fn source_name(&self) -> &str {
        match self {
            CorpusSource::Medquad { .. } => "medquad",
            CorpusSource::Jsonl { source, .. } => source,
            CorpusSource::Synthetic { .. } => "synthetic",
        }
    }

    /// Answer word cap; MedQuAD defaults to 300, JSONL to 150, synthetic to none.
    pub fn cap(&self) -> Option<usize> {
        match self {
            CorpusSource::Medquad { cap, .. } => Some(cap.unwrap_or(MEDQUAD_WORD_CAP)),
            CorpusSource::Jsonl { cap, .. } => Some(cap.unwrap_or(ICLINIQ_WORD_CAP)),
            CorpusSource::Synthetic { cap, .. } => *cap,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            CorpusSource::Medquad { path, .. } | CorpusSource::Jsonl { path, .. } => Some(path),
            CorpusSource::Synthetic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Falls back to the experiment-wide `k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    /// Static strategies only; falls back to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub order: ExampleOrder,
    /// Row label in reports; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl StrategyConfig {
    pub fn of(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            k: None,
            seed: None,
            order: ExampleOrder::default(),
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: default_train_fraction(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Mock { dim: usize },
    Http(EmbedderEndpoint),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Mock { dim: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClassifierConfig {
    /// Nearest-centroid model trained on the typed training questions.
    #[default]
    Centroid,
    Http(ClassifierEndpoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GeneratorConfig {
    Mock {
        #[serde(flatten)]
        mode: MockMode,
    },
    Http(GeneratorEndpoint),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Mock {
            mode: MockMode::EchoLastExample,
        }
    }
}

/// One experiment: corpora, split, strategies and backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub corpora: Vec<CorpusSource>,
    #[serde(default)]
    pub split: SplitConfig,
    /// Evaluate on the test split while keeping it in the retrieval pool.
    #[serde(default)]
    pub test_in_train: bool,
    /// Keep only the first `max_test` test questions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
    /// Never retrieve the test question itself as an example.
    #[serde(default = "default_true")]
    pub self_exclude: bool,
    pub strategies: Vec<StrategyConfig>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_instruction")]
    pub instruction: String,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub execution: Execution,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scale: Scale,
    #[serde(default)]
    pub abort_on_error: bool,
    /// Directory relative corpus paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_true() -> bool {
    true
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_instruction() -> String {
    DEFAULT_INSTRUCTION.into()
}
fn default_concurrency() -> usize {
    4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// A config with defaults everywhere except corpora and strategies.
    pub fn new(corpora: Vec<CorpusSource>, strategies: Vec<StrategyConfig>) -> Self {
        ExperimentConfig {
            name: default_name(),
            seed: 0,
            corpora,
            split: SplitConfig::default(),
            test_in_train: false,
            max_test: None,
            self_exclude: true,
            strategies,
            k: DEFAULT_K,
            instruction: default_instruction(),
            embedder: EmbedderConfig::default(),
            classifier: ClassifierConfig::default(),
            generator: GeneratorConfig::default(),
            generation: GenerationParams::default(),
            concurrency: default_concurrency(),
            execution: Execution::default(),
            output_dir: default_output_dir(),
            scale: Scale::default(),
            abort_on_error: false,
            base_dir: None,
        }
    }

    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn from_str(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut config = Self::from_str(&text, json)?;
        config.base_dir = path.parent().map(Path::to_path_buf);
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        SplitSpec::new(self.split.train_fraction, self.split.seed.unwrap_or(self.seed))
    }

    /// Concrete strategies with `k` and seeds filled in.
    pub fn strategies(&self) -> Result<Vec<(String, PromptStrategy)>> {
        self.strategies
            .iter()
            .map(|s| {
                let seed = match s.kind {
                    StrategyKind::Static => Some(s.seed.unwrap_or(self.seed)),
                    _ => s.seed,
                };
                let strategy = PromptStrategy {
                    kind: s.kind,
                    k: s.k.unwrap_or(self.k),
                    seed,
                    order: s.order,
                };
                strategy
                    .validate()
                    .map_err(|e| Error::Config(format!("strategy {:?}: {e}", s.label())))?;
                Ok((s.label(), strategy))
            })
            .collect()
    }

    /// Checks everything that can be checked without touching endpoints.
    pub fn validate(&self) -> Result<()> {
        if self.corpora.is_empty() {
            return Err(Error::Config("at least one corpus is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.max_test == Some(0) {
            return Err(Error::Config("max_test must be at least 1".into()));
        }
        let mut labels = HashSet::new();
        for s in &self.strategies {
            if !labels.insert(s.label()) {
                return Err(Error::Config(format!("duplicate strategy label {:?}", s.label())));
            }
        }
        self.strategies()?;
        self.split_spec().map_err(|e| Error::Config(e.to_string()))?;
        let mut sources = HashSet::new();
        for c in &self.corpora {
            if !sources.insert(c.source_name()) {
                return Err(Error::Config(format!("corpus source {:?} listed twice", c.source_name())));
            }
            if c.cap() == Some(0) {
                return Err(Error::Config(format!("cap for {:?} must be at least 1", c.source_name())));
            }
            if let Some(p) = c.path() {
                let p = self.resolve(p);
                if !p.exists() {
                    return Err(Error::Config(format!("corpus path {} does not exist", p.display())));
                }
            }
            if let CorpusSource::Synthetic { types, per_type, dim, .. } = c {
                if *types == 0 || *per_type == 0 || dim < types {
                    return Err(Error::Config("synthetic corpus needs types, per_type >= 1 and dim >= types".into()));
                }
            }
        }
        match &self.embedder {
            EmbedderConfig::Mock { dim } if *dim < MIN_MOCK_DIM => {
                return Err(Error::Config(format!("mock embedder dim must be >= {MIN_MOCK_DIM}")));
            }
            EmbedderConfig::Http(e) => e.validate()?,
            _ => {}
        }
        if self.generation.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form. The output directory is left
    /// out so that the same experiment hashes the same wherever it is written.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let value = serde_json::to_value(&canonical)?;
        let bytes = serde_json::to_vec(&value)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
        name = "demo"
        seed = 7
        strategies = [{ kind = "static" }, { kind = "typewise_dynamic", k = 3, label = "typed" }]

        [[corpora]]
        format = "synthetic"
        types = 2
        per_type = 10
        dim = 64

        [generator]
        type = "mock"
        mode = "fixed"
        text = "hello"

        [embedder]
        type = "mock"
        dim = 32
    "#;

    #[test]
    fn parses_toml_with_defaults() {
        let c = ExperimentConfig::from_str(TOML, false).unwrap();
        c.validate().unwrap();
        assert_eq!(c.k, 2);
        assert!(c.self_exclude);
        assert_eq!(
            c.generator,
            GeneratorConfig::Mock {
                mode: MockMode::Fixed { text: "hello".into() }
            }
        );
        let s = c.strategies().unwrap();
        assert_eq!(s[0].0, "static");
        assert_eq!(s[0].1.seed, Some(7));
        assert_eq!(s[1].0, "typed");
        assert_eq!(s[1].1.k, 3);
    }

    #[test]
    fn json_round_trip_keeps_digest() {
        let c = ExperimentConfig::from_str(TOML, false).unwrap();
        let json = serde_json::to_string(&c).unwrap();
        let back = ExperimentConfig::from_str(&json, true).unwrap();
        assert_eq!(c.digest().unwrap(), back.digest().unwrap());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = ExperimentConfig::from_str(TOML, false).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 8;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ExperimentConfig::from_str(TOML, false).unwrap();
        let mut c = base.clone();
        c.strategies.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = base.clone();
        c.strategies.push(StrategyConfig::of(StrategyKind::Static));
        assert!(c.validate().unwrap_err().to_string().contains("duplicate"));

        let mut c = base.clone();
        c.corpora = vec![CorpusSource::Jsonl {
            path: "/definitely/not/here.jsonl".into(),
            source: "x".into(),
            cap: None,
        }];
        assert!(c.validate().unwrap_err().to_string().contains("does not exist"));

        let mut c = base.clone();
        c.corpora = vec![CorpusSource::Synthetic {
            types: 2,
            per_type: 2,
            dim: 64,
            seed: 0,
            cap: Some(0),
        }];
        assert!(c.validate().is_err());

        let mut c = base;
        c.strategies[1].seed = Some(1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("bogus = 1\n{TOML}");
        assert!(ExperimentConfig::from_str(&text, false).is_err());
    }

    #[test]
    fn default_caps_follow_the_corpus_kind() {
        let m = CorpusSource::Medquad { path: "x".into(), cap: None };
        let j = CorpusSource::Jsonl {
            path: "x".into(),
            source: "icliniq".into(),
            cap: None,
        };
        assert_eq!(m.cap(), Some(300));
        assert_eq!(j.cap(), Some(150));
    }
}
