//! Experiment orchestration: ingest, embed, index, classify, prompt,
//! generate and score, with every intermediate artifact written under the
//! output directory.

mod config;
mod report;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub use config::{
    ClassifierConfig, CorpusSource, EmbedderConfig, ExperimentConfig, GeneratorConfig, SplitConfig, StrategyConfig,
};
pub use report::{
    render_rows, render_table, write_tables, AuditRecord, Retrieved, RunReport, StrategyRow, TableFormat, TableRow,
    TABLE_HEADER,
};

use crate::corpus::{self, Corpus, XmlDocument};
use crate::embedding::{embed_texts, Embedder, EmbeddingStore, HttpEmbedder, MockEmbedder};
use crate::error::{Error, Result};
use crate::llmgw::{Backend, Gateway, HttpGenerator};
use crate::promptgen::{self, AssembledPrompt, PromptExample, PromptStrategy, StrategyKind};
use crate::qtype::{self, HttpClassifier, QuestionClassifier};
use crate::synth::{self, SynthSpec};
use crate::textmetrics::{score_pair, score_run};
use crate::vindex::TypePartitionedIndex;

pub fn build_embedder(config: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
    Ok(match config {
        EmbedderConfig::Mock { dim } => Box::new(MockEmbedder::new(*dim)),
        EmbedderConfig::Http(endpoint) => Box::new(HttpEmbedder::new(endpoint.clone())?),
    })
}

pub fn build_gateway(config: &ExperimentConfig) -> Result<Gateway> {
    let backend = match &config.generator {
        GeneratorConfig::Mock { mode } => Backend::Mock(mode.clone()),
        GeneratorConfig::Http(endpoint) => Backend::Http(HttpGenerator::new(endpoint.clone())?),
    };
    Ok(Gateway::new(backend, config.generation.clone()))
}

/// All `*.xml` files under `path` (or `path` itself), sorted.
fn xml_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads one configured corpus and applies its answer cap.
pub fn load_source(config: &ExperimentConfig, source: &CorpusSource) -> Result<Corpus> {
    let raw = match source {
        CorpusSource::Medquad { path, .. } => {
            let docs = xml_files(&config.resolve(path))?
                .iter()
                .map(|p| XmlDocument::read(p))
                .collect::<Result<Vec<_>>>()?;
            let ingested = corpus::parse_medquad(&docs)?;
            log::info!("medquad: {} pairs, {} skipped", ingested.corpus.len(), ingested.skipped);
            ingested.corpus
        }
        CorpusSource::Jsonl { path, source, .. } => {
            let path = config.resolve(path);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let ingested = corpus::parse_jsonl(&bytes, source)?;
            log::info!("{source}: {} pairs, {} skipped", ingested.corpus.len(), ingested.skipped);
            ingested.corpus
        }
        CorpusSource::Synthetic {
            types,
            per_type,
            dim,
            seed,
            ..
        } => synth::typed_corpus(&SynthSpec::new(*types, *per_type, *dim, *seed))?,
    };
    match source.cap() {
        Some(cap) => corpus::truncate_answers(&raw, cap),
        None => Ok(raw),
    }
}

pub fn fingerprint(corpus: &Corpus) -> Result<String> {
    Ok(hex::encode(Sha256::digest(corpus.to_jsonl()?)))
}

/// Corpora after ingestion, truncation, merging and splitting.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub sources: Vec<Corpus>,
    pub merged: Corpus,
    pub train: Corpus,
    pub test: Corpus,
}

impl PreparedData {
    pub fn fingerprints(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for c in &self.sources {
            out.insert(format!("source:{}", c.name), fingerprint(c)?);
        }
        out.insert("merged".into(), fingerprint(&self.merged)?);
        out.insert("train".into(), fingerprint(&self.train)?);
        out.insert("test".into(), fingerprint(&self.test)?);
        Ok(out)
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let sources = config
        .corpora
        .iter()
        .map(|s| load_source(config, s))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("ingest", None))?;
    let merged = corpus::merge(&sources).map_err(|e| e.at_stage("ingest", None))?;
    let (train, mut test) =
        corpus::split(&merged, &config.split_spec()?).map_err(|e| e.at_stage("split", None))?;
    if let Some(max) = config.max_test {
        test.pairs.truncate(max);
    }
    let train = if config.test_in_train {
        Corpus {
            name: "train".into(),
            ..merged.clone()
        }
    } else {
        train
    };
    Ok(PreparedData {
        sources,
        merged,
        train,
        test,
    })
}

fn question_items(corpus: &Corpus) -> Vec<(String, String)> {
    corpus
        .pairs
        .iter()
        .map(|p| (p.id.clone(), p.question.clone()))
        .collect()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

#[derive(Serialize)]
struct PromptLine<'a> {
    key: &'a str,
    strategy: &'a str,
    question_id: &'a str,
    prompt: &'a AssembledPrompt,
}

struct Cell {
    key: String,
    audit: AuditRecord,
    prompt: Option<AssembledPrompt>,
    failure: Option<(&'static str, Error)>,
}

struct Stage<'a> {
    train: &'a Corpus,
    index: &'a TypePartitionedIndex,
    classifier: Option<&'a dyn QuestionClassifier>,
    gateway: &'a Gateway,
    statics: &'a [Option<Vec<PromptExample>>],
    strategies: &'a [(String, PromptStrategy)],
    self_exclude: bool,
}

impl Stage<'_> {
    fn select(
        &self,
        s: usize,
        question: &str,
        qvec: &[f32],
        exclude: &HashSet<&str>,
    ) -> Result<(Vec<PromptExample>, Option<qtype::TypePrediction>, bool)> {
        let strategy = &self.strategies[s].1;
        Ok(match strategy.kind {
            StrategyKind::None => (Vec::new(), None, false),
            StrategyKind::Static => (self.statics[s].clone().unwrap_or_default(), None, false),
            StrategyKind::VanillaDynamic => (
                promptgen::select_vanilla(self.index, self.train, qvec, strategy, exclude)?,
                None,
                false,
            ),
            StrategyKind::TypewiseDynamic => {
                let classifier = self
                    .classifier
                    .ok_or_else(|| Error::Classifier("no classifier configured".into()))?;
                let sel =
                    promptgen::select_typewise(self.index, classifier, self.train, question, qvec, strategy, exclude)?;
                (sel.examples, Some(sel.predicted), sel.fallback)
            }
        })
    }

    fn cell(&self, s: usize, q: usize, pair: &corpus::QaPair, qvec: &[f32]) -> Cell {
        let (label, strategy) = &self.strategies[s];
        let key = format!("{s:03}:{q:06}");
        let mut audit = AuditRecord {
            strategy: label.clone(),
            question_id: pair.id.clone(),
            question: pair.question.clone(),
            reference: pair.answer.clone(),
            prompt: None,
            retrieved: Vec::new(),
            predicted_type: None,
            fallback: false,
            short: false,
            generated: None,
            scores: None,
            error: None,
            error_stage: None,
        };
        let fail = |mut audit: AuditRecord, stage: &'static str, e: Error, prompt| {
            audit.error = Some(e.to_string());
            audit.error_stage = Some(stage.to_string());
            Cell {
                key: key.clone(),
                audit,
                prompt,
                failure: Some((stage, e)),
            }
        };

        let exclude: HashSet<&str> = if self.self_exclude {
            HashSet::from([pair.id.as_str()])
        } else {
            HashSet::new()
        };
        let (examples, predicted, fallback) = match self.select(s, &pair.question, qvec, &exclude) {
            Ok(x) => x,
            Err(e) => return fail(audit, "prompt", e, None),
        };
        audit.short = strategy.kind != StrategyKind::None && examples.len() < strategy.k;
        audit.fallback = fallback;
        let mut prompt = promptgen::render(&examples, &pair.question, strategy.order);
        prompt.predicted_type = predicted.clone();
        audit.predicted_type = predicted;
        audit.prompt = Some(prompt.rendered.clone());
        audit.retrieved = prompt
            .examples
            .iter()
            .map(|e| Retrieved {
                id: e.id.clone(),
                score: e.score,
            })
            .collect();

        let generated = match self.gateway.generate(&key, &prompt) {
            Ok(r) => r.text,
            Err(e) => return fail(audit, "generate", e, Some(prompt)),
        };
        audit.generated = Some(generated.clone());
        match score_pair(&generated, &pair.answer) {
            Ok(scores) => audit.scores = Some(scores),
            Err(e) => return fail(audit, "score", e, Some(prompt)),
        }
        Cell {
            key,
            audit,
            prompt: Some(prompt),
            failure: None,
        }
    }
}

/// Output layout under the run directory.
pub mod layout {
    pub const CORPORA: &str = "corpora";
    pub const EMBEDDINGS: &str = "embeddings";
    pub const INDEX: &str = "index";
    pub const CLASSIFIER: &str = "classifier.jsonl";
    pub const PROMPTS: &str = "prompts.jsonl";
    pub const RESPONSES: &str = "responses.jsonl";
    pub const AUDIT: &str = "audit.jsonl";
    pub const REPORT: &str = "report.json";
    pub const CONFIG: &str = "config.json";
}

fn persist_corpora(dir: &Path, data: &PreparedData) -> Result<()> {
    let cdir = dir.join(layout::CORPORA);
    create_dir(&cdir)?;
    for c in &data.sources {
        c.save_jsonl(&cdir.join(format!("source-{}.jsonl", c.name)))?;
    }
    data.merged.save_jsonl(&cdir.join("merged.jsonl"))?;
    data.train.save_jsonl(&cdir.join("train.jsonl"))?;
    data.test.save_jsonl(&cdir.join("test.jsonl"))?;
    let stats = corpus::stats(&data.merged)?;
    write_file(&cdir.join("stats.json"), &serde_json::to_vec_pretty(&stats)?)?;
    let records = corpus::build_finetune_records(&data.train);
    let path = cdir.join("finetune.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    corpus::write_finetune_jsonl(&records, &mut f)?;
    f.flush().map_err(|e| Error::io(&path, e))
}

/// Runs one experiment and writes its artifacts to `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate().map_err(|e| e.at_stage("config", None))?;
    let out = config.output_dir.clone();
    create_dir(&out)?;
    let config_digest = config.digest()?;
    let mut canonical = config.clone();
    canonical.output_dir = PathBuf::new();
    write_file(&out.join(layout::CONFIG), &serde_json::to_vec_pretty(&canonical)?)?;

    let data = prepare_data(config)?;
    persist_corpora(&out, &data).map_err(|e| e.at_stage("ingest", None))?;
    let strategies = config.strategies()?;
    let exec = config.execution;

    let embedder = build_embedder(&config.embedder).map_err(|e| e.at_stage("embed", None))?;
    let edir = out.join(layout::EMBEDDINGS);
    create_dir(&edir)?;
    let train_store = EmbeddingStore::build(embedder.as_ref(), &config.instruction, &question_items(&data.train))
        .map_err(|e| e.at_stage("embed", None))?;
    train_store.save(&edir.join("train.jsonl"))?;
    let test_texts: Vec<String> = data.test.pairs.iter().map(|p| p.question.clone()).collect();
    let test_vecs =
        embed_texts(embedder.as_ref(), &config.instruction, &test_texts).map_err(|e| e.at_stage("embed", None))?;
    let mut test_store = EmbeddingStore::new(&config.instruction, train_store.dim())?;
    for (p, v) in data.test.pairs.iter().zip(&test_vecs) {
        test_store.insert(p.id.clone(), v.clone()).map_err(|e| e.at_stage("embed", Some(&p.id)))?;
    }
    test_store.save(&edir.join("test.jsonl"))?;

    let index = TypePartitionedIndex::build(&train_store, &data.train)
        .map_err(|e| e.at_stage("index", None))?
        .with_exec(exec);
    index.save(&out.join(layout::INDEX))?;

    let needs_classifier = strategies.iter().any(|(_, s)| s.kind == StrategyKind::TypewiseDynamic);
    let mut centroid = None;
    let mut http_classifier = None;
    let mut classifier_name = None;
    if needs_classifier {
        match &config.classifier {
            ClassifierConfig::Centroid => {
                let model = qtype::train_centroids(&train_store, &data.train).map_err(|e| e.at_stage("classify", None))?;
                model.save(&out.join(layout::CLASSIFIER))?;
                classifier_name = Some(model.name());
                centroid = Some(model);
            }
            ClassifierConfig::Http(endpoint) => {
                let c = HttpClassifier::new(endpoint.clone()).map_err(|e| e.at_stage("classify", None))?;
                classifier_name = Some(c.name());
                http_classifier = Some(c);
            }
        }
    }
    let classifier: Option<&dyn QuestionClassifier> = match (&centroid, &http_classifier) {
        (Some(c), _) => Some(c as &dyn QuestionClassifier),
        (_, Some(h)) => Some(h as &dyn QuestionClassifier),
        _ => None,
    };

    // Static examples are drawn once per strategy and reused for every question.
    let statics = strategies
        .iter()
        .map(|(_, s)| match s.kind {
            StrategyKind::Static => promptgen::select_static(&data.train, s).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("prompt", None))?;

    let gateway = build_gateway(config).map_err(|e| e.at_stage("generate", None))?;
    let stage = Stage {
        train: &data.train,
        index: &index,
        classifier,
        gateway: &gateway,
        statics: &statics,
        strategies: &strategies,
        self_exclude: config.self_exclude,
    };
    let tasks: Vec<(usize, usize)> = (0..strategies.len())
        .flat_map(|s| (0..data.test.len()).map(move |q| (s, q)))
        .collect();
    let mut cells: Vec<Cell> = exec.with_threads(config.concurrency, || {
        exec.map(&tasks, |&(s, q)| stage.cell(s, q, &data.test.pairs[q], &test_vecs[q]))
    });

    let prompt_lines = cells.iter().filter_map(|c| {
        c.prompt.as_ref().map(|p| PromptLine {
            key: &c.key,
            strategy: &c.audit.strategy,
            question_id: &c.audit.question_id,
            prompt: p,
        })
    });
    write_jsonl(&out.join(layout::PROMPTS), prompt_lines)?;
    gateway.log().write_jsonl(&out.join(layout::RESPONSES))?;
    write_jsonl(&out.join(layout::AUDIT), cells.iter().map(|c| &c.audit))?;

    if config.abort_on_error {
        if let Some(c) = cells.iter_mut().find(|c| c.failure.is_some()) {
            let (stage_name, e) = c.failure.take().expect("checked above");
            return Err(e.at_stage(stage_name, Some(&c.audit.question_id)));
        }
    }

    let mut rows = Vec::with_capacity(strategies.len());
    for (s, (label, strategy)) in strategies.iter().enumerate() {
        let mine: Vec<&AuditRecord> = cells[s * data.test.len()..(s + 1) * data.test.len()]
            .iter()
            .map(|c| &c.audit)
            .collect();
        let pairs: Vec<(String, String)> = mine
            .iter()
            .filter(|a| a.error.is_none())
            .filter_map(|a| a.generated.clone().map(|g| (g, a.reference.clone())))
            .collect();
        let metrics = if pairs.is_empty() {
            None
        } else {
            Some(score_run(&pairs, config.scale, exec).map_err(|e| e.at_stage("score", None))?)
        };
        rows.push(StrategyRow {
            label: label.clone(),
            strategy: *strategy,
            metrics,
            scored: pairs.len(),
            excluded: mine.len() - pairs.len(),
            short_prompts: mine.iter().filter(|a| a.short).count(),
            fallbacks: mine.iter().filter(|a| a.fallback).count(),
        });
    }

    let report = RunReport {
        name: config.name.clone(),
        config_digest,
        corpus_fingerprints: data.fingerprints()?,
        embedder: embedder.name(),
        classifier: classifier_name,
        generator: gateway.backend_name(),
        scale: config.scale,
        test_ids: data.test.ids().into_iter().map(str::to_owned).collect(),
        rows,
        audit: cells.into_iter().map(|c| c.audit).collect(),
        digest: String::new(),
    }
    .seal()?;
    write_file(&out.join(layout::REPORT), &report.to_json()?)?;
    write_tables(&report, TableFormat::Markdown, &out, "report")?;
    write_tables(&report, TableFormat::Csv, &out, "report")?;
    log::info!("run {} finished: digest {}", report.name, report.digest);
    Ok(report)
}

/// One full run per `k`, each in `{output_dir}/k{k}`, plus a combined
/// table `ablation.md` / `ablation.csv` in the output directory.
pub fn ablate_k(config: &ExperimentConfig, ks: &[usize]) -> Result<Vec<(usize, RunReport)>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k values must be non-empty and all >= 1".into()).at_stage("config", None));
    }
    let mut reports = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = config.clone();
        c.k = k;
        for s in &mut c.strategies {
            s.k = Some(k);
        }
        c.output_dir = config.output_dir.join(format!("k{k}"));
        reports.push((k, run(&c)?));
    }
    for format in [TableFormat::Markdown, TableFormat::Csv] {
        let text = render_ablation(&reports, format)?;
        let path = config.output_dir.join(format!("ablation.{}", format.extension()));
        write_file(&path, text.as_bytes())?;
    }
    Ok(reports)
}

pub fn render_ablation(reports: &[(usize, RunReport)], format: TableFormat) -> Result<String> {
    let mut header = vec!["k"];
    header.extend(TABLE_HEADER);
    let mut rows = Vec::new();
    for (k, report) in reports {
        for row in report.table_rows() {
            let mut cells = vec![k.to_string(), row.label.clone()];
            match row.values {
                Some(v) => cells.extend(v.iter().map(|x| format!("{x:.3}"))),
                None => cells.extend(std::iter::repeat_n("n/a".to_string(), 4)),
            }
            rows.push(cells);
        }
    }
    render_rows(&header, &rows, 2, format)
}
