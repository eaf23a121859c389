//! Question-type prediction used to route retrieval to a type block.
//!
//! The native model is a nearest-centroid classifier in embedding space. An
//! HTTP classifier with the same [`QuestionClassifier`] interface lets an
//! external model take its place.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding::{snippet, EmbeddingStore};
use crate::error::{Error, Result};
use crate::vindex::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypePrediction {
    pub label: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_up: Option<(String, f64)>,
}

pub trait QuestionClassifier: Send + Sync {
    /// Predicts the type of one question. Implementations may use either the
    /// text or its (unit) embedding.
    fn predict(&self, question: &str, embedding: &[f32]) -> Result<TypePrediction>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    labels: Vec<String>,
    centroids: Vec<Vec<f32>>,
    instruction: String,
    dim: usize,
}

/// Trains on every typed pair of `corpus` that has an embedding in `store`.
/// Untyped pairs are ignored; labels come from the data.
pub fn train_centroids(store: &EmbeddingStore, corpus: &Corpus) -> Result<CentroidModel> {
    let mut labels: Vec<String> = corpus.pairs.iter().filter_map(|p| p.qtype.clone()).collect();
    labels.sort();
    labels.dedup();
    train_centroids_for(store, corpus, &labels)
}

/// Like [`train_centroids`] with an explicit label set; each label needs at
/// least one embedded example.
pub fn train_centroids_for(store: &EmbeddingStore, corpus: &Corpus, labels: &[String]) -> Result<CentroidModel> {
    let mut labels = labels.to_vec();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Classifier(format!(
            "classifier degenerate: need at least 2 labels, found {}",
            labels.len()
        )));
    }
    let dim = store.dim();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = labels
        .iter()
        .map(|l| (l.as_str(), (vec![0.0; dim], 0)))
        .collect();
    let vectors: BTreeMap<&str, &[f32]> = store
        .entries()
        .iter()
        .map(|e| (e.id.as_str(), e.vector.as_slice()))
        .collect();
    for p in &corpus.pairs {
        let (Some(t), Some(v)) = (p.qtype.as_deref(), vectors.get(p.id.as_str())) else {
            continue;
        };
        if let Some((sum, n)) = sums.get_mut(t) {
            for (s, &x) in sum.iter_mut().zip(v.iter()) {
                *s += x as f64;
            }
            *n += 1;
        }
    }
    let mut centroids = Vec::with_capacity(labels.len());
    for label in &labels {
        let (sum, n) = &sums[label.as_str()];
        if *n == 0 {
            return Err(Error::Classifier(format!("label {label:?} has no training examples")));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / *n as f64).collect();
        let c = crate::embedding::normalize(&mean)
            .map_err(|_| Error::Classifier(format!("centroid of {label:?} is the zero vector")))?;
        centroids.push(c);
    }
    Ok(CentroidModel {
        labels,
        centroids,
        instruction: store.instruction().to_string(),
        dim,
    })
}

impl CentroidModel {
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn centroid(&self, label: &str) -> Option<&[f32]> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.centroids[i].as_slice())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    /// Argmax of cosine similarity; ties go to the lexicographically
    /// smallest label.
    pub fn predict_type(&self, query: &[f32]) -> Result<TypePrediction> {
        if query.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| cosine(query, c).map(|s| (i, s)))
            .collect::<Result<_>>()?;
        // labels are sorted, so index order is label order
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let (best, score) = scored[0];
        Ok(TypePrediction {
            label: self.labels[best].clone(),
            score,
            runner_up: scored.get(1).map(|&(i, s)| (self.labels[i].clone(), s)),
        })
    }

    pub fn to_store(&self) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.instruction.clone(), self.dim)?;
        for (l, c) in self.labels.iter().zip(&self.centroids) {
            store.insert(l.clone(), c.clone())?;
        }
        Ok(store)
    }

    pub fn from_store(store: &EmbeddingStore) -> Result<Self> {
        let mut pairs: Vec<(String, Vec<f32>)> = store
            .entries()
            .iter()
            .map(|e| (e.id.clone(), e.vector.clone()))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        if pairs.len() < 2 {
            return Err(Error::Classifier("classifier degenerate: fewer than 2 centroids".into()));
        }
        let (labels, centroids) = pairs.into_iter().unzip();
        Ok(CentroidModel {
            labels,
            centroids,
            instruction: store.instruction().to_string(),
            dim: store.dim(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&EmbeddingStore::load(path)?)
    }
}

impl QuestionClassifier for CentroidModel {
    fn predict(&self, _question: &str, embedding: &[f32]) -> Result<TypePrediction> {
        self.predict_type(embedding)
    }

    fn name(&self) -> String {
        format!("nearest-centroid({} labels)", self.labels.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub accuracy: f64,
    /// Row = true label, column = predicted label, both in `labels` order.
    pub labels: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

pub fn eval_classifier(model: &CentroidModel, store: &EmbeddingStore, labeled: &Corpus) -> Result<ClassifierEval> {
    if labeled.is_empty() {
        return Err(Error::Classifier("empty evaluation set".into()));
    }
    let mut outcomes = Vec::with_capacity(labeled.len());
    for p in &labeled.pairs {
        let truth = p
            .qtype
            .as_deref()
            .ok_or_else(|| Error::Classifier(format!("pair {} has no question type", p.id)))?;
        let v = store
            .get(&p.id)
            .ok_or_else(|| Error::Classifier(format!("pair {} has no embedding", p.id)))?;
        outcomes.push((truth.to_string(), model.predict_type(v)?.label));
    }
    let mut labels: Vec<String> = model.labels.clone();
    labels.extend(outcomes.iter().map(|(t, _)| t.clone()));
    labels.sort();
    labels.dedup();
    let pos = |l: &str| labels.binary_search_by(|x| x.as_str().cmp(l)).unwrap();
    let mut confusion = vec![vec![0usize; labels.len()]; labels.len()];
    let mut correct = 0;
    for (t, p) in &outcomes {
        confusion[pos(t)][pos(p)] += 1;
        if t == p {
            correct += 1;
        }
    }
    Ok(ClassifierEval {
        accuracy: correct as f64 / outcomes.len() as f64,
        labels,
        confusion,
        total: outcomes.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct ClassifyResponse {
    labels: Vec<String>,
    scores: Vec<f64>,
}

/// Client for `POST {base_url}/classify`.
pub struct HttpClassifier {
    endpoint: ClassifierEndpoint,
    client: reqwest::blocking::Client,
}

impl HttpClassifier {
    pub fn new(endpoint: ClassifierEndpoint) -> Result<Self> {
        if endpoint.timeout_secs.is_nan() || endpoint.timeout_secs <= 0.0 {
            return Err(Error::Config("classifier timeout must be > 0".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::Classifier(format!("building http client: {e}")))?;
        Ok(HttpClassifier { endpoint, client })
    }

    pub fn classify(&self, texts: &[String]) -> Result<Vec<TypePrediction>> {
        let url = format!("{}/classify", self.endpoint.base_url.trim_end_matches('/'));
        let resp = self
            .client
            .post(url)
            .json(&ClassifyRequest { texts })
            .send()
            .map_err(|e| Error::Classifier(format!("transport: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().unwrap_or_default();
            return Err(Error::Classifier(format!("HTTP {status}: {}", snippet(&body))));
        }
        let body: ClassifyResponse = resp
            .json()
            .map_err(|e| Error::Protocol(format!("bad classify response: {e}")))?;
        if body.labels.len() != texts.len() || body.scores.len() != texts.len() {
            return Err(Error::Protocol(format!(
                "sent {} texts, received {} labels and {} scores",
                texts.len(),
                body.labels.len(),
                body.scores.len()
            )));
        }
        Ok(body
            .labels
            .into_iter()
            .zip(body.scores)
            .map(|(label, score)| TypePrediction {
                label,
                score,
                runner_up: None,
            })
            .collect())
    }
}

impl QuestionClassifier for HttpClassifier {
    fn predict(&self, question: &str, _embedding: &[f32]) -> Result<TypePrediction> {
        let mut out = self.classify(&[question.to_string()])?;
        Ok(out.remove(0))
    }

    fn name(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}
