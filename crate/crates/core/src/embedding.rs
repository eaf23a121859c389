//! Question embeddings: the embedder contract, a deterministic
//! feature-hashing mock, an HTTP client, and the on-disk store format.
//!
//! Every stored vector is L2-normalized on insert, so cosine similarity
//! downstream is a plain dot product.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::textmetrics::tokenize_eval;

pub const DEFAULT_INSTRUCTION: &str = "Represent the Medicine sentence for retrieval: ";

/// Allowed deviation of a stored vector's L2 norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub const MIN_MOCK_DIM: usize = 8;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// Bucket a (lowercased) word lands in under the mock embedder.
pub fn mock_bucket(word: &str, dim: usize) -> usize {
    (fnv1a64(word.as_bytes()) % dim as u64) as usize
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Scales `v` to unit length, computing in double precision.
pub fn normalize(v: &[f64]) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::Embedding("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

fn normalize_f32(v: &[f32]) -> Result<Vec<f32>> {
    normalize(&v.iter().map(|&x| x as f64).collect::<Vec<_>>())
}

/// Feature-hashing bag of words: each token adds 1 to bucket
/// `fnv1a64(token) % dim`, then the vector is L2-normalized.
pub fn mock_embed(text: &str, dim: usize) -> Result<Vec<f32>> {
    if dim < MIN_MOCK_DIM {
        return Err(Error::Embedding(format!(
            "mock embedder needs dim >= {MIN_MOCK_DIM}, got {dim}"
        )));
    }
    let tokens = tokenize_eval(text);
    if tokens.is_empty() {
        return Err(Error::Embedding(format!("no word tokens in {text:?}")));
    }
    let mut v = vec![0.0f64; dim];
    for t in tokens.as_slice() {
        v[mock_bucket(t, dim)] += 1.0;
    }
    normalize(&v)
}

/// Anything that turns texts into vectors under an instruction string.
/// Outputs need not be normalized; [`embed_texts`] takes care of that.
pub trait Embedder: Send + Sync {
    fn embed_batch(&self, instruction: &str, texts: &[String]) -> Result<Vec<Vec<f32>>>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy)]
pub struct MockEmbedder {
    pub dim: usize,
    pub exec: Execution,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        MockEmbedder {
            dim,
            exec: Execution::default(),
        }
    }
}

impl Embedder for MockEmbedder {
    fn embed_batch(&self, _instruction: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.exec.try_map(texts, |t| mock_embed(t, self.dim))
    }

    fn name(&self) -> String {
        format!("mock-fnv1a64-d{}", self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
    #[serde(default)]
    pub retries: u32,
    /// Base delay for exponential backoff between attempts.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Maximum number of batch requests in flight at once.
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

fn default_timeout_secs() -> f64 {
    30.0
}
fn default_max_batch() -> usize {
    32
}
fn default_backoff_ms() -> u64 {
    200
}
fn default_concurrency() -> usize {
    1
}

impl EmbedderEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        EmbedderEndpoint {
            base_url: base_url.into(),
            timeout_secs: default_timeout_secs(),
            max_batch: default_max_batch(),
            retries: 0,
            backoff_ms: default_backoff_ms(),
            concurrency: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(Error::Config("embedder max_batch must be >= 1".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(Error::Config("embedder timeout must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    instruction: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f32>>,
}

/// Client for `POST {base_url}/embed`.
pub struct HttpEmbedder {
    endpoint: EmbedderEndpoint,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: EmbedderEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::Embedding(format!("building http client: {e}")))?;
        Ok(HttpEmbedder { endpoint, client })
    }

    fn url(&self) -> String {
        format!("{}/embed", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn request(&self, instruction: &str, texts: &[String]) -> Result<EmbedResponse> {
        let body = EmbedRequest { instruction, texts };
        let attempts = self.endpoint.retries + 1;
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.client.post(self.url()).json(&body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if !status.is_success() {
                        let text = resp.text().unwrap_or_default();
                        return Err(Error::Endpoint {
                            attempts: attempt,
                            message: format!("HTTP {status}: {}", snippet(&text)),
                        });
                    }
                    return resp
                        .json::<EmbedResponse>()
                        .map_err(|e| Error::Protocol(format!("bad embed response: {e}")));
                }
                Err(e) => {
                    log::warn!("embed attempt {attempt}/{attempts} failed: {e}");
                    last_err = e.to_string();
                }
            }
        }
        Err(Error::Endpoint {
            attempts,
            message: last_err,
        })
    }
}

pub(crate) fn snippet(s: &str) -> String {
    const MAX: usize = 200;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

impl Embedder for HttpEmbedder {
    fn embed_batch(&self, instruction: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<&[String]> = texts.chunks(self.endpoint.max_batch).collect();
        let responses = Execution::Parallel.with_threads(self.endpoint.concurrency, || {
            Execution::Parallel.try_map(&chunks, |chunk| {
                let resp = self.request(instruction, chunk)?;
                if resp.embeddings.len() != chunk.len() {
                    return Err(Error::Protocol(format!(
                        "sent {} texts, received {} embeddings",
                        chunk.len(),
                        resp.embeddings.len()
                    )));
                }
                if let Some(v) = resp.embeddings.iter().find(|v| v.len() != resp.dim) {
                    return Err(Error::Protocol(format!(
                        "response declares dim {} but holds a vector of length {}",
                        resp.dim,
                        v.len()
                    )));
                }
                Ok(resp)
            })
        })?;

        let dim = responses.first().map(|r| r.dim);
        if let Some(r) = responses.iter().find(|r| Some(r.dim) != dim) {
            return Err(Error::Protocol(format!(
                "dimension changed across batches: {} vs {}",
                dim.unwrap_or_default(),
                r.dim
            )));
        }
        Ok(responses.into_iter().flat_map(|r| r.embeddings).collect())
    }

    fn name(&self) -> String {
        format!("http:{}", self.endpoint.base_url)
    }
}

/// Embeds `texts` in order and L2-normalizes every vector.
pub fn embed_texts(embedder: &dyn Embedder, instruction: &str, texts: &[String]) -> Result<Vec<Vec<f32>>> {
    if texts.is_empty() {
        return Err(Error::Embedding("nothing to embed".into()));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::Embedding(format!("text {i} is empty")));
    }
    let raw = embedder.embed_batch(instruction, texts)?;
    if raw.len() != texts.len() {
        return Err(Error::Protocol(format!(
            "embedder returned {} vectors for {} texts",
            raw.len(),
            texts.len()
        )));
    }
    raw.iter().map(|v| normalize_f32(v)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub id: String,
    pub vector: Vec<f32>,
}

/// Id-aligned unit vectors plus the instruction they were produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    instruction: String,
    dim: usize,
    entries: Vec<StoreEntry>,
    positions: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    dim: usize,
    instruction: String,
    count: usize,
}

impl EmbeddingStore {
    pub fn new(instruction: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("store dimension must be positive".into()));
        }
        Ok(EmbeddingStore {
            instruction: instruction.into(),
            dim,
            entries: Vec::new(),
            positions: HashMap::new(),
        })
    }

    /// Embeds `(id, text)` items into a fresh store.
    pub fn build(embedder: &dyn Embedder, instruction: &str, items: &[(String, String)]) -> Result<Self> {
        let texts: Vec<String> = items.iter().map(|(_, t)| t.clone()).collect();
        let vectors = embed_texts(embedder, instruction, &texts)?;
        let dim = vectors[0].len();
        let mut store = EmbeddingStore::new(instruction, dim)?;
        for ((id, _), v) in items.iter().zip(vectors) {
            store.insert(id.clone(), v)?;
        }
        Ok(store)
    }

    /// Adds a vector, normalizing it. Rejects duplicate ids, wrong
    /// dimensions and zero vectors.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: vector.len(),
            });
        }
        if self.positions.contains_key(&id) {
            return Err(Error::Embedding(format!("duplicate id {id:?} in store")));
        }
        let vector = normalize_f32(&vector)?;
        self.positions.insert(id.clone(), self.entries.len());
        self.entries.push(StoreEntry { id, vector });
        Ok(())
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.positions
            .get(id)
            .map(|&i| self.entries[i].vector.as_slice())
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<store>", e);
        let header = StoreHeader {
            dim: self.dim,
            instruction: self.instruction.clone(),
            count: self.entries.len(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Parses the store format; `file` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let fail = |offset: usize, message: String| Error::Format {
            file: file.to_string(),
            offset: offset as u64,
            message,
        };
        let mut lines = Vec::new();
        let mut start = 0;
        for (i, &b) in bytes.iter().enumerate() {
            if b == b'\n' {
                lines.push((start, &bytes[start..i]));
                start = i + 1;
            }
        }
        if start < bytes.len() {
            lines.push((start, &bytes[start..]));
        }
        let mut lines = lines.into_iter().filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace));

        let Some((hoff, hline)) = lines.next() else {
            return Err(fail(0, "empty store file".into()));
        };
        let header: StoreHeader =
            serde_json::from_slice(hline).map_err(|e| fail(hoff, format!("bad header: {e}")))?;
        if header.dim == 0 {
            return Err(fail(hoff, "header dim must be positive".into()));
        }

        let mut store = EmbeddingStore::new(header.instruction, header.dim)?;
        for (off, line) in lines {
            let entry: StoreEntry =
                serde_json::from_slice(line).map_err(|e| fail(off, format!("bad entry: {e}")))?;
            if entry.vector.len() != header.dim {
                return Err(fail(
                    off,
                    format!(
                        "entry {:?} has {} components, header says {}",
                        entry.id,
                        entry.vector.len(),
                        header.dim
                    ),
                ));
            }
            let norm = l2_norm(&entry.vector);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(fail(off, format!("entry {:?} has norm {norm}", entry.id)));
            }
            if store
                .positions
                .insert(entry.id.clone(), store.entries.len())
                .is_some()
            {
                return Err(fail(off, format!("duplicate id {:?}", entry.id)));
            }
            store.entries.push(entry);
        }
        if store.entries.len() != header.count {
            return Err(fail(
                bytes.len(),
                format!(
                    "header promises {} entries, found {}",
                    header.count,
                    store.entries.len()
                ),
            ));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vindex::cosine;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn fnv_reference_values() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn mock_is_deterministic_and_unit() {
        let a = mock_embed("What are the symptoms of fever?", 64).unwrap();
        let b = mock_embed("What are the symptoms of fever?", 64).unwrap();
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
        assert!(mock_embed("?!", 64).is_err());
        assert!(mock_embed("x", 4).is_err());
    }

    #[test]
    fn distinct_buckets_give_orthogonal_vectors() {
        // independent bucket computation
        let bucket = |w: &str| {
            let mut h: u64 = 14695981039346656037;
            for b in w.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            (h % 64) as usize
        };
        let (x, y) = ("fever", "cough");
        assert_ne!(bucket(x), bucket(y));
        let s = cosine(&mock_embed(x, 64).unwrap(), &mock_embed(y, 64).unwrap()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn store_round_trip() {
        let mut s = EmbeddingStore::new(DEFAULT_INSTRUCTION, 3).unwrap();
        s.insert("a", vec![0.3, -0.2, 0.9]).unwrap();
        s.insert("b", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(s.insert("a", vec![1.0, 0.0, 0.0]).is_err());
        assert!(s.insert("c", vec![1.0, 0.0]).is_err());
        assert!(s.insert("z", vec![0.0; 3]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        s.save(&path).unwrap();
        let back = EmbeddingStore::load(&path).unwrap();
        assert_eq!(back.instruction(), DEFAULT_INSTRUCTION);
        assert_eq!(back.len(), 2);
        for (x, y) in s.entries().iter().zip(back.entries()) {
            assert_eq!(x.id, y.id);
            for (p, q) in x.vector.iter().zip(&y.vector) {
                assert!((p - q).abs() <= 1e-7);
            }
        }
        let header = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(header.lines().next().unwrap()).unwrap();
        assert_eq!(first["dim"], 3);
        assert_eq!(first["count"], 2);
    }

    #[test]
    fn store_format_errors() {
        assert!(matches!(
            EmbeddingStore::from_bytes(b"", "f"),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut s = EmbeddingStore::new("i", 64).unwrap();
        s.insert("a", mock_embed("hello world", 64).unwrap()).unwrap();
        let good = String::from_utf8(s.to_bytes().unwrap()).unwrap();
        let header_len = good.find('\n').unwrap() + 1;
        let mut v: Vec<f32> = s.entries()[0].vector.clone();
        v.pop();
        let bad = format!(
            "{}{}\n",
            &good[..header_len],
            serde_json::json!({"id": "a", "vector": v})
        );
        match EmbeddingStore::from_bytes(bad.as_bytes(), "f") {
            Err(Error::Format { offset, message, .. }) => {
                assert_eq!(offset as usize, header_len);
                assert!(message.contains("63"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let truncated = &good[..header_len];
        assert!(matches!(
            EmbeddingStore::from_bytes(truncated.as_bytes(), "f"),
            Err(Error::Format { .. })
        ));
        assert!(EmbeddingStore::from_bytes(b"{not json", "f").is_err());
    }

    #[test]
    fn mock_embedder_preserves_order_under_permutation() {
        let texts: Vec<String> = ["alpha beta", "gamma", "delta epsilon zeta", "eta"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mock = MockEmbedder::new(32);
        let out = embed_texts(&mock, DEFAULT_INSTRUCTION, &texts).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<String> = perm.iter().map(|&i| texts[i].clone()).collect();
        let out_p = embed_texts(&mock, DEFAULT_INSTRUCTION, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(out_p[k], out[i]);
        }
        assert!(embed_texts(&mock, "", &[]).is_err());
        assert!(embed_texts(&mock, "", &["  ".to_string()]).is_err());
    }

    #[test]
    fn mock_cosine_is_symmetric_and_nonnegative() {
        let words = ["fever", "cough", "rash", "pain", "fatigue", "nausea"];
        for a in &words {
            for b in &words {
                let x = mock_embed(&format!("{a} {b}"), 16).unwrap();
                let y = mock_embed(&format!("{b} pain"), 16).unwrap();
                let s1 = dot(&x, &y);
                let s2 = dot(&y, &x);
                assert_eq!(s1, s2);
                assert!((-1e-12..=1.0 + 1e-6).contains(&s1));
            }
        }
    }
}
