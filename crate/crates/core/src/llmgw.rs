//! Generation backends behind one contract: an HTTP endpoint with retries
//! and stop trimming, and deterministic mocks for offline runs. Every call
//! through a [`Gateway`] leaves exactly one record in its response log.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::snippet;
use crate::error::{Error, Result};
use crate::promptgen::AssembledPrompt;

pub const DEFAULT_STOP: &str = "\nQuestion:";
pub const MEDQUAD_MAX_TOKENS: usize = 300;
pub const ICLINIQ_MAX_TOKENS: usize = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_tokens: MEDQUAD_MAX_TOKENS,
            temperature: 0.0,
            stop: vec![DEFAULT_STOP.to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Backend { attempts: 0, message: "empty prompt".into() });
        }
        if self.max_tokens == 0 {
            return Err(Error::Backend { attempts: 0, message: "max_tokens must be >= 1".into() });
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Backend { attempts: 0, message: "temperature must be >= 0".into() });
        }
        Ok(())
    }

    /// SHA-256 of the request's JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    #[serde(with = "millis")]
    pub latency: Duration,
    pub backend: String,
    pub attempt: u32,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Cuts `text` at the earliest occurrence of any stop string.
pub fn trim_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MockMode {
    Fixed { text: String },
    EchoLastExample,
    EchoQuestion,
}

impl MockMode {
    pub fn name(&self) -> &'static str {
        match self {
            MockMode::Fixed { .. } => "mock:fixed",
            MockMode::EchoLastExample => "mock:echo_last_example",
            MockMode::EchoQuestion => "mock:echo_question",
        }
    }
}

/// Deterministic stand-in for a model. Latency is reported as zero so that
/// repeated runs produce identical logs.
pub fn mock_generate(mode: &MockMode, prompt: &AssembledPrompt) -> Result<GenerationResult> {
    let text = match mode {
        MockMode::Fixed { text } => text.clone(),
        MockMode::EchoLastExample => prompt
            .examples
            .last()
            .map(|e| e.answer.clone())
            .ok_or_else(|| Error::Backend {
                attempts: 1,
                message: "echo_last_example needs at least one example in the prompt".into(),
            })?,
        MockMode::EchoQuestion => prompt.test_question.clone(),
    };
    Ok(GenerationResult {
        text,
        latency: Duration::ZERO,
        backend: mode.name().to_string(),
        attempt: 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}

impl GeneratorEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        GeneratorEndpoint {
            base_url: base_url.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Client for `POST {base_url}/generate`.
pub struct HttpGenerator {
    endpoint: GeneratorEndpoint,
    client: reqwest::blocking::Client,
}

impl HttpGenerator {
    pub fn new(endpoint: GeneratorEndpoint) -> Result<Self> {
        if endpoint.timeout_secs.is_nan() || endpoint.timeout_secs <= 0.0 {
            return Err(Error::Config("generator timeout must be > 0".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::Backend { attempts: 0, message: format!("building http client: {e}") })?;
        Ok(HttpGenerator { endpoint, client })
    }

    /// Sends the request, retrying transport failures with exponential
    /// backoff. A non-200 answer fails immediately.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult> {
        request.validate()?;
        let url = format!("{}/generate", self.endpoint.base_url.trim_end_matches('/'));
        let attempts = self.endpoint.retries + 1;
        let started = Instant::now();
        let mut last_err = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let resp = match self.client.post(&url).json(request).send() {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("generate attempt {attempt}/{attempts} failed: {e}");
                    last_err = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if !status.is_success() {
                let body = resp.text().unwrap_or_default();
                return Err(Error::Backend {
                    attempts: attempt,
                    message: format!("HTTP {}: {}", status.as_u16(), snippet(&body)),
                });
            }
            let body: GenerateResponse = resp.json().map_err(|e| Error::Backend {
                attempts: attempt,
                message: format!("bad generate response: {e}"),
            })?;
            return Ok(GenerationResult {
                text: trim_at_stop(&body.text, &request.stop).to_string(),
                latency: started.elapsed(),
                backend: format!("http:{}", self.endpoint.base_url),
                attempt,
            });
        }
        Err(Error::Backend {
            attempts,
            message: last_err,
        })
    }
}

pub enum Backend {
    Http(HttpGenerator),
    Mock(MockMode),
}

/// Sampling parameters applied to every prompt of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: MEDQUAD_MAX_TOKENS,
            temperature: 0.0,
            stop: vec![DEFAULT_STOP.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    /// Caller-chosen key used to order the log.
    pub key: String,
    pub request_digest: String,
    pub backend: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: u64,
    pub attempt: u32,
}

/// Append-only, shared between worker threads.
#[derive(Debug, Default)]
pub struct ResponseLog {
    records: Mutex<Vec<ResponseRecord>>,
}

impl ResponseLog {
    pub fn append(&self, record: ResponseRecord) {
        self.records.lock().expect("response log poisoned").push(record);
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("response log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records ordered by key (insertion order among equal keys).
    pub fn snapshot(&self) -> Vec<ResponseRecord> {
        let mut out = self.records.lock().expect("response log poisoned").clone();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in self.snapshot() {
            serde_json::to_writer(&mut out, &r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

pub struct Gateway {
    backend: Backend,
    params: GenerationParams,
    log: ResponseLog,
}

impl Gateway {
    pub fn new(backend: Backend, params: GenerationParams) -> Self {
        Gateway {
            backend,
            params,
            log: ResponseLog::default(),
        }
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    pub fn log(&self) -> &ResponseLog {
        &self.log
    }

    pub fn backend_name(&self) -> String {
        match &self.backend {
            Backend::Http(h) => format!("http:{}", h.endpoint.base_url),
            Backend::Mock(m) => m.name().to_string(),
        }
    }

    pub fn request_for(&self, prompt: &AssembledPrompt) -> GenerationRequest {
        GenerationRequest {
            prompt: prompt.rendered.clone(),
            max_tokens: self.params.max_tokens,
            temperature: self.params.temperature,
            stop: self.params.stop.clone(),
        }
    }

    /// Generates an answer for `prompt` and logs the call under `key`.
    pub fn generate(&self, key: &str, prompt: &AssembledPrompt) -> Result<GenerationResult> {
        let request = self.request_for(prompt);
        let result = request.validate().and_then(|_| match &self.backend {
            Backend::Http(h) => h.generate(&request),
            Backend::Mock(mode) => mock_generate(mode, prompt).map(|mut r| {
                r.text = trim_at_stop(&r.text, &request.stop).to_string();
                r
            }),
        });
        let (text, error, latency, attempt) = match &result {
            Ok(r) => (Some(r.text.clone()), None, r.latency, r.attempt),
            Err(e) => {
                let attempts = match e {
                    Error::Backend { attempts, .. } => *attempts,
                    _ => 1,
                };
                (None, Some(e.to_string()), Duration::ZERO, attempts)
            }
        };
        self.log.append(ResponseRecord {
            key: key.to_string(),
            request_digest: request.digest(),
            backend: self.backend_name(),
            text,
            error,
            latency_ms: latency.as_millis() as u64,
            attempt,
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::promptgen::{render, ExampleOrder, PromptExample};
    use proptest::prelude::*;

    fn prompt_with(answers: &[&str]) -> AssembledPrompt {
        let examples: Vec<PromptExample> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| PromptExample {
                id: i.to_string(),
                question: format!("q{i}?"),
                answer: a.to_string(),
                score: Some(i as f64 / 10.0),
            })
            .collect();
        render(&examples, "What is fever?", ExampleOrder::AscendingSimilarity)
    }

    #[test]
    fn mock_modes() {
        let p = prompt_with(&["Drink water.", "Take rest."]);
        let fixed = MockMode::Fixed { text: "OK".into() };
        assert_eq!(mock_generate(&fixed, &p).unwrap().text, "OK");
        assert_eq!(mock_generate(&MockMode::EchoLastExample, &p).unwrap().text, "Take rest.");
        assert_eq!(mock_generate(&MockMode::EchoQuestion, &p).unwrap().text, "What is fever?");
        assert!(mock_generate(&MockMode::EchoLastExample, &prompt_with(&[])).is_err());
        assert_eq!(
            mock_generate(&MockMode::EchoLastExample, &p).unwrap(),
            mock_generate(&MockMode::EchoLastExample, &p).unwrap()
        );
    }

    #[test]
    fn stop_trimming() {
        let stops = vec![DEFAULT_STOP.to_string()];
        assert_eq!(trim_at_stop("A1\nQuestion: junk", &stops), "A1");
        assert_eq!(trim_at_stop("no stop here", &stops), "no stop here");
        let two = vec!["END".to_string(), "\n\n".to_string()];
        assert_eq!(trim_at_stop("x\n\ny END", &two), "x");
    }

    #[test]
    fn gateway_logs_every_call() {
        let gw = Gateway::new(Backend::Mock(MockMode::EchoLastExample), GenerationParams::default());
        let ok = prompt_with(&["a"]);
        let bad = prompt_with(&[]);
        assert!(gw.generate("k2", &ok).is_ok());
        assert!(gw.generate("k1", &bad).is_err());
        assert!(gw.generate("k3", &ok).is_ok());
        let recs = gw.log().snapshot();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].key, "k1");
        assert!(recs[0].error.is_some());
        assert_eq!(recs[1].text.as_deref(), Some("a"));
        assert_eq!(recs[1].request_digest, gw.request_for(&ok).digest());
    }

    #[test]
    fn request_validation() {
        let mut r = GenerationRequest::new("p");
        assert!(r.validate().is_ok());
        r.max_tokens = 0;
        assert!(r.validate().is_err());
        let mut r = GenerationRequest::new("p");
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        assert!(GenerationRequest::new("").validate().is_err());
    }

    proptest! {
        #[test]
        fn trimmed_text_has_no_stop(text in "[a-zQ\\n :]{0,40}", stop in "[Q\\n:]{1,3}") {
            let stops = vec![stop.clone()];
            prop_assert!(!trim_at_stop(&text, &stops).contains(stop.as_str()));
        }
    }
}
