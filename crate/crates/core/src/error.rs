use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the pipeline. Each variant names the stage it came
/// from so the CLI can report a stage-tagged message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("xml parse error in {file} at byte {offset}: {message}")]
    Xml {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("jsonl parse error at line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("id collision while merging: {}", .0.join(", "))]
    IdCollision(Vec<String>),

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("embedder endpoint error after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error in {file} at byte {offset}: {message}")]
    Format {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("unknown type block {label:?}; known labels: {}", .known.join(", "))]
    UnknownBlock { label: String, known: Vec<String> },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("classifier error: {0}")]
    Classifier(String),

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("backend error after {attempts} attempt(s): {message}")]
    Backend { attempts: u32, message: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage {stage} failed{}: {}", .question.as_ref().map(|q| format!(" on question {q}")).unwrap_or_default(), .cause)]
    Stage {
        stage: &'static str,
        question: Option<String>,
        cause: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, question: Option<&str>) -> Self {
        Error::Stage {
            stage,
            question: question.map(str::to_owned),
            cause: Box::new(self),
        }
    }
}
