use serde::Deserialize;

use super::{Corpus, Ingested, QaPair};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Line {
    question: Option<String>,
    answer: Option<String>,
    #[serde(default)]
    qtype: Option<String>,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

/// Parses one JSON object per line (`question`, `answer`, optional `qtype`
/// and `id`). Missing ids become `"{source}-{line number}"`; lines without a
/// usable question or answer are skipped and counted. Blank lines are ignored.
pub fn parse_jsonl(bytes: &[u8], source: &str) -> Result<Ingested> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = i + 1;
        let line = std::str::from_utf8(raw).map_err(|e| Error::Jsonl {
            line: line_no,
            message: format!("invalid UTF-8: {e}"),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line = serde_json::from_str(line).map_err(|e| Error::Jsonl {
            line: line_no,
            message: e.to_string(),
        })?;
        let (Some(q), Some(a)) = (rec.question, rec.answer) else {
            log::warn!("{source}: line {line_no} lacks a question or answer, skipped");
            skipped += 1;
            continue;
        };
        let id = match rec.id {
            Some(serde_json::Value::String(s)) if !s.is_empty() => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => format!("{source}-{line_no}"),
        };
        match QaPair::new(id, &q, &a, rec.qtype, source) {
            Ok(p) => pairs.push(p),
            Err(_) => {
                log::warn!("{source}: line {line_no} has empty text, skipped");
                skipped += 1;
            }
        }
    }
    Ok(Ingested {
        corpus: Corpus::new(source, pairs)?,
        skipped,
    })
}
