use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::promptgen::PromptStrategy;
use crate::qtype::TypePrediction;
use crate::textmetrics::{MetricReport, PairScores, Scale};

pub const TABLE_HEADER: [&str; 5] = ["Strategy", "Bleu1", "Bleu4", "Rouge-1", "Rouge-L"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Everything that went into and came out of one (strategy, question) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub strategy: String,
    pub question_id: String,
    pub question: String,
    pub reference: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    /// Examples in prompt order.
    pub retrieved: Vec<Retrieved>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_type: Option<TypePrediction>,
    /// The predicted type had no block and the whole pool was searched.
    pub fallback: bool,
    /// Fewer than k examples were available.
    pub short: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<PairScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_stage: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub label: String,
    pub strategy: PromptStrategy,
    /// Absent when every question failed.
    pub metrics: Option<MetricReport>,
    pub scored: usize,
    pub excluded: usize,
    pub short_prompts: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_digest: String,
    pub corpus_fingerprints: BTreeMap<String, String>,
    pub embedder: String,
    pub classifier: Option<String>,
    pub generator: String,
    pub scale: Scale,
    /// Test question ids in evaluation order, shared by every strategy.
    pub test_ids: Vec<String>,
    pub rows: Vec<StrategyRow>,
    pub audit: Vec<AuditRecord>,
    /// SHA-256 of the report serialized with this field empty.
    pub digest: String,
}

impl RunReport {
    pub fn compute_digest(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.digest = String::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&copy)?)))
    }

    pub fn seal(mut self) -> Result<Self> {
        self.digest = self.compute_digest()?;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn table_rows(&self) -> Vec<TableRow> {
        self.rows
            .iter()
            .map(|r| TableRow {
                label: r.label.clone(),
                values: r.metrics.map(|m| {
                    [m.bleu1, m.bleu4, m.rouge1_f, m.rouge_l_f].map(|v| self.scale.apply(v))
                }),
            })
            .collect()
    }
}

/// One rendered line of a results table. Values are already scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// Bleu1, Bleu4, Rouge-1, Rouge-L; `None` renders as `n/a`.
    pub values: Option<[f64; 4]>,
}

impl TableRow {
    pub fn new(label: impl Into<String>, values: [f64; 4]) -> Self {
        TableRow {
            label: label.into(),
            values: Some(values),
        }
    }

    fn cells(&self) -> Vec<String> {
        let mut cells = vec![self.label.clone()];
        match self.values {
            Some(v) => cells.extend(v.iter().map(|x| format!("{x:.3}"))),
            None => cells.extend(std::iter::repeat_n("n/a".to_string(), 4)),
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Markdown => "md",
            TableFormat::Csv => "csv",
        }
    }
}

fn markdown_line(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

/// Renders rows under the given header. The first `text_columns` columns
/// are left-aligned in markdown and the rest right-aligned.
pub fn render_rows(header: &[&str], rows: &[Vec<String>], text_columns: usize, format: TableFormat) -> Result<String> {
    match format {
        TableFormat::Markdown => {
            let mut out = markdown_line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
            let rule: Vec<String> = (0..header.len())
                .map(|i| if i < text_columns { "---".into() } else { "---:".into() })
                .collect();
            out.push_str(&format!("|{}|\n", rule.join("|")));
            for r in rows {
                out.push_str(&markdown_line(r));
            }
            Ok(out)
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| Error::Metric(format!("csv: {e}"));
            w.write_record(header).map_err(io)?;
            for r in rows {
                w.write_record(r).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

pub fn render_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    let cells: Vec<Vec<String>> = rows.iter().map(TableRow::cells).collect();
    render_rows(&TABLE_HEADER, &cells, 1, format)
}

/// Writes `{stem}.md` or `{stem}.csv` into `dir` and returns the path.
pub fn write_tables(report: &RunReport, format: TableFormat, dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    if report.rows.is_empty() {
        return Err(Error::Metric("report has no rows".into()));
    }
    let text = render_table(&report.table_rows(), format)?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
