use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

use super::{Corpus, Ingested, QaPair};
use crate::error::{Error, Result};
use crate::text;

/// One MedQuAD XML file, held in memory.
#[derive(Debug, Clone)]
pub struct XmlDocument {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl XmlDocument {
    pub fn new(name: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        XmlDocument {
            name: name.into(),
            bytes: bytes.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(XmlDocument::new(path.display().to_string(), bytes))
    }
}

#[derive(Default)]
struct PendingPair {
    pid: Option<String>,
    qid: Option<String>,
    qtype: Option<String>,
    question: String,
    answer: String,
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    None,
    Question,
    Answer,
}

/// Parses MedQuAD documents (`Document > QAPairs > QAPair > Question[qtype] + Answer`).
///
/// Pair ids come from the `qid` attribute of `Question`, falling back to
/// `{document id}-{pid}`. Pairs whose answer is empty are skipped and counted.
pub fn parse_medquad(documents: &[XmlDocument]) -> Result<Ingested> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for doc in documents {
        skipped += parse_one(doc, &mut pairs)?;
    }
    let name = match documents {
        [one] => one.name.clone(),
        _ => "medquad".to_string(),
    };
    Ok(Ingested {
        corpus: Corpus::new(name, pairs)?,
        skipped,
    })
}

fn attr(e: &BytesStart<'_>, key: &str) -> Option<String> {
    e.try_get_attribute(key)
        .ok()
        .flatten()
        .and_then(|a| a.normalized_value(quick_xml::XmlVersion::Implicit1_0).ok().map(|v| v.into_owned()))
}

fn parse_one(doc: &XmlDocument, out: &mut Vec<QaPair>) -> Result<usize> {
    let xml_err = |offset: u64, message: String| Error::Xml {
        file: doc.name.clone(),
        offset,
        message,
    };
    let source = std::str::from_utf8(&doc.bytes)
        .map_err(|e| xml_err(e.valid_up_to() as u64, format!("invalid UTF-8: {e}")))?;

    let mut reader = Reader::from_str(source);
    reader.config_mut().check_end_names = true;

    let mut open: Vec<String> = Vec::new();
    let mut doc_id: Option<String> = None;
    let mut pending: Option<PendingPair> = None;
    let mut field = Field::None;
    let mut seen_in_doc = 0usize;
    let mut skipped = 0usize;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| xml_err(reader.error_position(), e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = e.local_name().as_ref().to_string();
                match name.as_str() {
                    "Document" => doc_id = attr(e, "id"),
                    "QAPair" => {
                        pending = Some(PendingPair {
                            pid: attr(e, "pid"),
                            ..Default::default()
                        })
                    }
                    "Question" => {
                        if let Some(p) = pending.as_mut() {
                            p.qid = attr(e, "qid");
                            p.qtype = attr(e, "qtype");
                            field = Field::Question;
                        }
                    }
                    "Answer" if pending.is_some() => field = Field::Answer,
                    _ => {}
                }
                if is_empty {
                    if matches!(name.as_str(), "Question" | "Answer") {
                        field = Field::None;
                    }
                    if name == "QAPair" {
                        skipped += finish(doc, &doc_id, pending.take(), &mut seen_in_doc, out);
                    }
                } else {
                    open.push(name);
                }
            }
            Event::End(e) => {
                let name = e.local_name().as_ref().to_string();
                open.pop();
                match name.as_str() {
                    "Question" | "Answer" => field = Field::None,
                    "QAPair" => {
                        skipped += finish(doc, &doc_id, pending.take(), &mut seen_in_doc, out)
                    }
                    _ => {}
                }
            }
            Event::Text(t) => push_text(&mut pending, field, &t.xml10_content()),
            Event::CData(t) => push_text(&mut pending, field, &t),
            Event::GeneralRef(r) => {
                let resolved = match r.resolve_char_ref() {
                    Ok(Some(c)) => c.to_string(),
                    Ok(None) => match &*r {
                        "lt" => "<".into(),
                        "gt" => ">".into(),
                        "amp" => "&".into(),
                        "apos" => "'".into(),
                        "quot" => "\"".into(),
                        "nbsp" => " ".into(),
                        other => format!("&{other};"),
                    },
                    Err(e) => return Err(xml_err(reader.buffer_position(), e.to_string())),
                };
                push_text(&mut pending, field, &resolved);
            }
            Event::Eof => {
                if let Some(unclosed) = open.last() {
                    return Err(xml_err(
                        reader.buffer_position(),
                        format!("unexpected end of document inside <{unclosed}>"),
                    ));
                }
                break;
            }
            _ => {}
        }
    }
    Ok(skipped)
}

fn push_text(pending: &mut Option<PendingPair>, field: Field, s: &str) {
    if let Some(p) = pending.as_mut() {
        match field {
            Field::Question => p.question.push_str(s),
            Field::Answer => {
                p.answer.push_str(s);
            }
            Field::None => {}
        }
    }
}

/// Returns 1 when the pair was skipped.
fn finish(
    doc: &XmlDocument,
    doc_id: &Option<String>,
    pending: Option<PendingPair>,
    seen: &mut usize,
    out: &mut Vec<QaPair>,
) -> usize {
    let Some(p) = pending else { return 0 };
    *seen += 1;
    if text::word_count(&p.answer) == 0 || text::word_count(&p.question) == 0 {
        log::debug!("{}: skipping pair {} with empty text", doc.name, *seen);
        return 1;
    }
    let id = p.qid.unwrap_or_else(|| {
        let base = doc_id.clone().unwrap_or_else(|| doc.name.clone());
        format!("{base}-{}", p.pid.unwrap_or_else(|| seen.to_string()))
    });
    match QaPair::new(id, &p.question, &p.answer, p.qtype, "medquad") {
        Ok(pair) => {
            out.push(pair);
            0
        }
        Err(_) => 1,
    }
}
