//! QA corpora: ingestion, answer truncation, train/test splitting, merging,
//! summary statistics and finetune record export.

mod jsonl;
mod medquad;

pub use jsonl::parse_jsonl;
pub use medquad::{parse_medquad, XmlDocument};

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// Answer cap used for MedQuAD-style corpora.
pub const MEDQUAD_WORD_CAP: usize = 300;
/// Answer cap used for Icliniq-style corpora.
pub const ICLINIQ_WORD_CAP: usize = 150;
/// Width of the answer-length histogram buckets, in words.
pub const HISTOGRAM_BUCKET_WIDTH: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    pub source: String,
    #[serde(default)]
    pub truncated: bool,
}

impl QaPair {
    /// Builds a pair with whitespace-normalized text. Fails when the id,
    /// question or answer is empty after normalization.
    pub fn new(
        id: impl Into<String>,
        question: &str,
        answer: &str,
        qtype: Option<String>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let pair = QaPair {
            id: id.into(),
            question: text::normalize_whitespace(question),
            answer: text::normalize_whitespace(answer),
            qtype: qtype
                .map(|t| text::normalize_whitespace(&t))
                .filter(|t| !t.is_empty()),
            source: source.into(),
            truncated: false,
        };
        pair.check()?;
        Ok(pair)
    }

    fn check(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Corpus("pair with empty id".into()));
        }
        if self.question.is_empty() {
            return Err(Error::Corpus(format!("pair {} has an empty question", self.id)));
        }
        if self.answer.is_empty() {
            return Err(Error::Corpus(format!("pair {} has an empty answer", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub pairs: Vec<QaPair>,
    pub word_cap: usize,
}

impl Corpus {
    /// Validates pair invariants and id uniqueness. The cap of an
    /// untruncated corpus is its longest answer (at least 1).
    pub fn new(name: impl Into<String>, pairs: Vec<QaPair>) -> Result<Self> {
        let word_cap = pairs
            .iter()
            .map(|p| text::word_count(&p.answer))
            .max()
            .unwrap_or(1)
            .max(1);
        Self::with_cap(name, pairs, word_cap)
    }

    fn with_cap(name: impl Into<String>, pairs: Vec<QaPair>, word_cap: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            p.check()?;
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Ingest(format!("duplicate id {:?}", p.id)));
            }
            if text::word_count(&p.answer) > word_cap {
                return Err(Error::Corpus(format!(
                    "pair {} exceeds the corpus word cap {word_cap}",
                    p.id
                )));
            }
        }
        Ok(Corpus {
            name: name.into(),
            pairs,
            word_cap,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QaPair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    /// Id → pair lookup table.
    pub fn by_id(&self) -> BTreeMap<&str, &QaPair> {
        self.pairs.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    /// One JSON object per pair, in corpus order.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for p in &self.pairs {
            serde_json::to_writer(&mut out, p)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads a corpus persisted by [`save_jsonl`](Self::save_jsonl).
    pub fn load_jsonl(name: impl Into<String>, path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let pair: QaPair = serde_json::from_str(line).map_err(|e| Error::Jsonl {
                line: i + 1,
                message: e.to_string(),
            })?;
            pairs.push(pair);
        }
        Corpus::new(name, pairs)
    }
}

/// A parsed corpus plus the number of records skipped during ingestion.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub skipped: usize,
}

/// Keeps the first `word_cap` words of every answer.
pub fn truncate_answers(corpus: &Corpus, word_cap: usize) -> Result<Corpus> {
    if word_cap == 0 {
        return Err(Error::Corpus("word cap must be at least 1".into()));
    }
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| {
            let (answer, dropped) = text::truncate_words(&p.answer, word_cap);
            QaPair {
                answer,
                truncated: p.truncated || dropped,
                ..p.clone()
            }
        })
        .collect();
    Ok(Corpus {
        name: corpus.name.clone(),
        pairs,
        word_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        let spec = SplitSpec {
            train_fraction,
            seed,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Corpus(format!(
                "train fraction {} is not strictly between 0 and 1",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Seeded Fisher–Yates shuffle over the id-sorted pairs; the first
/// `ceil(fraction * n)` go to train. Both sides are always non-empty.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus)> {
    spec.check()?;
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Corpus(format!(
            "cannot split a corpus of {n} pair(s) into train and test"
        )));
    }
    let mut pairs = corpus.pairs.clone();
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pairs.shuffle(&mut rng);

    let n_train = ((spec.train_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let test = pairs.split_off(n_train);
    Ok((
        Corpus {
            name: format!("{}-train", corpus.name),
            pairs,
            word_cap: corpus.word_cap,
        },
        Corpus {
            name: format!("{}-test", corpus.name),
            pairs: test,
            word_cap: corpus.word_cap,
        },
    ))
}

/// Concatenates corpora in order. With more than one input, ids that do not
/// already start with `"{source}-"` are qualified as `"{source}-{id}"`; any
/// remaining collision is an error.
pub fn merge(corpora: &[Corpus]) -> Result<Corpus> {
    match corpora {
        [] => return Err(Error::Corpus("nothing to merge".into())),
        [single] => return Ok(single.clone()),
        _ => {}
    }
    let mut pairs = Vec::with_capacity(corpora.iter().map(Corpus::len).sum());
    for c in corpora {
        for p in &c.pairs {
            let prefix = format!("{}-", p.source);
            let id = if p.id.starts_with(&prefix) {
                p.id.clone()
            } else {
                format!("{prefix}{}", p.id)
            };
            pairs.push(QaPair { id, ..p.clone() });
        }
    }

    let mut seen = HashSet::new();
    let mut colliding: Vec<String> = pairs
        .iter()
        .filter(|p| !seen.insert(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !colliding.is_empty() {
        colliding.sort();
        colliding.dedup();
        return Err(Error::IdCollision(colliding));
    }

    let name = corpora
        .iter()
        .map(|c| c.name.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let word_cap = corpora.iter().map(|c| c.word_cap).max().unwrap_or(1);
    Ok(Corpus {
        name,
        pairs,
        word_cap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub bucket_width: usize,
    /// `answer_word_histogram[i]` counts answers with word count in
    /// `[i * bucket_width, (i + 1) * bucket_width)`.
    pub answer_word_histogram: Vec<usize>,
    pub mean_answer_words: f64,
    pub mean_question_words: f64,
    pub qtype_counts: BTreeMap<String, usize>,
}

pub fn stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::Corpus("stats of an empty corpus".into()));
    }
    let mut histogram: Vec<usize> = Vec::new();
    let mut answer_total = 0usize;
    let mut question_total = 0usize;
    let mut qtype_counts = BTreeMap::new();
    for p in &corpus.pairs {
        let a = text::word_count(&p.answer);
        answer_total += a;
        question_total += text::word_count(&p.question);
        let bucket = a / HISTOGRAM_BUCKET_WIDTH;
        if histogram.len() <= bucket {
            histogram.resize(bucket + 1, 0);
        }
        histogram[bucket] += 1;
        if let Some(t) = &p.qtype {
            *qtype_counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    let n = corpus.len() as f64;
    Ok(CorpusStats {
        count: corpus.len(),
        bucket_width: HISTOGRAM_BUCKET_WIDTH,
        answer_word_histogram: histogram,
        mean_answer_words: answer_total as f64 / n,
        mean_question_words: question_total as f64 / n,
        qtype_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub id: String,
    pub text: String,
}

pub fn build_finetune_records(corpus: &Corpus) -> Vec<FinetuneRecord> {
    corpus
        .pairs
        .iter()
        .map(|p| FinetuneRecord {
            id: p.id.clone(),
            text: format!("Question: {}\nAnswer: {}", p.question, p.answer),
        })
        .collect()
}

pub fn write_finetune_jsonl(records: &[FinetuneRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<finetune>", e))?;
    }
    out.flush().map_err(|e| Error::io("<finetune>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(id: &str, answer: &str, qtype: Option<&str>) -> QaPair {
        QaPair::new(id, &format!("question {id}?"), answer, qtype.map(String::from), "test")
            .unwrap()
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::new(
            "c",
            (0..n).map(|i| pair(&format!("p{i:03}"), "some answer", None)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_empty_fields_and_duplicates() {
        assert!(QaPair::new("a", "  ", "x", None, "s").is_err());
        assert!(QaPair::new("", "q", "x", None, "s").is_err());
        let err = Corpus::new("c", vec![pair("a", "x", None), pair("a", "y", None)]);
        assert!(matches!(err, Err(Error::Ingest(_))));
    }

    #[test]
    fn truncation_cases() {
        let c = Corpus::new(
            "c",
            vec![
                pair("short", &words(5), None),
                pair("long", &words(400), None),
                pair("edge", &words(150), None),
            ],
        )
        .unwrap();
        let t = truncate_answers(&c, MEDQUAD_WORD_CAP).unwrap();
        assert_eq!(t.pairs[0].answer, words(5));
        assert!(!t.pairs[0].truncated);
        assert_eq!(text::word_count(&t.pairs[1].answer), 300);
        assert_eq!(t.pairs[1].answer, words(300));
        assert!(t.pairs[1].truncated);
        assert_eq!(t.word_cap, 300);

        let t = truncate_answers(&c, ICLINIQ_WORD_CAP).unwrap();
        assert_eq!(t.pairs[2].answer, words(150));
        assert!(!t.pairs[2].truncated);
        assert!(truncate_answers(&c, 0).is_err());
    }

    #[test]
    fn split_hundred() {
        let c = corpus_of(100);
        let spec = SplitSpec::new(0.9, 42).unwrap();
        let (train, test) = split(&c, &spec).unwrap();
        assert_eq!((train.len(), test.len()), (90, 10));
        let (train2, test2) = split(&c, &spec).unwrap();
        assert_eq!(train.to_jsonl().unwrap(), train2.to_jsonl().unwrap());
        assert_eq!(test.to_jsonl().unwrap(), test2.to_jsonl().unwrap());
        assert!(split(&corpus_of(1), &spec).is_err());
        assert!(SplitSpec::new(1.0, 1).is_err());
        assert!(SplitSpec::new(0.0, 1).is_err());
    }

    #[test]
    fn split_ignores_input_order() {
        let c = corpus_of(30);
        let mut reversed = c.clone();
        reversed.pairs.reverse();
        let spec = SplitSpec::new(0.5, 3).unwrap();
        assert_eq!(split(&c, &spec).unwrap(), split(&reversed, &spec).unwrap());
    }

    #[test]
    fn merge_cases() {
        let a = Corpus::new("a", (0..3).map(|i| pair(&format!("a{i}"), "x", None)).collect())
            .unwrap();
        let mut b = Corpus::new("b", (0..2).map(|i| pair(&format!("b{i}"), "y", None)).collect())
            .unwrap();
        let m = merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.pairs[0].id, "test-a0");
        assert_eq!(merge(std::slice::from_ref(&a)).unwrap(), a);

        b.pairs[0].id = "a1".into();
        match merge(&[a, b]) {
            Err(Error::IdCollision(ids)) => assert_eq!(ids, vec!["test-a1".to_string()]),
            other => panic!("expected collision, got {other:?}"),
        }
    }

    #[test]
    fn merge_keeps_distinct_sources_apart() {
        let mut a = corpus_of(2);
        let mut b = corpus_of(2);
        for p in &mut a.pairs {
            p.source = "medquad".into();
        }
        for p in &mut b.pairs {
            p.source = "icliniq".into();
        }
        a.word_cap = 300;
        b.word_cap = 150;
        let m = merge(&[a, b]).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.word_cap, 300);
        assert_eq!(m.pairs[2].id, "icliniq-p000");
    }

    #[test]
    fn stats_cases() {
        let c = Corpus::new(
            "c",
            vec![pair("a", &words(10), Some("a")), pair("b", &words(30), Some("a"))],
        )
        .unwrap();
        let s = stats(&c).unwrap();
        assert_eq!(s.mean_answer_words, 20.0);
        assert_eq!(s.answer_word_histogram, vec![2]);
        assert_eq!(s.qtype_counts.get("a"), Some(&2));

        let c = Corpus::new("c", vec![pair("a", &words(197), None)]).unwrap();
        let s = stats(&c).unwrap();
        assert_eq!(s.mean_answer_words, 197.0);
        assert_eq!(s.answer_word_histogram, vec![0, 0, 0, 1]);

        let c = Corpus::new(
            "c",
            vec![
                pair("1", "x", Some("a")),
                pair("2", "x", Some("a")),
                pair("3", "x", Some("b")),
            ],
        )
        .unwrap();
        let s = stats(&c).unwrap();
        assert_eq!(
            s.qtype_counts,
            BTreeMap::from([("a".to_string(), 2), ("b".to_string(), 1)])
        );
        assert!(stats(&Corpus::new("e", vec![]).unwrap()).is_err());
    }

    #[test]
    fn finetune_records() {
        let p = QaPair::new("1", "Q1?", "A1.", None, "s").unwrap();
        let q = QaPair::new("2", "Q2?", "A2.", None, "s").unwrap();
        let recs = build_finetune_records(&Corpus::new("c", vec![p, q]).unwrap());
        assert_eq!(recs[0].text, "Question: Q1?\nAnswer: A1.");
        assert_eq!(recs[1].id, "2");
        assert!(build_finetune_records(&Corpus::new("e", vec![]).unwrap()).is_empty());

        let mut buf = Vec::new();
        write_finetune_jsonl(&recs[..1], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"id\":\"1\",\"text\":\"Question: Q1?\\nAnswer: A1.\"}\n"
        );
    }

    #[test]
    fn jsonl_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let c = truncate_answers(
            &Corpus::new("c", vec![pair("a", &words(20), Some("t")), pair("b", "x", None)])
                .unwrap(),
            10,
        )
        .unwrap();
        c.save_jsonl(&path).unwrap();
        let back = Corpus::load_jsonl("c", &path).unwrap();
        assert_eq!(back.pairs, c.pairs);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec((1usize..40, prop::option::of("[ab]")), 0..40).prop_map(|specs| {
            let pairs = specs
                .into_iter()
                .enumerate()
                .map(|(i, (n, t))| pair(&format!("id{i}"), &words(n), t.as_deref()))
                .collect();
            Corpus::new("arb", pairs).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn truncation_is_idempotent(c in arb_corpus(), cap in 1usize..50) {
            let once = truncate_answers(&c, cap).unwrap();
            let twice = truncate_answers(&once, cap).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.pairs.iter().all(|p| text::word_count(&p.answer) <= cap));
        }

        #[test]
        fn mean_matches_recount(c in arb_corpus()) {
            prop_assume!(!c.is_empty());
            let s = stats(&c).unwrap();
            let recount: Vec<usize> = c.pairs.iter()
                .map(|p| p.answer.split(' ').filter(|w| !w.is_empty()).count())
                .collect();
            let mean = recount.iter().sum::<usize>() as f64 / recount.len() as f64;
            prop_assert!((s.mean_answer_words - mean).abs() < 1e-12);
            prop_assert_eq!(s.answer_word_histogram.iter().sum::<usize>(), s.count);
        }
    }
}
