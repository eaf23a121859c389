//! Corpus-level BLEU-1/BLEU-4 and per-pair ROUGE-1/ROUGE-L.
//!
//! Text is tokenized with a single fixed rule: lowercase, replace every
//! non-alphanumeric character with a space, split on whitespace. BLEU pools
//! clipped n-gram counts over the whole run; ROUGE is averaged over pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

/// Floor applied to zero n-gram precisions before taking the log.
pub const BLEU_ZERO_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalTokens(pub Vec<String>);

impl EvalTokens {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

pub fn tokenize_eval(text: &str) -> EvalTokens {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    EvalTokens(cleaned.split_whitespace().map(str::to_owned).collect())
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for w in tokens.windows(n) {
        let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

/// Clipped overlap: each candidate n-gram counts at most as often as it
/// appears in the reference.
fn clipped_overlap<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> usize {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    cand.iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum()
}

fn ngram_total(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Pooled statistics for one candidate/reference pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    /// Reference n-gram counts per order.
    pub reference_totals: Vec<usize>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn of(candidate: &[String], reference: &[String], max_n: usize) -> Self {
        BleuStats {
            matches: (1..=max_n).map(|n| clipped_overlap(candidate, reference, n)).collect(),
            totals: (1..=max_n).map(|n| ngram_total(candidate.len(), n)).collect(),
            reference_totals: (1..=max_n).map(|n| ngram_total(reference.len(), n)).collect(),
            candidate_len: candidate.len(),
            reference_len: reference.len(),
        }
    }

    fn add(&mut self, other: &BleuStats) {
        if self.matches.len() < other.matches.len() {
            self.matches.resize(other.matches.len(), 0);
            self.totals.resize(other.totals.len(), 0);
            self.reference_totals.resize(other.reference_totals.len(), 0);
        }
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        for (a, b) in self.reference_totals.iter_mut().zip(&other.reference_totals) {
            *a += b;
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// BP · exp(mean log p_n) with floored zero precisions. An order with no
    /// n-grams on either side (every sequence shorter than n) has precision 1.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let max_n = self.matches.len() as f64;
        let log_sum: f64 = self
            .matches
            .iter()
            .zip(self.totals.iter().zip(&self.reference_totals))
            .map(|(&m, (&t, &rt))| {
                let p = match (t, rt) {
                    (0, 0) => 1.0,
                    (0, _) => 0.0,
                    _ => m as f64 / t as f64,
                };
                p.max(BLEU_ZERO_FLOOR).ln()
            })
            .sum();
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = (1.0 - r / c).exp().min(1.0);
        (bp * (log_sum / max_n).exp()).clamp(0.0, 1.0)
    }
}

fn check_max_n(max_n: usize) -> Result<()> {
    if max_n == 0 {
        return Err(Error::Metric("BLEU order must be at least 1".into()));
    }
    Ok(())
}

pub fn bleu_corpus(pairs: &[(EvalTokens, EvalTokens)], max_n: usize) -> Result<f64> {
    check_max_n(max_n)?;
    if pairs.is_empty() {
        return Err(Error::Metric("BLEU over an empty candidate set".into()));
    }
    let mut total = BleuStats::default();
    for (cand, reference) in pairs {
        if reference.is_empty() {
            return Err(Error::Metric("BLEU reference with no tokens".into()));
        }
        total.add(&BleuStats::of(&cand.0, &reference.0, max_n));
    }
    Ok(total.score())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        let precision = if candidate_total == 0 {
            0.0
        } else {
            overlap as f64 / candidate_total as f64
        };
        let recall = if reference_total == 0 {
            0.0
        } else {
            overlap as f64 / reference_total as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

pub fn rouge_n(candidate: &EvalTokens, reference: &EvalTokens, n: usize) -> Result<Prf> {
    if reference.is_empty() {
        return Err(Error::Metric("ROUGE reference with no tokens".into()));
    }
    if n == 0 {
        return Err(Error::Metric("ROUGE-N order must be at least 1".into()));
    }
    let overlap = clipped_overlap(&candidate.0, &reference.0, n);
    Ok(Prf::from_counts(
        overlap,
        ngram_total(candidate.len(), n),
        ngram_total(reference.len(), n),
    ))
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &EvalTokens, reference: &EvalTokens) -> Result<Prf> {
    if reference.is_empty() {
        return Err(Error::Metric("ROUGE reference with no tokens".into()));
    }
    if candidate.is_empty() {
        return Ok(Prf::ZERO);
    }
    let l = lcs_len(&candidate.0, &reference.0);
    Ok(Prf::from_counts(l, candidate.len(), reference.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Unit,
    Percent,
}

impl Scale {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Scale::Unit => v,
            Scale::Percent => v * 100.0,
        }
    }
}

/// Scores for one generated answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub rouge1: Prf,
    pub rouge_l: Prf,
}

/// Always holds unit-scale values; `scale` only affects presentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu4: f64,
    pub rouge1_f: f64,
    #[serde(rename = "rougeL_f")]
    pub rouge_l_f: f64,
    pub n: usize,
    pub scale: Scale,
}

pub fn score_pair(generated: &str, reference: &str) -> Result<PairScores> {
    let c = tokenize_eval(generated);
    let r = tokenize_eval(reference);
    Ok(PairScores {
        rouge1: rouge_n(&c, &r, 1)?,
        rouge_l: rouge_l(&c, &r)?,
    })
}

/// Scores a run of `(generated, reference)` texts.
pub fn score_run(results: &[(String, String)], scale: Scale, exec: Execution) -> Result<MetricReport> {
    if results.is_empty() {
        return Err(Error::Metric("no results to score".into()));
    }
    struct PerPair {
        bleu1: BleuStats,
        bleu4: BleuStats,
        scores: PairScores,
    }
    let per_pair = exec.try_map(results, |(generated, reference)| {
        let c = tokenize_eval(generated);
        let r = tokenize_eval(reference);
        if r.is_empty() {
            return Err(Error::Metric("reference with no tokens".into()));
        }
        Ok(PerPair {
            bleu1: BleuStats::of(&c.0, &r.0, 1),
            bleu4: BleuStats::of(&c.0, &r.0, 4),
            scores: PairScores {
                rouge1: rouge_n(&c, &r, 1)?,
                rouge_l: rouge_l(&c, &r)?,
            },
        })
    })?;

    // Reduction runs in pair order so sums are reproducible.
    let mut bleu1 = BleuStats::default();
    let mut bleu4 = BleuStats::default();
    let (mut r1, mut rl) = (0.0, 0.0);
    for p in &per_pair {
        bleu1.add(&p.bleu1);
        bleu4.add(&p.bleu4);
        r1 += p.scores.rouge1.f1;
        rl += p.scores.rouge_l.f1;
    }
    let n = per_pair.len();
    Ok(MetricReport {
        bleu1: bleu1.score(),
        bleu4: bleu4.score(),
        rouge1_f: r1 / n as f64,
        rouge_l_f: rl / n as f64,
        n,
        scale,
    })
}
