//! Synthetic typed QA corpora for tests, benchmarks and offline demos.
//!
//! Each question type gets its own vocabulary, chosen so that under the mock
//! embedder (at the given dimension) no two types share a hash bucket. Every
//! question has a distinct bucket multiset, so no two questions embed to the
//! same vector.

use std::collections::{BTreeSet, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, QaPair};
use crate::embedding::mock_bucket;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub types: usize,
    pub per_type: usize,
    /// Mock embedder dimension the vocabularies are made disjoint for.
    pub dim: usize,
    pub vocab_per_type: usize,
    pub question_words: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(types: usize, per_type: usize, dim: usize, seed: u64) -> Self {
        SynthSpec {
            types,
            per_type,
            dim,
            vocab_per_type: 24,
            question_words: 4,
            seed,
        }
    }
}

pub fn type_label(t: usize) -> String {
    format!("type{t:02}")
}

const SYLLABLES: &[&str] = &[
    "ba", "ce", "di", "fo", "gu", "ha", "ke", "li", "mo", "nu", "pa", "re", "si", "to", "vu", "za",
];

fn word(n: usize) -> String {
    let mut w = String::new();
    let mut x = n;
    loop {
        w.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
        if x == 0 {
            break;
        }
    }
    w
}

/// Per-type vocabularies: words whose bucket `b` satisfies `b % types == t`.
pub fn vocabularies(spec: &SynthSpec) -> Result<Vec<Vec<String>>> {
    if spec.types == 0 || spec.dim < spec.types {
        return Err(Error::Corpus(format!(
            "need dim >= types >= 1, got dim {} and {} types",
            spec.dim, spec.types
        )));
    }
    let mut vocab = vec![Vec::new(); spec.types];
    let mut n = 0usize;
    while vocab.iter().any(|v| v.len() < spec.vocab_per_type) {
        let w = word(n);
        n += 1;
        let t = mock_bucket(&w, spec.dim) % spec.types;
        if vocab[t].len() < spec.vocab_per_type {
            vocab[t].push(w);
        }
        if n > 10_000_000 {
            return Err(Error::Corpus("could not fill the synthetic vocabularies".into()));
        }
    }
    Ok(vocab)
}

/// Builds `types × per_type` pairs with ids `syn-{type}-{index}`.
pub fn typed_corpus(spec: &SynthSpec) -> Result<Corpus> {
    let vocab = vocabularies(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.types * spec.per_type);
    let mut seen_vectors: HashSet<Vec<usize>> = HashSet::new();
    let mut seen_answers: HashSet<String> = HashSet::new();
    for (t, words) in vocab.iter().enumerate() {
        let label = type_label(t);
        let mut made = 0;
        let mut tries = 0;
        while made < spec.per_type {
            tries += 1;
            if tries > spec.per_type * 1000 {
                return Err(Error::Corpus(format!(
                    "could not make {} distinct questions for {label}",
                    spec.per_type
                )));
            }
            let q: Vec<&String> = (0..spec.question_words)
                .map(|_| words.choose(&mut rng).expect("non-empty vocabulary"))
                .collect();
            let mut buckets: Vec<usize> = q.iter().map(|w| mock_bucket(w, spec.dim)).collect();
            buckets.sort_unstable();
            let answer_len = rng.random_range(6..=12);
            let answer_words: Vec<&str> = (0..answer_len)
                .map(|_| words.choose(&mut rng).expect("non-empty vocabulary").as_str())
                .collect();
            let answer = format!("{}.", answer_words.join(" "));
            if seen_vectors.contains(&buckets) || seen_answers.contains(&answer) {
                continue;
            }
            seen_vectors.insert(buckets);
            seen_answers.insert(answer.clone());
            let question = format!(
                "{}?",
                q.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" ")
            );
            pairs.push(QaPair::new(
                format!("syn-{t:02}-{made:04}"),
                &question,
                &answer,
                Some(label.clone()),
                "synthetic",
            )?);
            made += 1;
        }
    }
    Corpus::new("synthetic", pairs)
}

/// Bucket sets used by each type's vocabulary.
pub fn type_buckets(spec: &SynthSpec) -> Result<Vec<BTreeSet<usize>>> {
    Ok(vocabularies(spec)?
        .iter()
        .map(|ws| ws.iter().map(|w| mock_bucket(w, spec.dim)).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabularies_are_bucket_disjoint() {
        let spec = SynthSpec::new(16, 5, 512, 1);
        let sets = type_buckets(&spec).unwrap();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
    }

    #[test]
    fn corpus_shape_and_determinism() {
        let spec = SynthSpec::new(4, 50, 256, 9);
        let a = typed_corpus(&spec).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, typed_corpus(&spec).unwrap());
        let types: BTreeSet<_> = a.pairs.iter().map(|p| p.qtype.clone().unwrap()).collect();
        assert_eq!(types.len(), 4);
    }
}
