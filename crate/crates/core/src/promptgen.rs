//! Few-shot example selection and prompt rendering.
//!
//! Three selection strategies share one renderer: a fixed random set drawn
//! once per run, top-k retrieval over the whole training set, and top-k
//! retrieval inside the block of the predicted question type.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::qtype::{QuestionClassifier, TypePrediction};
use crate::vindex::{Neighbor, Query, TypePartitionedIndex};

pub const DEFAULT_K: usize = 2;

pub const PROMPT_HEADER: &str = "You are a medical question answering assistant. Answer the final question in the same style as the examples.\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Static,
    VanillaDynamic,
    TypewiseDynamic,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Static => "static",
            StrategyKind::VanillaDynamic => "vanilla_dynamic",
            StrategyKind::TypewiseDynamic => "typewise_dynamic",
        }
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, StrategyKind::VanillaDynamic | StrategyKind::TypewiseDynamic)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleOrder {
    /// Most similar example sits right before the test question.
    #[default]
    AscendingSimilarity,
    DescendingSimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptStrategy {
    pub kind: StrategyKind,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub order: ExampleOrder,
}

impl PromptStrategy {
    pub fn none() -> Self {
        PromptStrategy {
            kind: StrategyKind::None,
            k: DEFAULT_K,
            seed: None,
            order: ExampleOrder::default(),
        }
    }

    pub fn static_examples(k: usize, seed: u64) -> Self {
        PromptStrategy {
            kind: StrategyKind::Static,
            k,
            seed: Some(seed),
            order: ExampleOrder::default(),
        }
    }

    pub fn vanilla(k: usize) -> Self {
        PromptStrategy {
            kind: StrategyKind::VanillaDynamic,
            k,
            seed: None,
            order: ExampleOrder::default(),
        }
    }

    pub fn typewise(k: usize) -> Self {
        PromptStrategy {
            kind: StrategyKind::TypewiseDynamic,
            k,
            seed: None,
            order: ExampleOrder::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Prompt("k must be at least 1".into()));
        }
        match (self.kind, self.seed) {
            (StrategyKind::Static, None) => Err(Error::Prompt("static strategy needs a seed".into())),
            (StrategyKind::Static, Some(_)) => Ok(()),
            (_, Some(_)) => Err(Error::Prompt(format!("{} strategy takes no seed", self.kind))),
            (_, None) => Ok(()),
        }
    }

    fn expect(&self, kind: StrategyKind) -> Result<()> {
        self.validate()?;
        if self.kind != kind {
            return Err(Error::Prompt(format!("expected a {kind} strategy, got {}", self.kind)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptExample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub examples: Vec<PromptExample>,
    pub test_question: String,
    pub rendered: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_type: Option<TypePrediction>,
}

/// Seeded sample of `k` distinct pairs from the id-sorted training set.
pub fn select_static(train: &Corpus, strategy: &PromptStrategy) -> Result<Vec<PromptExample>> {
    strategy.expect(StrategyKind::Static)?;
    if train.len() < strategy.k {
        return Err(Error::Prompt(format!(
            "static prompting needs {} training pairs, have {}",
            strategy.k,
            train.len()
        )));
    }
    let mut sorted: Vec<_> = train.pairs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed.unwrap_or_default());
    Ok(sample(&mut rng, sorted.len(), strategy.k)
        .into_iter()
        .map(|i| {
            let p = sorted[i];
            PromptExample {
                id: p.id.clone(),
                question: p.question.clone(),
                answer: p.answer.clone(),
                score: None,
            }
        })
        .collect())
}

fn examples_from(neighbors: Vec<Neighbor>, train: &Corpus) -> Result<Vec<PromptExample>> {
    let by_id = train.by_id();
    neighbors
        .into_iter()
        .map(|n| {
            let p = by_id
                .get(n.id.as_str())
                .ok_or_else(|| Error::Prompt(format!("retrieved id {:?} is not in the training corpus", n.id)))?;
            Ok(PromptExample {
                id: n.id,
                question: p.question.clone(),
                answer: p.answer.clone(),
                score: Some(n.score),
            })
        })
        .collect()
}

pub fn select_vanilla(
    index: &TypePartitionedIndex,
    train: &Corpus,
    query_vec: &[f32],
    strategy: &PromptStrategy,
    exclude_ids: &HashSet<&str>,
) -> Result<Vec<PromptExample>> {
    strategy.expect(StrategyKind::VanillaDynamic)?;
    let hits = index.query_topk(Query {
        vector: query_vec,
        k: strategy.k,
        type_filter: None,
        exclude_ids,
    })?;
    examples_from(hits, train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypewiseSelection {
    pub examples: Vec<PromptExample>,
    pub predicted: TypePrediction,
    /// The predicted label had no block, so the unpartitioned block was used.
    pub fallback: bool,
}

pub fn select_typewise(
    index: &TypePartitionedIndex,
    classifier: &dyn QuestionClassifier,
    train: &Corpus,
    query_text: &str,
    query_vec: &[f32],
    strategy: &PromptStrategy,
    exclude_ids: &HashSet<&str>,
) -> Result<TypewiseSelection> {
    strategy.expect(StrategyKind::TypewiseDynamic)?;
    let predicted = classifier.predict(query_text, query_vec)?;
    let fallback = !index.blocks.contains_key(&predicted.label);
    if fallback {
        log::debug!("no block for predicted type {:?}; using all questions", predicted.label);
    }
    let hits = index.query_topk(Query {
        vector: query_vec,
        k: strategy.k,
        type_filter: (!fallback).then_some(predicted.label.as_str()),
        exclude_ids,
    })?;
    Ok(TypewiseSelection {
        examples: examples_from(hits, train)?,
        predicted,
        fallback,
    })
}

/// Orders the examples and renders the prompt text. Examples without a
/// score keep their selection order.
pub fn render(examples: &[PromptExample], test_question: &str, order: ExampleOrder) -> AssembledPrompt {
    let mut examples = examples.to_vec();
    let scored = examples.iter().all(|e| e.score.is_some());
    if scored {
        // Retrieval order is descending; a stable sort keeps ties in that order.
        examples.sort_by(|a, b| b.score.unwrap().total_cmp(&a.score.unwrap()));
        if order == ExampleOrder::AscendingSimilarity {
            examples.reverse();
        }
    }
    let mut rendered = String::from(PROMPT_HEADER);
    for e in &examples {
        rendered.push_str("Question: ");
        rendered.push_str(&e.question);
        rendered.push_str("\nAnswer: ");
        rendered.push_str(&e.answer);
        rendered.push_str("\n\n");
    }
    rendered.push_str("Question: ");
    rendered.push_str(test_question);
    rendered.push_str("\nAnswer:");
    AssembledPrompt {
        examples,
        test_question: test_question.to_string(),
        rendered,
        predicted_type: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QaPair;
    use crate::embedding::EmbeddingStore;
    use crate::qtype::CentroidModel;
    use proptest::prelude::*;

    fn train(n: usize) -> Corpus {
        Corpus::new(
            "t",
            (0..n)
                .map(|i| QaPair::new(format!("p{i:03}"), &format!("q{i}?"), &format!("a{i}."), None, "s").unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn three() -> (TypePartitionedIndex, Corpus) {
        let c = Corpus::new(
            "t",
            [("a", "x"), ("b", "x"), ("c", "y")]
                .iter()
                .map(|(id, t)| {
                    QaPair::new(*id, &format!("question {id}?"), &format!("answer {id}."), Some(t.to_string()), "s")
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let mut s = EmbeddingStore::new("i", 2).unwrap();
        s.insert("a", vec![1.0, 0.0]).unwrap();
        s.insert("b", vec![0.0, 1.0]).unwrap();
        s.insert("c", vec![0.8, 0.6]).unwrap();
        (TypePartitionedIndex::build(&s, &c).unwrap(), c)
    }

    fn ids(ex: &[PromptExample]) -> Vec<&str> {
        ex.iter().map(|e| e.id.as_str()).collect()
    }

    #[test]
    fn strategy_validation() {
        assert!(PromptStrategy::static_examples(2, 1).validate().is_ok());
        let mut s = PromptStrategy::vanilla(2);
        s.seed = Some(3);
        assert!(s.validate().is_err());
        assert!(PromptStrategy::vanilla(0).validate().is_err());
        let mut s = PromptStrategy::static_examples(2, 1);
        s.seed = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn static_is_seeded_and_fixed() {
        let t = train(100);
        let s = PromptStrategy::static_examples(2, 7);
        let a = select_static(&t, &s).unwrap();
        assert_eq!(a.len(), 2);
        assert_ne!(a[0].id, a[1].id);
        assert_eq!(select_static(&t, &s).unwrap(), a);
        assert!(a.iter().all(|e| e.score.is_none()));

        let b = select_static(&t, &PromptStrategy::static_examples(2, 8)).unwrap();
        assert!(b.iter().all(|e| t.get(&e.id).is_some()));

        assert!(select_static(&train(1), &s).is_err());
    }

    #[test]
    fn vanilla_examples() {
        let (idx, c) = three();
        let none = HashSet::new();
        let ex = select_vanilla(&idx, &c, &[1.0, 0.0], &PromptStrategy::vanilla(2), &none).unwrap();
        assert_eq!(ids(&ex), vec!["a", "c"]);
        assert!((ex[0].score.unwrap() - 1.0).abs() < 1e-12);
        assert!((ex[1].score.unwrap() - 0.8).abs() < 1e-6);
        assert_eq!(ex[1].answer, "answer c.");

        let own: HashSet<&str> = ["a"].into();
        let ex = select_vanilla(&idx, &c, &[1.0, 0.0], &PromptStrategy::vanilla(2), &own).unwrap();
        assert!(!ids(&ex).contains(&"a"));

        let mut s = EmbeddingStore::new("i", 2).unwrap();
        s.insert("a", vec![1.0, 0.0]).unwrap();
        let one = Corpus::new("t", vec![c.pairs[0].clone()]).unwrap();
        let idx = TypePartitionedIndex::build(&s, &one).unwrap();
        let ex = select_vanilla(&idx, &one, &[1.0, 0.0], &PromptStrategy::vanilla(2), &none).unwrap();
        assert_eq!(ex.len(), 1);
    }

    struct Fixed(&'static str);
    impl QuestionClassifier for Fixed {
        fn predict(&self, _: &str, _: &[f32]) -> Result<TypePrediction> {
            Ok(TypePrediction { label: self.0.into(), score: 1.0, runner_up: None })
        }
        fn name(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn typewise_filters_and_falls_back() {
        let (idx, c) = three();
        let none = HashSet::new();
        let sel = select_typewise(&idx, &Fixed("x"), &c, "q", &[1.0, 0.0], &PromptStrategy::typewise(2), &none)
            .unwrap();
        assert!(!sel.fallback);
        assert_eq!(ids(&sel.examples), vec!["a", "b"]);
        assert!(sel.examples.iter().all(|e| c.get(&e.id).unwrap().qtype.as_deref() == Some("x")));

        let sel = select_typewise(&idx, &Fixed("zzz"), &c, "q", &[1.0, 0.0], &PromptStrategy::typewise(2), &none)
            .unwrap();
        assert!(sel.fallback);
        assert_eq!(ids(&sel.examples), vec!["a", "c"]);
    }

    #[test]
    fn typewise_uses_centroid_prediction() {
        let (idx, c) = three();
        let mut cs = EmbeddingStore::new("i", 2).unwrap();
        cs.insert("x", vec![0.0, 1.0]).unwrap();
        cs.insert("y", vec![1.0, 0.0]).unwrap();
        let model = CentroidModel::from_store(&cs).unwrap();
        let none = HashSet::new();
        let sel = select_typewise(&idx, &model, &c, "q", &[1.0, 0.0], &PromptStrategy::typewise(2), &none)
            .unwrap();
        assert_eq!(sel.predicted.label, "y");
        assert_eq!(ids(&sel.examples), vec!["c"]);
    }

    fn ex(id: &str, score: Option<f64>) -> PromptExample {
        PromptExample {
            id: id.into(),
            question: format!("Q {id}?"),
            answer: format!("A {id}."),
            score,
        }
    }

    #[test]
    fn render_shapes() {
        let p = render(&[], "What is fever?", ExampleOrder::AscendingSimilarity);
        assert_eq!(p.rendered, format!("{PROMPT_HEADER}Question: What is fever?\nAnswer:"));

        let p = render(&[ex("x", Some(0.9)), ex("y", Some(0.5))], "T?", ExampleOrder::AscendingSimilarity);
        assert_eq!(p.rendered.matches("Question:").count(), 3);
        assert!(p.rendered.ends_with("\nAnswer:"));
        assert_eq!(ids(&p.examples), vec!["y", "x"]);
        assert_eq!(
            p.rendered,
            format!("{PROMPT_HEADER}Question: Q y?\nAnswer: A y.\n\nQuestion: Q x?\nAnswer: A x.\n\nQuestion: T?\nAnswer:")
        );

        let p = render(&[ex("x", Some(0.9)), ex("y", Some(0.5))], "T?", ExampleOrder::DescendingSimilarity);
        assert_eq!(ids(&p.examples), vec!["x", "y"]);

        let p = render(&[ex("s2", None), ex("s1", None)], "T?", ExampleOrder::AscendingSimilarity);
        assert_eq!(ids(&p.examples), vec!["s2", "s1"]);
    }

    #[test]
    fn audit_json_shape() {
        let p = render(&[ex("x", Some(0.9))], "T?", ExampleOrder::AscendingSimilarity);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["examples"][0]["id"], "x");
        assert_eq!(v["test_question"], "T?");
        assert!(v.get("predicted_type").is_none());
    }

    proptest! {
        #[test]
        fn render_split_round_trip(
            qs in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,3}\\?", 0..5),
            test in "[a-z]{1,8}( [a-z]{1,8}){0,3}\\?",
        ) {
            let examples: Vec<PromptExample> = qs.iter().enumerate().map(|(i, q)| PromptExample {
                id: i.to_string(), question: q.clone(), answer: "ans.".into(), score: None,
            }).collect();
            let p = render(&examples, &test, ExampleOrder::AscendingSimilarity);
            let parts: Vec<&str> = p.rendered.split("Question: ").skip(1).collect();
            let recovered: Vec<&str> = parts.iter().map(|s| s.split('\n').next().unwrap()).collect();
            let mut expected: Vec<&str> = qs.iter().map(String::as_str).collect();
            expected.push(&test);
            prop_assert_eq!(recovered, expected);
        }
    }
}
