//! Exact cosine top-k retrieval, over the whole training set and per
//! question type.
//!
//! Stored vectors are unit-norm, so a query is scored with one dot product
//! per row, accumulated in `f64`. Results are ordered by descending score,
//! then ascending id, which makes every query fully deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embedding::{l2_norm, EmbeddingStore};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Label of the unpartitioned block.
pub const ALL_LABEL: &str = "*";

/// Blocks smaller than this are scanned sequentially even in parallel mode.
const PAR_SCAN_MIN_ROWS: usize = 4096;

pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Index("cosine of a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: f64,
}

/// Descending score, then ascending id.
fn rank(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorBlock {
    pub label: String,
    pub ids: Vec<String>,
    /// Row-major `ids.len() × dim`.
    pub matrix: Vec<f32>,
    pub dim: usize,
}

impl VectorBlock {
    fn new(label: impl Into<String>, dim: usize) -> Self {
        VectorBlock {
            label: label.into(),
            ids: Vec::new(),
            matrix: Vec::new(),
            dim,
        }
    }

    fn push(&mut self, id: &str, v: &[f32]) {
        self.ids.push(id.to_string());
        self.matrix.extend_from_slice(v);
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    fn scores(&self, query: &[f32], exec: Execution) -> Vec<f64> {
        let rows: Vec<usize> = (0..self.len()).collect();
        let exec = if self.len() < PAR_SCAN_MIN_ROWS {
            Execution::Sequential
        } else {
            exec
        };
        exec.map(&rows, |&i| dot(query, self.row(i)))
    }

    fn topk(&self, query: &[f32], k: usize, exclude: &HashSet<&str>, exec: Execution) -> Vec<Neighbor> {
        let scores = self.scores(query, exec);
        let mut cands: Vec<Neighbor> = self
            .ids
            .iter()
            .zip(scores)
            .filter(|(id, _)| !exclude.contains(id.as_str()))
            .map(|(id, score)| Neighbor {
                id: id.clone(),
                score,
            })
            .collect();
        if k < cands.len() {
            cands.select_nth_unstable_by(k - 1, rank);
            cands.truncate(k);
        }
        cands.sort_by(rank);
        cands
    }

    fn to_store(&self, instruction: &str) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(instruction, self.dim)?;
        for (i, id) in self.ids.iter().enumerate() {
            store.insert(id.clone(), self.row(i).to_vec())?;
        }
        Ok(store)
    }

    fn from_store(label: &str, store: &EmbeddingStore) -> Self {
        let mut b = VectorBlock::new(label, store.dim());
        for e in store.entries() {
            b.push(&e.id, &e.vector);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypePartitionedIndex {
    pub blocks: BTreeMap<String, VectorBlock>,
    pub all_block: VectorBlock,
    pub dim: usize,
    pub instruction: String,
    pub exec: Execution,
}

/// Query parameters for [`TypePartitionedIndex::query_topk`].
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub vector: &'a [f32],
    pub k: usize,
    pub type_filter: Option<&'a str>,
    pub exclude_ids: &'a HashSet<&'a str>,
}

impl TypePartitionedIndex {
    /// Partitions the store by each id's question type in `corpus`. Pairs
    /// without a type land only in the unpartitioned block.
    pub fn build(store: &EmbeddingStore, corpus: &Corpus) -> Result<Self> {
        let by_id = corpus.by_id();
        let dim = store.dim();
        let mut all_block = VectorBlock::new(ALL_LABEL, dim);
        let mut blocks: BTreeMap<String, VectorBlock> = BTreeMap::new();
        for e in store.entries() {
            let pair = by_id
                .get(e.id.as_str())
                .ok_or_else(|| Error::Index(format!("store id {:?} is not in the corpus", e.id)))?;
            all_block.push(&e.id, &e.vector);
            if let Some(t) = &pair.qtype {
                blocks
                    .entry(t.clone())
                    .or_insert_with(|| VectorBlock::new(t.clone(), dim))
                    .push(&e.id, &e.vector);
            }
        }
        Ok(TypePartitionedIndex {
            blocks,
            all_block,
            dim,
            instruction: store.instruction().to_string(),
            exec: Execution::default(),
        })
    }

    pub fn with_exec(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn labels(&self) -> Vec<String> {
        self.blocks.keys().cloned().collect()
    }

    pub fn block(&self, label: Option<&str>) -> Result<&VectorBlock> {
        match label {
            None => Ok(&self.all_block),
            Some(l) => self.blocks.get(l).ok_or_else(|| Error::UnknownBlock {
                label: l.to_string(),
                known: self.labels(),
            }),
        }
    }

    pub fn query_topk(&self, q: Query<'_>) -> Result<Vec<Neighbor>> {
        if q.vector.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: q.vector.len(),
            });
        }
        if q.k == 0 {
            return Err(Error::Index("k must be at least 1".into()));
        }
        let block = self.block(q.type_filter)?;
        Ok(block.topk(q.vector, q.k, q.exclude_ids, self.exec))
    }

    /// Writes one store file per block plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = IndexManifest {
            dim: self.dim,
            labels: Vec::new(),
            counts: Vec::new(),
            files: Vec::new(),
            all_file: "all.jsonl".into(),
        };
        self.all_block
            .to_store(&self.instruction)?
            .save(&dir.join(&manifest.all_file))?;
        for (i, (label, block)) in self.blocks.iter().enumerate() {
            let file = format!("block-{i:03}.jsonl");
            block.to_store(&self.instruction)?.save(&dir.join(&file))?;
            manifest.labels.push(label.clone());
            manifest.counts.push(block.len());
            manifest.files.push(file);
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: IndexManifest = serde_json::from_slice(&raw)?;
        let all = EmbeddingStore::load(&dir.join(&manifest.all_file))?;
        if all.dim() != manifest.dim {
            return Err(Error::Index("manifest dim disagrees with the stored blocks".into()));
        }
        let mut blocks = BTreeMap::new();
        for ((label, file), &count) in manifest.labels.iter().zip(&manifest.files).zip(&manifest.counts) {
            let store = EmbeddingStore::load(&dir.join(file))?;
            if store.len() != count || store.dim() != manifest.dim {
                return Err(Error::Index(format!("block {label:?} disagrees with the manifest")));
            }
            blocks.insert(label.clone(), VectorBlock::from_store(label, &store));
        }
        Ok(TypePartitionedIndex {
            blocks,
            all_block: VectorBlock::from_store(ALL_LABEL, &all),
            dim: manifest.dim,
            instruction: all.instruction().to_string(),
            exec: Execution::default(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    dim: usize,
    labels: Vec<String>,
    counts: Vec<usize>,
    files: Vec<String>,
    all_file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::QaPair;

    fn corpus(types: &[(&str, Option<&str>)]) -> Corpus {
        Corpus::new(
            "c",
            types
                .iter()
                .map(|(id, t)| QaPair::new(*id, "q?", "a.", t.map(String::from), "s").unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn three() -> (EmbeddingStore, Corpus) {
        let mut s = EmbeddingStore::new("i", 2).unwrap();
        s.insert("a", vec![1.0, 0.0]).unwrap();
        s.insert("b", vec![0.0, 1.0]).unwrap();
        s.insert("c", vec![0.8, 0.6]).unwrap();
        (s, corpus(&[("a", Some("x")), ("b", Some("x")), ("c", Some("y"))]))
    }

    fn ids(ns: &[Neighbor]) -> Vec<&str> {
        ns.iter().map(|n| n.id.as_str()).collect()
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn partitions_by_label() {
        let (s, c) = three();
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        assert_eq!(idx.all_block.len(), 3);
        assert_eq!(idx.blocks["x"].len(), 2);
        assert_eq!(idx.blocks["y"].len(), 1);

        let c = corpus(&[("a", None), ("b", Some("x")), ("c", Some("x"))]);
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        assert_eq!(idx.all_block.len(), 3);
        assert!(!idx.blocks["x"].ids.contains(&"a".to_string()));

        let mut s2 = s.clone();
        s2.insert("z", vec![1.0, 1.0]).unwrap();
        let err = TypePartitionedIndex::build(&s2, &c).unwrap_err();
        assert!(err.to_string().contains("\"z\""), "{err}");
    }

    #[test]
    fn topk_examples() {
        let (s, c) = three();
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        let none = HashSet::new();
        let q = [1.0f32, 0.0];
        let got = idx
            .query_topk(Query { vector: &q, k: 2, type_filter: None, exclude_ids: &none })
            .unwrap();
        assert_eq!(ids(&got), vec!["a", "c"]);
        assert!((got[0].score - 1.0).abs() < 1e-12);
        assert!((got[1].score - 0.8).abs() < 1e-6);

        let got = idx
            .query_topk(Query { vector: &q, k: 10, type_filter: None, exclude_ids: &none })
            .unwrap();
        assert_eq!(ids(&got), vec!["a", "c", "b"]);

        let ex: HashSet<&str> = ["a"].into();
        let got = idx
            .query_topk(Query { vector: &q, k: 2, type_filter: None, exclude_ids: &ex })
            .unwrap();
        assert_eq!(ids(&got), vec!["c", "b"]);
        assert_eq!(got[1].score, 0.0);

        let got = idx
            .query_topk(Query { vector: &q, k: 5, type_filter: Some("x"), exclude_ids: &none })
            .unwrap();
        assert_eq!(ids(&got), vec!["a", "b"]);
    }

    #[test]
    fn topk_errors() {
        let (s, c) = three();
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        let none = HashSet::new();
        match idx.query_topk(Query { vector: &[1.0, 0.0], k: 1, type_filter: Some("nope"), exclude_ids: &none }) {
            Err(Error::UnknownBlock { known, .. }) => assert_eq!(known, vec!["x", "y"]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(idx
            .query_topk(Query { vector: &[1.0], k: 1, type_filter: None, exclude_ids: &none })
            .is_err());
        assert!(idx
            .query_topk(Query { vector: &[1.0, 0.0], k: 0, type_filter: None, exclude_ids: &none })
            .is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let mut s = EmbeddingStore::new("i", 2).unwrap();
        for id in ["d", "b", "c", "a"] {
            s.insert(id, vec![0.6, 0.8]).unwrap();
        }
        let c = corpus(&[("a", None), ("b", None), ("c", None), ("d", None)]);
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        let none = HashSet::new();
        let got = idx
            .query_topk(Query { vector: &[1.0, 0.0], k: 3, type_filter: None, exclude_ids: &none })
            .unwrap();
        assert_eq!(ids(&got), vec!["a", "b", "c"]);
    }

    #[test]
    fn persistence_round_trip() {
        let (s, c) = three();
        let idx = TypePartitionedIndex::build(&s, &c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        let back = TypePartitionedIndex::load(dir.path()).unwrap();
        assert_eq!(back.labels(), idx.labels());
        assert_eq!(back.all_block.ids, idx.all_block.ids);
        assert_eq!(back.blocks["x"].matrix, idx.blocks["x"].matrix);
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["counts"], serde_json::json!([2, 1]));
    }
}
