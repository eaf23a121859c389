//! Few-shot prompting workbench for closed-book generative medical QA.
//!
//! The crate covers the whole experimental loop: corpus ingestion and
//! preparation ([`corpus`]), question embeddings ([`embedding`]), exact cosine
//! retrieval partitioned by question type ([`vindex`]), question-type routing
//! ([`qtype`]), example selection and prompt rendering ([`promptgen`]),
//! generation backends ([`llmgw`]), BLEU/ROUGE scoring ([`textmetrics`]) and
//! experiment orchestration ([`runner`]).
//!
//! Data-parallel inner loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod llmgw;
pub mod promptgen;
pub mod qtype;
pub mod runner;
pub mod synth;
pub mod text;
pub mod textmetrics;
pub mod vindex;

pub use error::{Error, Result};
