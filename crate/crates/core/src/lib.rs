//! Instrument extraction from research articles: document model, section
//! detection, chunking, a model gateway, a multi-step extraction chain,
//! dictionary normalization, relation extraction and evaluation.

pub mod chain;
pub mod chunker;
pub mod doc_model;
pub mod evaluator;
pub mod gateway;
pub mod normalizer;
pub mod orchestrator;
pub mod relation;
pub mod section;
