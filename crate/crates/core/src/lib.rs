//! Zero-shot contextual emotion recognition through narrative captions.
//!
//! Pipeline: score image regions against captioning vocabularies, assemble a
//! who/what/where/how caption, ask an LLM for emotion labels, parse the reply
//! into the 26-label taxonomy and evaluate against annotated ground truth.

pub mod annotations;
pub mod baselines;
pub mod caption;
pub mod embed;
pub mod llm;
pub mod metrics;
pub mod runner;
pub mod scoring;
pub mod taxonomy;
