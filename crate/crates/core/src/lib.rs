//! Pairwise preference prediction: given a prompt and two responses, predict
//! P(A wins), P(B wins) and P(tie) with small transformer classifiers
//! fine-tuned through low-rank adapters, then blend them.

pub mod ensemble;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod preset;
pub mod synthgen;
pub mod tokenizer;
pub mod train;
