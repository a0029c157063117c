//! Domain-adaptive in-context learning at desk scale.
//!
//! The crate trains small language models on a labeled source domain while
//! adapting to an unlabeled target domain: for every source input it retrieves
//! semantically similar target-domain sentences, splices them into the model
//! input as context, and optimizes the task objective jointly with a language
//! modeling objective over the retrieved context.
//!
//! Everything here is deterministic given explicit seeds and runs without an
//! operating system (`no_std` + `alloc`); file formats, the command line and
//! network clients live in the companion `daicl-cli` crate.
//!
//! Module layout:
//!
//! - [`corpus`] — tagged-corpus and review ingestion, BIO span codecs
//! - [`embed`] — deterministic embeddings, retrieval metrics, top-k search
//! - [`prompt`] — encoder/decoder instance assembly, masking, templates,
//!   response parsing
//! - [`model`] — a small exact-gradient transformer with MLM, classifier and
//!   CRF heads plus low-rank adapters
//! - [`trainer`] — AdamW, schedules, the training variants and loops
//! - [`eval`] — metrics, significance, the run matrix and the synthetic
//!   domain-shift benchmark

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod trainer;
