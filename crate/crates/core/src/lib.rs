//! Crowd annotation toolkit for three-way ethics judgments.
//!
//! The crate is organised around a [`Store`] that owns the prompt corpus,
//! per-user evaluation sessions and the vote ledger. The remaining modules
//! are mostly pure functions over snapshots of that state:
//!
//! - [`corpus`]: prompt ingestion, the Latin-alphabet filter, gold prompts.
//! - [`sessioning`]: 5/40/5 batch assembly and the session state machine.
//! - [`votes`]: the vote ledger, dedup, trailing-unclear cleanup, audit log.
//! - [`trust`]: annotator scoring from gold prompts and behaviour patterns.
//! - [`aggregate`]: majority vote gated by the unclear-fraction cutoff.
//! - [`export`]: anonymised dataset export with salted user hashes.
//! - [`classifier`]: score bucketing, histograms and the embedding MLP.
//! - [`simulator`]: synthetic annotator populations driven through the store.

pub mod aggregate;
pub mod classifier;
pub mod clock;
pub mod corpus;
mod error;
pub mod export;
mod reaction;
pub mod sessioning;
pub mod simulator;
mod store;
pub mod trust;
pub mod votes;

pub use error::{Error, Result};
pub use reaction::Reaction;
pub use store::{NextPrompt, Store, StoreSnapshot, VoteOutcome};
