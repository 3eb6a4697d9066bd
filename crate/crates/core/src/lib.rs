//! Metamorphic backdoor detection for code-search rankers.
//!
//! The crate simulates data-poisoning attacks against a ranking backend,
//! generates semantically equivalent follow-up queries, measures how rank
//! lists shift between the original query and its follow-ups, and flags
//! queries whose shift is anomalously large. Reference defenses (activation
//! clustering, spectral signatures, perplexity outliers) and a trigger-mining
//! analysis round out the toolkit.

pub mod analysis;
pub mod attack;
pub mod backend;
pub mod baselines;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod followup;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
