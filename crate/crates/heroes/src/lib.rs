//! Hierarchical recurrent CTR/CVR ranking with Hawkes-decay units.
//!
//! A two-layer recurrent network estimates click-through and conversion
//! probabilities over ranked item lists. The lower (CTR) layer tracks the
//! "observation -> click" path, the upper (CVR) layer the "click ->
//! conversion" path; a boundary gate derived from clicks routes context
//! between them. Each cell keeps a behavioral state that relaxes toward an
//! inherent (context-free) state under a learned exponential decay, so the
//! model can separate what a user did in context from how relevant an item
//! is on its own.
//!
//! The crate ships three training objectives (biased cross-entropy and two
//! survival-analysis variants that debias position effects), a synthetic
//! session simulator with position-biased click sampling, ranking metrics,
//! and a train/evaluate/sweep harness behind both a library API and a CLI.

pub mod baseline;
pub mod config;
pub mod diffcore;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod record;
pub mod simulator;
pub mod sweep;
pub mod train;
pub mod unit;
