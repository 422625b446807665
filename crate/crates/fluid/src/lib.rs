//! Late-fusion CTR ranking on hierarchical semantic codes.
//!
//! This crate implements a complete, deterministic pipeline for studying how
//! a ranking model can serve short-lived ("ephemeral") items whose ID
//! embeddings never receive enough traffic to train:
//!
//! 1. [`synthgen`] — a synthetic content world with a hierarchical semantic
//!    tree, ephemeral and persistent items, and an impression-log generator
//!    whose ground-truth click probabilities are known exactly.
//! 2. [`rqkmeans`] — residual-quantization k-means: a stack of codebooks fit
//!    level by level on residuals, turning a float vector into an `L`-tuple
//!    of discrete codes.
//! 3. [`lucid`] — code tuples, per-level majority-vote room codes, and the
//!    prefix n-gram embedding tables that make hierarchical prefixes
//!    addressable.
//! 4. [`ranker`] — a token-based CTR model with swappable fusion variants,
//!    from classic ID-embedding early fusion to fully ID-free late fusion.
//! 5. [`recipe`] — the three-stage warmup schedule that migrates a converged
//!    ID-based model onto semantic-code tables without a cold restart, plus
//!    the ablation matrix used in evaluation.
//! 6. [`eval`] — streaming AUC/logloss, cold/warm segment metrics, and the
//!    diagnostic curves (embedding-norm vs. age, gate inversion,
//!    vote-recovery).
//!
//! Everything is seeded: the same config and seed produce byte-identical
//! logs, codebooks, checkpoints, and metric files on every run.

pub mod config;
pub mod error;
pub mod eval;
pub mod lucid;
pub mod ranker;
pub mod recipe;
pub mod rqkmeans;
pub mod synthgen;

pub use error::Error;

/// Crate result alias; all fallible public APIs return this.
pub type Result<T> = std::result::Result<T, Error>;
