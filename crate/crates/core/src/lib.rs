//! Desk-scale unlearning laboratory for tiny autoregressive language models.
//!
//! The crate trains a small fixed-context character-level language model,
//! contaminates it with a forget set, applies one of five unlearning methods
//! (distribution-surgery soft-target training plus the GA, DPO, NPO, and FLAT
//! baselines), and measures the forget-quality / model-utility trade-off with
//! BLEU, exact match, pattern scanning, Pareto dominance, and prefix-injection
//! attacks over deterministic synthetic corpora.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod lm;
pub mod numeric;
pub mod surgery;
pub mod trainers;

pub use error::{CoreError, Result};
