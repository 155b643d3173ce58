//! Popularity-deconfounded training and popularity-adjusted inference for
//! latent-factor recommenders.
//!
//! Training fits `elu'(f(u, i)) * m_i^gamma` with a pairwise objective, where
//! `m_i^t` is the item's popularity in the stage of the interaction. Ranking
//! then either drops the popularity factor (deconfounded, "PD") or replaces
//! it with a forecast of next-stage popularity ("PDA").

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod popularity;
pub mod scoring;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
