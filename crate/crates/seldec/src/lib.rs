//! Confidence-aware selective classification for multi-channel trial
//! data.
//!
//! The pipeline trains a deep ensemble of compact classifiers on
//! block-structured trials, temperature-calibrates each member on a
//! held-out calibration split, aggregates calibrated probabilities,
//! scores per-trial uncertainty (predictive entropy, mutual information,
//! top-two margin), and fits coverage-targeted abstention thresholds so
//! the system can trade coverage for accuracy at chosen operating
//! points. Evaluation covers accuracy-coverage and risk-coverage curves,
//! AURC, ECE, NLL, Brier, reliability bins, per-class acceptance, and
//! confusion matrices.

pub mod backbone;
pub mod calibration;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod prob;
pub mod rng;
pub mod selective;

pub use error::{Error, Result};
