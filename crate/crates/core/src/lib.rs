//! Score-curvature typicality statistics for out-of-distribution detection.
//!
//! A score model `s(x, σ) ≈ ∇ log p_σ(x)` is probed at one or two noise
//! levels. The squared score norm and a Hutchinson estimate of the Jacobian
//! trace are combined into the ratio `T(x) = sign · ‖s‖² / (−Tr ∇s + ε)`,
//! which concentrates near 1 on the typical set. Raw ratios are calibrated
//! with a kernel density fitted on in-distribution values, and the negative
//! log-density is used as the anomaly score.
//!
//! Module map:
//!
//! - [`schedule`]: DDPM noise schedules, forward corruption, signal-fraction
//!   curves and noise-level selection.
//! - [`score`]: the [`score::ScoreModel`] contract, analytic oracles, the MLP
//!   denoiser with forward-mode JVPs, and denoising score matching.
//! - [`typicality`]: Hutchinson trace estimation and the ratio statistic.
//! - [`calibration`]: KDE calibration, aggregation variants, thresholds.
//! - [`evaluation`]: AUROC, pair matrices, timestep ablations, NFE accounting.
//! - [`datagen`]: deterministic synthetic datasets.
//! - [`data`]: dataset container and on-disk formats.

pub mod calibration;
pub mod data;
pub mod datagen;
pub mod dual;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod parallel;
pub mod rng;
pub mod schedule;
pub mod score;
pub mod typicality;

pub use error::{Error, Result};
