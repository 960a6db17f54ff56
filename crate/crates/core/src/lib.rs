//! Latent-class mixed models for irregular longitudinal biomarker data,
//! with class-linked survival analytics.
//!
//! The pipeline: [`ingest`] loads and filters raw measurements into a
//! [`ingest::Cohort`], [`model`] defines the mixture-of-linear-mixed-models
//! likelihood, [`estimator`] maximizes it with multi-start quasi-Newton
//! ascent and selects the class count, [`classify`] produces posterior
//! memberships and goodness-of-fit summaries, [`survival`] links classes to
//! time-to-event outcomes (Kaplan-Meier, Cox, horizon AUC), [`stats`] holds
//! the small-sample rank test, and [`simulate`] generates synthetic cohorts
//! from a known truth for end-to-end checks.

pub mod classify;
pub mod error;
pub mod estimator;
pub mod ingest;
pub mod model;
pub mod optimize;
pub mod simulate;
pub mod stats;
pub mod survival;

pub use error::{Error, Result};
