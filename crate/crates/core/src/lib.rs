//! Cost-equivalent benchmarking for cluster-randomized trials.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`] holds the village/household/individual panel, outcome transforms and
//!   the regression-ready [`data::AnalysisFrame`].
//! - [`costing`] turns per-arm cost ledgers into cost per eligible household,
//!   cost per village household, per-village cost deviations and transfer schedules.
//! - [`wls`] is the shared weighted least squares core with block fixed effects,
//!   CR1 cluster-robust covariance and linear-hypothesis Wald tests.
//! - [`estimators`] assembles the named analyses (ITT, cost-equivalent interpolation,
//!   TCE, spillovers, benefit-cost ratios, attrition, modality and choice contrasts,
//!   pre-specified heterogeneity).
//! - [`selection`] implements post-double-selection LASSO.
//! - [`inference`] provides sharpened q-values and inverse-propensity attrition weights.
//! - [`forest`] is an honest causal forest plus targeting and cross-outcome summaries.
//! - [`simlab`] generates synthetic trials with known truth and runs Monte Carlo studies.
//! - [`tables`] and [`figures`] render publication-shaped CSV tables and SVG plots.

pub mod costing;
pub mod data;
pub mod error;
pub mod estimators;
pub mod figures;
pub mod forest;
pub mod inference;
pub mod linalg;
pub mod selection;
pub mod simlab;
pub mod tables;
pub mod wls;

pub use error::{Error, Result};
