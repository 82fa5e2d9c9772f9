//! Byzantine-resilient federated conformal prediction with partial model sharing.
//!
//! The crate is organised along the pipeline it simulates:
//!
//! - [`datagen`]: synthetic non-IID linear-regression streams and CSV ingestion
//!   with Dirichlet non-IID partitioning for real data.
//! - [`training`]: partial-sharing online federated LMS (random coordinate
//!   masks on downlink and uplink) with an uplink attack hook.
//! - [`attacks`]: training-phase Gaussian model poisoning and the three
//!   calibration-phase score attacks (efficiency, coverage, random).
//! - [`conformal`]: nonconformity scores, the split-conformal quantile,
//!   prediction intervals and coverage evaluation.
//! - [`robust_calib`]: histogram characterization vectors, pairwise distances,
//!   maliciousness scores and the top-B / MAD client filters.
//! - [`theory`]: calculators for the quantile-stability, width, attenuation,
//!   separation and coverage-certification bounds.
//! - [`harness`]: seeded Monte Carlo orchestration of PRISM-FCP, Rob-FCP and
//!   FCP, with CSV/JSON result emission.
//!
//! Data-parallel loops (trials, per-client scoring, distance rows) run on rayon
//! when the default `parallel` feature is enabled and fall back to plain
//! iterators otherwise; see [`par`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod conformal;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod par;
pub mod robust_calib;
pub mod seed;
pub mod stats;
pub mod theory;
pub mod training;
pub mod vector;

pub use error::{Error, Result};
pub use vector::ModelVector;
