//! Tri-modal representation learning for opportunistic cardiac phenotype
//! estimation, end to end on a single machine.
//!
//! The pipeline has three stages:
//!
//! 1. **Masked pretraining** — one transformer encoder per modality
//!    (localizer image stack `L`, 12-lead ECG `E`, tabular record `T`)
//!    trained to reconstruct randomly masked tokens.
//! 2. **Localizer-centric alignment** — the three encoders are projected
//!    into a shared 256-dim space and optimized with a bidirectional
//!    InfoNCE objective over the `L↔E` and `L↔T` pairs only (no direct
//!    `E↔T` edge, so non-imaging shortcuts cannot form).
//! 3. **Regression fine-tuning** — a small MLP head predicts 18 cardiac
//!    phenotypes from the localizer embedding alone.
//!
//! Because the real paired cohort is access-restricted, [`synthetic`]
//! generates a stand-in cohort from a shared latent factor model so that
//! alignment and regression are learnable and statistically checkable at
//! desk scale. [`evaluation`] provides the Bland–Altman agreement
//! statistics (mean difference, limits of agreement, Pearson R) with
//! bootstrap confidence intervals.
//!
//! Everything is pure Rust with hand-written backpropagation in `f64`;
//! gradients are validated against central finite differences in the test
//! suite. See the crate examples for one runnable program per capability.

pub mod contrastive;
pub mod data_model;
pub mod encoders;
pub mod evaluation;
pub mod interpret;
pub mod nn;
pub mod patching;
pub mod pipeline;
pub mod regression;
pub mod synthetic;

mod error;

pub use error::{Error, Result};
