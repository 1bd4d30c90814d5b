//! Variational image segmentation.
//!
//! The main solver minimizes the piecewise-constant Mumford-Shah energy
//! directly over per-pixel logits, using softmax memberships as a relaxed
//! partition ([`softseg`]), optionally with a jointly estimated multiplicative
//! bias field ([`bias`]). A classical multiphase level-set solver
//! ([`levelset`]) serves as a baseline, and [`metrics`] scores label maps
//! against ground truth.

pub mod bias;
pub mod cli;
pub mod error;
pub mod grid;
pub mod io;
pub mod kmeans;
pub mod levelset;
pub mod metrics;
pub mod phantom;
pub mod softseg;
pub mod supervision;

pub use error::{Error, Result, SolveError, Traced};
pub use grid::{Image, ScalarField};
pub use softseg::{Centroids, GradMode, Init, MsConfig, SoftSegmentation, Termination};
pub use supervision::LabelMap;
