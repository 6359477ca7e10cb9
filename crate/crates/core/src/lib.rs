//! Coarse 6D pose estimation for novel rigid objects from rendered template
//! feature grids.
//!
//! The pipeline retrieves the nearest out-of-plane viewpoint by masked
//! patch nearest-neighbour search ([`matching`]), estimates in-plane
//! rotation, scale and 2D translation from single patch correspondences
//! under exhaustive RANSAC ([`estimator`]) and lifts the result to a full
//! pose ([`geometry`]). [`eval`] holds the pose-error metrics and the
//! segmentation robustness harness.
//!
//! # Feature flags
//! - `parallel` (default): rayon-backed retrieval, hypothesis scoring and
//!   batch inference. Results are identical with and without it.

mod binio;
pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod featuregrid;
pub mod geometry;
pub mod gt_corr;
pub mod losses;
pub mod manifest;
pub mod matching;
pub mod par;
pub mod pipeline;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
pub use par::Execution;
