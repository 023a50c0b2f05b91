//! Mutual-information driven unsupervised domain adaptation for binary nuclei
//! segmentation.
//!
//! A labeled source domain and an unlabeled target domain are trained jointly:
//! the source drives a dice + BCE segmentation loss, and mean-pooled nuclei
//! representations from both domains are aligned by maximizing a
//! Jensen-Shannon lower bound on their mutual information.
//!
//! The crate is organized as
//! - [`data`]: synthetic domain-shift datasets, on-disk ingestion, augmentation, pairing
//! - [`nn`] and [`model`]: a small CPU convolution engine and the four trainable parts
//! - [`losses`] and [`pooling`]: segmentation loss, the JSD estimator, masked pooling
//! - [`trainer`]: the two-phase optimization loop, checkpoints, ablation grids
//! - [`metrics`]: Dice, AJI, DQ/SQ/PQ and connected-component instance extraction
//! - [`cli`]: the `mani` command-line front end

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod pooling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Real;
