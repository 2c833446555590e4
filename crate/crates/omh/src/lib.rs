//! Structured sparsity through optimally matched cluster hierarchies.
//!
//! The crate trains several parallel soft-clustering heads of increasing
//! resolution over projected features, couples adjacent levels with an
//! entropy-regularized optimal-transport plan between their cluster centers,
//! and penalizes the mismatch between each level's activations and the
//! plan-transported activations of the finer level. A small experiment
//! runner exercises the whole pipeline on synthetic data with a planted
//! two-level class hierarchy and scores it with Hungarian-matched
//! segmentation metrics.
//!
//! Modules:
//! - [`linalg`]: dense row-major matrices, cosine kernels, argmax helpers.
//! - [`transport`]: the Sinkhorn solver (log-domain by default) and plans.
//! - [`hierarchy`]: heads, expansion schedules, assignments, transported
//!   activations, plan reordering.
//! - [`losses`]: distillation, cluster, matching, and combined losses with
//!   analytic gradients.
//! - [`optim`]: Adam, the projector, and the training loop.
//! - [`eval`]: confusion matrices, Hungarian matching, accuracy, mIoU.
//! - [`synthdata`]: planted-hierarchy synthetic datasets.
//! - [`config`] / [`experiment`]: run configuration, artifacts, sweeps.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod hierarchy;
pub mod linalg;
pub mod losses;
pub mod optim;
pub mod synthdata;
pub mod transport;

pub use config::ExperimentConfig;
pub use hierarchy::{ClusterHead, FeatureBatch, HierarchyStack};
pub use linalg::DenseMatrix;
pub use transport::{SinkhornSettings, TransportPlan};
