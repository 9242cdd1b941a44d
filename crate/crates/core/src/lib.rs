//! Bayesian functional principal components analysis.
//!
//! Curves are expanded in a discretely orthonormal spline basis; the
//! eigenfunction coefficients live on a Stiefel manifold and are sampled
//! through the polar factor of a latent Gaussian matrix, while every other
//! block has a conjugate full conditional. The crate covers the single-level
//! and multilevel (nested) models, posterior post-processing, and a
//! simulation harness for replication studies.

pub mod basis;
pub mod diagnostics;
pub mod dist;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod multilevel;
pub mod sampler;
pub mod simulate;
pub mod stiefel;

pub use basis::{build_basis, build_penalty, orthonormal_basis, BasisSystem, Grid};
pub use model::{FpcaState, FunctionalDataset, PriorConfig};
pub use stiefel::{polar_decompose, project_stiefel, sample_uniform_stiefel, StiefelPoint};
