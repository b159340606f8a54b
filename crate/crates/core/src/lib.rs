//! Adversarial contrastive learning: a small autodiff core, latent-class
//! synthetic data, contrastive losses, norm-constrained feature extractors,
//! input-space attacks, adversarial empirical risk minimization, downstream
//! evaluation, and the matching generalization bounds.

pub mod attacks;
pub mod bounds;
pub mod diffcore;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod norms;
pub mod par;
pub mod synthdata;
pub mod training;

pub use diffcore::{Activation, Bindings, DiffError, Graph, GraphBuilder, NodeId, Tensor};
