//! Geometric semantic decoupling for forgery detectors.
//!
//! A frozen encoder summarises each batch as an anchor-centred guide matrix whose
//! Householder QR gives an orthonormal semantic basis `U`. A trainable detector of the
//! same architecture projects the patch tokens of its final blocks onto the null space
//! `I − U Uᵀ`, so the features it learns from carry no component along the batch's
//! dominant semantic directions.
//!
//! The crate also ships a synthetic benchmark in which identity content dominates the
//! pixels and the forgery artifacts change form between domains, together with the
//! training, evaluation and analysis harness used to measure the effect.

pub mod basis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gsd;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use basis::{compute_anchor, center_and_stack, build_semantic_basis, cosine_to_anchor, SemanticBasis};
pub use error::{GsdError, Result};
pub use gsd::{decouple, residual_orthogonality, semantic_component, AnchorMode, EvalBasisMode, GsdConfig};
pub use linalg::{householder_qr, matmul, numerical_rank, DenseMatrix, QrResult};
