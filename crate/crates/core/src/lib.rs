//! Texture-aware training for distribution shift, at desk scale.
//!
//! This crate implements a differentiable co-occurrence texture block
//! ([`nglcm`]), a projection head that removes texture-explainable variance
//! from a classifier's logits ([`hexhead`]), reverse-gradient alternatives
//! ([`advhead`]), and the synthetic distribution-shift experiments that
//! exercise them ([`datasets`], [`harness`]). Everything runs on a small
//! self-contained neural core ([`netcore`]) over dense 64-bit matrices
//! ([`linalg`]), with exact gradients verified against finite differences.
//!
//! No BLAS, no GPU: every problem here is a few thousand rows at most, and
//! the point is auditable numerics, not throughput.

pub mod advhead;
pub mod datasets;
pub mod glcm;
pub mod harness;
pub mod hexhead;
pub mod linalg;
pub mod netcore;
pub mod nglcm;
pub mod seeding;

pub use linalg::Tensor;
