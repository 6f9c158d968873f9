//! Voigt-Reuss surrogate toolkit for 2D plane-strain composite elasticity.
//!
//! The crate bundles the pieces needed to predict and design effective
//! stiffness tensors of biphasic microstructures with hard physical
//! guarantees:
//!
//! - [`mandel`]: tensor algebra in the orthonormal Mandel basis,
//!   isotropic material models, Loewner predicates and error metrics;
//! - [`bounds`]: Voigt/Reuss/Hill bounds and mean-field references
//!   (Mori-Tanaka, Hashin-Shtrikman);
//! - [`specnorm`]: the spectral normalization that maps any admissible
//!   tensor to a symmetric matrix with spectrum in [0,1] and back, so
//!   every reconstruction is SPD and bounded by construction;
//! - [`microgen`]: parametric microstructures from thresholded cosine
//!   fields (hard and differentiable soft renders);
//! - [`fftsolver`]: an FFT-accelerated periodic homogenization oracle for
//!   plane strain;
//! - [`netgraph`]: a small reverse-mode autodiff engine with the layers,
//!   optimizer and scheduler the surrogate needs;
//! - [`surrogate`]: the residual CNN + MLP surrogate assembled on top of
//!   the renderer and the spectral back-transform, with training loops;
//! - [`inverse`]: batched multistart first-order inverse design;
//! - [`cli`]: the command-line surface, dataset pipeline and file formats.
//!
//! See the crate examples for one runnable program per capability.

pub mod bounds;
pub mod cli;
pub mod error;
pub mod fftsolver;
pub mod inverse;
pub mod linalg;
pub mod mandel;
pub mod microgen;
pub mod netgraph;
pub mod specnorm;
pub mod surrogate;

pub use error::{Error, Result};
