//! Pixel-similarity regularized CNN training, black-box attack evaluation,
//! and spectral analysis of adversarial perturbations — all on the CPU, all
//! reproducible from a seed.
//!
//! The crate is organized around six subsystems:
//!
//! - [`tensor`] / [`autodiff`] / [`nn`]: dense f32 tensors, a reverse-mode
//!   gradient tape, and the small tap-layer CNN with SGD and a binary model
//!   format.
//! - [`simreg`]: pixel and feature similarity matrices, thresholded
//!   similarity targets, trainable layer mixing, and the arctanh similarity
//!   loss.
//! - [`trainer`]: the joint classification + regularization training loop.
//! - [`attacks`]: random-noise attacks, FGSM and transfer attacks, and the
//!   decision-based boundary attack with its robustness score.
//! - [`analysis`]: accuracy trade-off metrics, Fourier spectra of
//!   perturbations, radial profiles, and frequency categorization.
//! - [`datasets`]: bit-exact IDX / CIFAR-binary / raw-stack ingestion,
//!   grayscale conversion, and regularization-image selection.
//!
//! [`testkit`] holds straight-line f64 reference implementations used by the
//! test suites as independent oracles.

pub mod analysis;
pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod nn;
pub mod rng;
pub mod simreg;
pub mod tensor;
pub mod testkit;
pub mod trainer;

pub use error::{Error, FormatErrorKind, Result};
pub use tensor::Tensor;

pub use autodiff::{Gradients, Tape, TapeOp, Var};
pub use nn::{build_net, LayerSpec, TapNet};
pub use simreg::{GammaMixer, SimilarityTarget, SymMatrix};
pub use trainer::ExperimentConfig;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
