//! Differentiable SLIC superpixels.
//!
//! The forward pass ([`slic`]) is plain k-means over `[x, y, r, g, b]`
//! features. Holding the hard assignment fixed, the clustered image is
//! `Ĉ_d = A Γ Aᵀ C_d` per color channel, where `A` is the pixel-to-cluster
//! indicator and `Γ = diag(1/|S_j|)`. [`autodiff`] applies that operator as a
//! two-pass cluster mean, which is both the forward reconstruction and its
//! own transpose, so backpropagation through SLIC costs `O(N)`.
//!
//! Around that sit the pieces of an adversarial patch training loop: loss
//! terms ([`losses`]), randomized placement ([`transforms`]), a small fixed
//! scoring network ([`surrogate`]) and the optimizer and driver
//! ([`pipeline`]), plus a parameter sweep ([`sweep`]).

pub mod autodiff;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod slic;
pub mod surrogate;
pub mod sweep;
pub mod transforms;

pub use autodiff::{apply_vjp, factors_from, grad_check, toy_optimize, Functional, GradCheckReport, JacobianFactors};
pub use error::{Error, Result};
pub use image::{read_image, write_image, FeatureMatrix, Gradient, Image};
pub use losses::{mse_loss, objectness_loss, total_loss, tv_loss, LossValue};
pub use slic::{reconstruct, run_slic, ClusterState, SlicConfig};
pub use pipeline::{train_patch, OptimizerState, TrainConfig, TrainReport};
pub use surrogate::SurrogateDetector;
pub use sweep::SweepSpec;
pub use transforms::{load_scenes, BoundingBox, EotParams, SceneSpec};
