//! Representation analysis for masked-autoencoder vision encoders.
//!
//! The crate covers the whole analysis path at desk scale:
//!
//! - [`store`]: the `.rscope` archive format that carries activation traces.
//! - [`encoder`]: a seeded, forward-only MAE-style encoder producing traces.
//! - [`subspace`]: class subspaces by SVD and principal angles across depth.
//! - [`attention`]: mean attention distance and attention rollout.
//! - [`perturb`]: Gaussian blur presets, rollout-guided occlusion, PSNR/SSIM.
//! - [`indicators`]: directional alignment and head-wise feature retention.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod image;
pub mod indicators;
pub mod perturb;
pub mod seed;
pub mod stats;
pub mod store;
pub mod subspace;

pub use error::{Error, Result};
