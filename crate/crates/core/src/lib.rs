//! CAD-model-free 6D object pose estimation on 3D Gaussian objects.
//!
//! The pipeline retrieves an initial rotation from reference embeddings,
//! recovers the translation from mask statistics, then refines the pose by
//! rendering the Gaussian object and minimizing an SSIM + MS-SSIM
//! discrepancy against the segmented query.

pub mod database;
pub mod detect;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod initializer;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod ply;
pub mod refine;
pub mod render;
pub mod synth;

pub use error::{Error, Result};
