//! Cascaded non-local feature learning for point cloud semantic segmentation.
//!
//! The core operator computes channel-wise attention over three nested
//! scopes — a centroid's k-NN neighborhood, sampled peers inside its voxel
//! superpoint, and max-pooled summaries of all superpoints — then fuses the
//! three scales into one feature per centroid. Four such modules stack into
//! an encoder; an inverse-distance interpolation decoder brings features back
//! to every point for per-point classification.
//!
//! Everything runs in double precision with hand-written reverse-mode
//! gradients, sequential ascending-index reductions, and seeded RNG, so runs
//! are bit-reproducible.

pub mod cli;
pub mod data;
pub mod error;
pub mod geom;
pub mod mat;
pub mod net;
pub mod nlops;
pub mod stats;

pub use error::{Error, Result};
pub use mat::Mat;
