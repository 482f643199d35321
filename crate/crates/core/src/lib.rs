//! Progressive learned point-cloud geometry codec.
//!
//! An autoencoder maps a cloud to per-channel latents, channels are ranked by
//! importance, and the entropy-coded layers are laid out so that any byte
//! prefix (at layer granularity) decodes to a coarser reconstruction.

pub mod cloud;
pub mod codec;
pub mod entropy;
pub mod density;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod taildrop;
pub mod train;

pub use cloud::{BoundingBox, CloudError, NormalizeTransform, Point3, PointCloud};
