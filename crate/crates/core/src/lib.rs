//! Multi-view volumetric reconstruction: a patch-similarity frontend scores
//! every voxel along every pixel ray, and loopy belief propagation over
//! occupancy variables with first-occupied-voxel ray potentials fuses those
//! scores into occlusion-consistent depth distributions. The unrolled
//! inference is differentiable, so the frontend and the occupancy prior can
//! be trained end to end from ground-truth depth.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod io;
pub mod learn;
pub mod mrf;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
pub use frontend::{FeatureMap, FrontendConfig, FrontendMode, LinearEmbedding, PairSet, SurfaceDistribution};
pub use geometry::{Camera, RayId, RayTraversal, Vec3, VoxelGrid};
pub use io::{Image, Tensor};
pub use mrf::{BpConfig, DepthPosterior, MessageState, PosteriorMode, RayFactor};
