//! Sparse voxelization of Gaussian sets, occupancy pruning, K-nearest
//! neighbor queries with a squared-distance threshold, and assembly of the
//! spatial condition vector for the backward deformation field.

pub mod condition;
pub mod grid;
pub mod knn;

pub use condition::{condition_vector, ConditionVector};
pub use grid::{GridConfig, SparseVoxelGrid, VoxelRecord};
pub use knn::NeighborQuery;

/// Geometric feature width: opacity-weighted mean of (scale, rotation).
pub const GEO_DIM: usize = 7;
/// Appearance feature width: opacity-weighted mean DC color.
pub const APP_DIM: usize = 3;
/// Learned per-voxel latent width.
pub const LATENT_DIM: usize = 6;
