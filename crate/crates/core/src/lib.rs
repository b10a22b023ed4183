//! Reconstruction of temporally consistent deformable surfaces from posed
//! multi-view image sequences.
//!
//! The pipeline couples three representations of the same scene:
//!
//! 1. explicit 3D Gaussian primitives, deformed per timestep by a forward
//!    transformation field and rendered by a software rasterizer
//!    ([`splat`], [`deform`]),
//! 2. a canonical signed-distance field rendered volumetrically, with ray
//!    samples mapped back to canonical space by a backward field that is
//!    conditioned on a sparse voxelization of the deformed Gaussians
//!    ([`voxel`], [`sdf`], [`render`]),
//! 3. an extracted triangle mesh animated by transferring the forward field
//!    to its vertices and fine-tuned against silhouettes and depth
//!    ([`mesh`]).
//!
//! Training runs in three stages ([`pipeline`]) over the loss terms in
//! [`loss`]; geometric evaluation (volumetric IoU, Chamfer distance) lives in
//! [`metrics`]. Everything differentiable runs on the reverse-mode tape in
//! [`autodiff`].

pub mod autodiff;
pub mod deform;
pub mod sdf;
pub mod voxel;
pub mod splat;

mod error;

pub use error::{Error, Result};

// Shared domain types, re-exported at the crate root.
pub use autodiff::params::ParamStore;
pub use autodiff::tape::{Tape, Var};
pub use splat::{Camera, GaussianSet, RenderMaps};
pub use voxel::SparseVoxelGrid;
